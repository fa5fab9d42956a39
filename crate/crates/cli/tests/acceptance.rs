//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any fails.
//!
//! The two training-trend checks take several minutes on one core.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use maaig_cli::service::LoadedModel;
use maaig_core::dataset::{build_dataset, split_counts, AnnotationRecord, DatasetManifest, Split, SEPARATOR};
use maaig_core::metrics::{bleu_n, evaluate_tokens, meteor, rouge_l};
use maaig_core::model::{grad_check, greedy_decode, param_count, Arch, ModelConfig};
use maaig_core::skeleton::CoordSystem;
use maaig_core::synth::{as_annotated_videos, gen_corpus, CorpusKind};
use maaig_core::tokenizer::Vocabulary;
use maaig_core::trainer::{run_setting, shared_vocabulary, train, MatrixConfig, PretrainSource, Stage, TrainConfig};
use serde_json::Value;

const TOL: f64 = 1e-6;
const TREND_SEEDS: [u64; 3] = [0, 1, 2];

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < TOL
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

// ---- brute-force metric reference ----

fn brute_clipped(c: &[String], r: &[String], n: usize) -> (usize, usize) {
    if c.len() < n {
        return (0, 0);
    }
    let grams: Vec<&[String]> = c.windows(n).collect();
    let mut seen: Vec<&[String]> = Vec::new();
    let mut matched = 0;
    for g in &grams {
        if seen.contains(g) {
            continue;
        }
        seen.push(g);
        let in_c = grams.iter().filter(|h| h == &g).count();
        let in_r = if r.len() >= n { r.windows(n).filter(|h| h == g).count() } else { 0 };
        matched += in_c.min(in_r);
    }
    (matched, grams.len())
}

fn brute_bleu(cands: &[Vec<String>], refs: &[Vec<String>], n: usize) -> f64 {
    let mut log_p = 0.0;
    for k in 1..=n {
        let (mut m, mut t) = (0, 0);
        for (c, r) in cands.iter().zip(refs) {
            let (a, b) = brute_clipped(c, r, k);
            m += a;
            t += b;
        }
        if m == 0 {
            return 0.0;
        }
        log_p += (m as f64 / t as f64).ln();
    }
    let c: usize = cands.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_p / n as f64).exp()
}

/// Longest common subsequence by trying every subset of the candidate.
fn brute_lcs(c: &[String], r: &[String]) -> usize {
    assert!(c.len() < 20);
    let mut best = 0;
    for mask in 0u32..(1 << c.len()) {
        let picked: Vec<&String> = (0..c.len()).filter(|i| mask >> i & 1 == 1).map(|i| &c[i]).collect();
        if picked.len() <= best {
            continue;
        }
        let mut it = r.iter();
        if picked.iter().all(|w| it.any(|x| x == *w)) {
            best = picked.len();
        }
    }
    best
}

fn brute_rouge(c: &[String], r: &[String]) -> f64 {
    let l = brute_lcs(c, r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (rec, prec) = (l / r.len() as f64, l / c.len() as f64);
    2.44 * rec * prec / (rec + 1.44 * prec)
}

fn brute_meteor(c: &[String], r: &[String]) -> f64 {
    // pair each candidate position with the leftmost free reference match
    let mut free: Vec<Option<&String>> = r.iter().map(Some).collect();
    let mut links = Vec::new();
    for (i, w) in c.iter().enumerate() {
        if let Some(j) = free.iter().position(|x| *x == Some(w)) {
            free[j] = None;
            links.push((i, j));
        }
    }
    let m = links.len() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let chunks = 1 + links.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count();
    let (p, rec) = (m / c.len() as f64, m / r.len() as f64);
    let fmean = 10.0 * p * rec / (rec + 9.0 * p);
    fmean * (1.0 - 0.5 * (chunks as f64 / m).powi(3))
}

fn metric_oracles() -> Result<String> {
    let one = |c: &str, r: &str| (vec![words(c)], vec![words(r)]);

    let (c, r) = one("the cat sat", "the cat sat down");
    ensure!(close(bleu_n(&c, &r, 1)?, 0.716531), "BLEU-1 brevity example");
    ensure!(close(rouge_l(&c[0], &r[0]), 0.835616), "ROUGE-L example");
    let (c, r) = one("the cat the cat", "the cat sat");
    ensure!(close(bleu_n(&c, &r, 1)?, 0.5), "BLEU-1 clipping example");
    let (c, r) = one("a b c", "a b c");
    ensure!(close(meteor(&c[0], &r[0]), 0.981481), "METEOR identity example");
    let (c, r) = one("bend your knees more on landing", "bend your knees more on landing");
    for n in 1..=4 {
        ensure!(close(bleu_n(&c, &r, n)?, 1.0), "BLEU-{n} identity");
    }
    let (c, r) = one("c b a", "a b c");
    ensure!(close(meteor(&c[0], &r[0]), 0.5), "METEOR reversed example");
    let (c, r) = one("x y", "a b");
    ensure!(rouge_l(&c[0], &r[0]) == 0.0 && meteor(&c[0], &r[0]) == 0.0, "disjoint example");

    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/metric_oracle.json");
    let oracle: Value = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    let pairs = oracle["pairs"].as_array().context("pairs")?;
    let cands: Vec<Vec<String>> = pairs.iter().map(|p| words(p["candidate"].as_str().unwrap())).collect();
    let refs: Vec<Vec<String>> = pairs.iter().map(|p| words(p["reference"].as_str().unwrap())).collect();
    ensure!(cands.len() == 5);
    let report = evaluate_tokens(&cands, &refs)?;

    let mean = |f: fn(&[String], &[String]) -> f64| {
        cands.iter().zip(&refs).map(|(c, r)| f(c, r)).sum::<f64>() / cands.len() as f64
    };
    let brute = [
        brute_bleu(&cands, &refs, 1),
        brute_bleu(&cands, &refs, 2),
        brute_bleu(&cands, &refs, 3),
        brute_bleu(&cands, &refs, 4),
        mean(brute_meteor),
        mean(brute_rouge),
    ];
    let keys = ["bleu_1", "bleu_2", "bleu_3", "bleu_4", "meteor", "rouge_l"];
    let mut worst: f64 = 0.0;
    for ((key, got), b) in keys.iter().zip(report.scores()).zip(brute) {
        let want = oracle[key].as_f64().context("oracle value")?;
        worst = worst.max((got - want).abs()).max((got - b).abs());
        ensure!(close(got, want), "{key}: {got} vs oracle {want}");
        ensure!(close(got, b), "{key}: {got} vs brute force {b}");
    }
    Ok(format!("max deviation {worst:.1e}"))
}

fn gradient_check() -> Result<String> {
    let mut parts = Vec::new();
    for arch in [Arch::Transformer, Arch::T5Style] {
        let r = grad_check(arch, 7)?;
        let total = param_count(&ModelConfig::tiny(arch, 11));
        ensure!(r.scalars_checked == total, "{arch}: checked {} of {total}", r.scalars_checked);
        ensure!(r.max_rel_error < 1e-4, "{arch}: {:.2e} in {}", r.max_rel_error, r.worst_tensor);
        parts.push(format!("{arch} {:.1e} over {total}", r.max_rel_error));
    }
    Ok(parts.join(", "))
}

fn overfit() -> Result<String> {
    let mut data = gen_corpus(CorpusKind::Finetune, 1, 3)?.in_coord(CoordSystem::Local)?;
    data.examples[0].split = Split::Train;
    data.examples[0].instruction = format!("increase your rotation speed{SEPARATOR}bend your knees more on landing");
    let vocab = Vocabulary::train(&[data.examples[0].instruction.as_str()], 1);
    let mut cfg = TrainConfig::new(Stage::Scratch, Arch::T5Style, CoordSystem::Local);
    cfg.steps = 500;
    cfg.batch_size = 1;
    cfg.lr = 1e-3;
    let report = train(&cfg, &data, &vocab)?;
    let loss = report.final_loss();
    ensure!(loss < 0.05, "final loss {loss}");
    let p = &report.checkpoint.params;
    let out = greedy_decode(p, &data.examples[0].clip, p.config.max_tokens);
    ensure!(out == vocab.encode(&data.examples[0].instruction, true), "greedy output {out:?}");
    Ok(format!("final loss {loss:.4} after {} steps", cfg.steps))
}

/// Test BLEU-4 per seed for scratch, world-pretrained and local-pretrained T5.
struct TrendRuns {
    scores: Vec<[f64; 3]>,
    elapsed: Duration,
}

fn trend_runs() -> Result<TrendRuns> {
    let t = Instant::now();
    let mut scores = Vec::new();
    for seed in TREND_SEEDS {
        let pre = gen_corpus(CorpusKind::Pretrain, 512, 100 + seed)?;
        let ft = gen_corpus(CorpusKind::Finetune, 164, 200 + seed)?;
        let vocab = shared_vocabulary(&pre, &ft);
        let cfg = MatrixConfig::desk(seed);
        let mut row = [0.0; 3];
        for (slot, source) in [PretrainSource::None, PretrainSource::World, PretrainSource::Local].into_iter().enumerate() {
            row[slot] = run_setting(&cfg, Arch::T5Style, source, &pre, &ft, &vocab)?.metrics.bleu_4;
        }
        println!("  seed {seed}: BLEU-4 scratch {:.4}  world {:.4}  local {:.4}", row[0], row[1], row[2]);
        scores.push(row);
    }
    Ok(TrendRuns { scores, elapsed: t.elapsed() })
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn pretraining_helps(runs: &TrendRuns) -> Result<String> {
    let scratch = median(runs.scores.iter().map(|r| r[0]).collect());
    let local = median(runs.scores.iter().map(|r| r[2]).collect());
    ensure!(local > scratch, "median BLEU-4 pretrained {local:.4} vs scratch {scratch:.4}");
    Ok(format!("median BLEU-4 pretrained {local:.4} > scratch {scratch:.4}"))
}

fn local_beats_world(runs: &TrendRuns) -> Result<String> {
    let world = median(runs.scores.iter().map(|r| r[1]).collect());
    let local = median(runs.scores.iter().map(|r| r[2]).collect());
    ensure!(local >= world, "median BLEU-4 local {local:.4} vs world {world:.4}");
    Ok(format!("median BLEU-4 local {local:.4} >= world {world:.4}"))
}

fn maaig(args: &[&str]) -> Result<String> {
    let out = Command::new(env!("CARGO_BIN_EXE_maaig")).args(args).env("RUST_LOG", "warn").output()?;
    ensure!(out.status.success(), "maaig {}: {}", args[0], String::from_utf8_lossy(&out.stderr));
    Ok(String::from_utf8(out.stdout)?)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files_with_suffix(dir: &Path, suffix: &str) -> Result<usize> {
    let mut n = 0;
    for e in std::fs::read_dir(dir)? {
        n += e?.file_name().to_string_lossy().ends_with(suffix) as usize;
    }
    Ok(n)
}

fn six_setting_matrix() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let (pre, ft) = (dir.path().join("pre"), dir.path().join("ft"));
    maaig(&["synth", "--kind", "pretrain", "--n", "24", "--seed", "5", "--out", p(&pre)])?;
    maaig(&["synth", "--kind", "finetune", "--n", "20", "--seed", "6", "--out", p(&ft)])?;
    let mut tables = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let printed = maaig(&[
            "matrix", "--pretrain", p(&pre), "--finetune", p(&ft), "--out", p(&out), "--preset", "tiny",
            "--pretrain-steps", "20", "--finetune-steps", "10", "--batch-size", "4", "--seed", "3",
        ])?;
        let table = std::fs::read(out.join("table.txt"))?;
        ensure!(printed.as_bytes() == table, "printed table differs from table.txt");
        ensure!(files_with_suffix(&out, ".ckpt.json")? == 6, "expected 6 checkpoints");
        // reports carry wall-clock time, so compare checkpoints instead
        let ckpts: BTreeMap<String, Vec<u8>> = std::fs::read_dir(&out)?
            .map(|e| e.unwrap().path())
            .filter(|f| f.to_string_lossy().ends_with(".ckpt.json"))
            .map(|f| (f.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&f).unwrap()))
            .collect();
        tables.push((table, std::fs::read(out.join("table.json"))?, ckpts));
    }
    ensure!(tables[0] == tables[1], "re-run differs");

    let text = String::from_utf8(tables[0].0.clone())?;
    let lines: Vec<&str> = text.lines().collect();
    ensure!(lines.len() == 7, "table has {} lines", lines.len());
    let header: Vec<&str> = lines[0].split_whitespace().collect();
    ensure!(header[2..] == ["Bleu_1", "Bleu_2", "Bleu_3", "Bleu_4", "METEOR", "ROUGE_L"], "header {header:?}");
    let labels = [
        ("Transformer", "N/A"),
        ("Transformer", "HumanML3D (world)"),
        ("Transformer", "HumanML3D (local)"),
        ("T5", "N/A"),
        ("T5", "HumanML3D (world)"),
        ("T5", "HumanML3D (local)"),
    ];
    for (line, (model, pretrain)) in lines[1..].iter().zip(labels) {
        ensure!(line.starts_with(model) && line.contains(pretrain), "row {line:?}");
        let nums = line.split_whitespace().rev().take(6).filter(|t| t.parse::<f64>().is_ok()).count();
        ensure!(nums == 6, "row {line:?} lacks six scores");
    }
    Ok("6x6 table, 6 checkpoints, identical re-run".into())
}

fn dataset_pipeline() -> Result<String> {
    let (clips, whole) = as_annotated_videos(&gen_corpus(CorpusKind::Finetune, 20, 11)?);
    ensure!(clips.len() == 20);
    let mut records = whole.clone();
    // ten second opinions on existing intervals, ten new sub-intervals
    for r in &whole[..10] {
        records.push(AnnotationRecord {
            instruction: "watch your landing".into(),
            annotator: Some("second".into()),
            ..r.clone()
        });
    }
    for r in &whole[10..] {
        records.push(AnnotationRecord {
            start_s: 0.1,
            end_s: r.end_s - 0.1,
            instruction: "keep your arms in".into(),
            ..r.clone()
        });
    }
    ensure!(records.len() == 40);

    let a = build_dataset(&clips, &records, 9)?;
    let dir = tempfile::tempdir()?;
    a.save(&dir.path().join("a"))?;
    build_dataset(&clips, &records, 9)?.save(&dir.path().join("b"))?;
    // interleaving groups differently changes nothing; order within a group is kept
    let mut shuffled = records.clone();
    shuffled.sort_by(|x, y| y.video_id.cmp(&x.video_id));
    build_dataset(&clips, &shuffled, 9)?.save(&dir.path().join("c"))?;
    let read = |d: &str| std::fs::read(dir.path().join(d).join("manifest.jsonl"));
    ensure!(read("a")? == read("b")? && read("a")? == read("c")?, "manifests differ");
    ensure!(DatasetManifest::load(&dir.path().join("a"))?.examples == a.examples, "reload differs");

    ensure!(a.examples.len() == 30, "{} examples", a.examples.len());
    let counts = (a.count(Split::Train), a.count(Split::Test));
    ensure!(counts == split_counts(30) && counts == (27, 3), "counts {counts:?}");
    ensure!(split_counts(164) == (148, 16));
    let merged = a.examples.iter().filter(|e| e.instruction.ends_with(&format!("{SEPARATOR}watch your landing"))).count();
    ensure!(merged == 10, "{merged} merged instructions");
    let sub = a.examples.iter().filter(|e| e.instruction == "keep your arms in").count();
    ensure!(sub == 10, "{sub} sub-interval examples");
    for r in &whole[..10] {
        let want = format!("{}{SEPARATOR}watch your landing", r.instruction);
        ensure!(a.examples.iter().any(|e| e.instruction == want), "missing merge for {}", r.video_id);
    }
    ensure!(a.examples.iter().all(|e| e.clip.coord == CoordSystem::Local));

    let big = gen_corpus(CorpusKind::Finetune, 164, 1)?;
    let (clips, records) = as_annotated_videos(&big);
    let built = build_dataset(&clips, &records, 4)?;
    ensure!((built.count(Split::Train), built.count(Split::Test)) == (148, 16));
    Ok("30 examples (27/3), 10 merged, 164 -> (148, 16)".into())
}

fn coordinate_invariance() -> Result<String> {
    let corpus = gen_corpus(CorpusKind::Finetune, 24, 21)?;
    let data = corpus.in_coord(CoordSystem::Local)?.only(Split::Train);
    let texts: Vec<&str> = corpus.examples.iter().map(|e| e.instruction.as_str()).collect();
    let vocab = Vocabulary::train(&texts, 1);
    let mut cfg = TrainConfig::new(Stage::Scratch, Arch::T5Style, CoordSystem::Local);
    cfg.model = ModelConfig::tiny(Arch::T5Style, 0);
    cfg.steps = 400;
    cfg.batch_size = 4;
    cfg.lr = 3e-3;
    let model = LoadedModel::from_checkpoint(train(&cfg, &data, &vocab)?.checkpoint)?;

    let offsets = [[3.25, -1.5, 0.125], [-40.0, 17.75, 0.0], [0.0009765625, 0.5, -2.0]];
    let mut outputs = std::collections::BTreeSet::new();
    let mut checked = 0;
    for ex in &corpus.examples {
        ensure!(ex.clip.coord == CoordSystem::World);
        let base = model.generate(&ex.clip, None)?;
        let half = ex.clip.duration_s() / 2.0;
        let part = model.generate(&ex.clip, Some((0.0, half)))?;
        for off in offsets {
            let moved = ex.clip.translated(off);
            ensure!(model.generate(&moved, None)? == base, "{} moved by {off:?}", ex.example_id);
            ensure!(model.generate(&moved, Some((0.0, half)))? == part, "{} interval", ex.example_id);
            checked += 2;
        }
        outputs.insert(base);
    }
    ensure!(outputs.len() > 2, "fixture model is too degenerate: {outputs:?}");
    Ok(format!("{checked} translated generations identical, {} distinct outputs", outputs.len()))
}

struct Criterion {
    name: &'static str,
    limit: Duration,
}

fn report(c: &Criterion, result: std::thread::Result<Result<String>>, elapsed: Duration) -> bool {
    let (pass, detail) = match result {
        Ok(Ok(d)) if elapsed <= c.limit => (true, d),
        Ok(Ok(d)) => (false, format!("{d}; took longer than {:?}", c.limit)),
        Ok(Err(e)) => (false, format!("{e:#}")),
        Err(_) => (false, "panicked".into()),
    };
    println!(
        "{} {:<34} {:>8.1}s  {}",
        if pass { "PASS" } else { "FAIL" },
        c.name,
        elapsed.as_secs_f64(),
        detail
    );
    pass
}

fn run(name: &'static str, limit_s: u64, f: impl FnOnce() -> Result<String>) -> bool {
    let t = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    report(&Criterion { name, limit: Duration::from_secs(limit_s) }, result, t.elapsed())
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filter.is_empty() || filter.iter().any(|f| name.contains(f.as_str()));
    let mut results = Vec::new();

    let quick: [(&'static str, u64, fn() -> Result<String>); 6] = [
        ("metric oracle equivalence", 1, metric_oracles),
        ("gradient check", 30, gradient_check),
        ("overfit single pair", 120, overfit),
        ("six-setting matrix", 600, six_setting_matrix),
        ("dataset pipeline", 60, dataset_pipeline),
        ("coordinate invariance", 120, coordinate_invariance),
    ];
    for (name, limit, f) in quick {
        if wanted(name) {
            results.push(run(name, limit, f));
        }
    }

    if wanted("pretraining helps") || wanted("local coordinates help") {
        let runs = catch_unwind(trend_runs);
        let elapsed = runs.as_ref().map(|r| r.as_ref().map(|r| r.elapsed).ok()).ok().flatten().unwrap_or_default();
        let limit = Duration::from_secs(20 * 60);
        let checks: [(&'static str, fn(&TrendRuns) -> Result<String>); 2] =
            [("pretraining helps", pretraining_helps), ("local coordinates help", local_beats_world)];
        for (name, check) in checks {
            let result = match &runs {
                Ok(Ok(r)) => Ok(check(r)),
                Ok(Err(e)) => Ok(Err(anyhow::anyhow!("{e:#}"))),
                Err(_) => Err(Box::new("panicked") as Box<dyn std::any::Any + Send>),
            };
            results.push(report(&Criterion { name, limit }, result, elapsed));
        }
    }

    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
