use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use maaig_core::dataset::{build_dataset, save_annotations, AnnotationRecord, DatasetManifest, Split};
use maaig_core::metrics::{evaluate_corpus, format_table, MetricReport, TableRow};
use maaig_core::model::{beam_decode, Arch, Checkpoint, ModelConfig};
use maaig_core::skeleton::{self, ensure_local, load_clip_dir, CoordSystem, MotionClip};
use maaig_core::synth::{as_annotated_videos, gen_corpus, CorpusKind};
use maaig_core::tokenizer::Vocabulary;
use maaig_core::trainer::{run_matrix, train, MatrixConfig, Stage, TrainConfig};
use serde::Serialize;

use crate::service::{self, LoadedModel, ServiceState, DEFAULT_PORT};

#[derive(Parser, Debug)]
#[command(name = "maaig", version, about = "Motion-to-instruction tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum KindArg {
    Pretrain,
    Finetune,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum StageArg {
    Scratch,
    Pretrain,
    Finetune,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ArchArg {
    Transformer,
    T5,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CoordArg {
    World,
    Local,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    Tiny,
    Desk,
    Large,
}

impl Preset {
    fn config(self, arch: Arch) -> ModelConfig {
        match self {
            Preset::Tiny => ModelConfig::tiny(arch, 0),
            Preset::Desk => ModelConfig::desk(arch, 0),
            Preset::Large => ModelConfig::large(arch, 0),
        }
    }
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Arch {
        match a {
            ArchArg::Transformer => Arch::Transformer,
            ArchArg::T5 => Arch::T5Style,
        }
    }
}

impl From<CoordArg> for CoordSystem {
    fn from(c: CoordArg) -> CoordSystem {
        match c {
            CoordArg::World => CoordSystem::World,
            CoordArg::Local => CoordSystem::Local,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus: a ready dataset (clips/ + manifest.jsonl)
    /// and the raw videos/ + annotations.json it was cut from.
    Synth {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut annotated intervals out of source clips into a split dataset.
    BuildDataset {
        #[arg(long)]
        clips: PathBuf,
        /// JSON array of records, or the service's JSON-lines log.
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage on the train split of a dataset.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long, value_enum)]
        arch: ArchArg,
        #[arg(long, value_enum)]
        coord: CoordArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        /// Defaults to 1e-3, or 3e-4 for finetune.
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        /// Vocabulary file; otherwise taken from --init or built from the data.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Run all six scratch / world-pretrain / local-pretrain settings.
    Matrix {
        #[arg(long)]
        pretrain: PathBuf,
        #[arg(long)]
        finetune: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        pretrain_steps: usize,
        #[arg(long, default_value_t = 200)]
        finetune_steps: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
    },
    /// Print the instruction a checkpoint generates for a clip file.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long, requires = "end")]
        start: Option<f64>,
        #[arg(long, requires = "start")]
        end: Option<f64>,
        #[arg(long, default_value_t = 1)]
        beam: usize,
    },
    /// Score predictions against references, one text per line.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Map out-of-vocabulary words to <unk> on both sides before scoring.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve clips, annotations and generation on loopback.
    Serve {
        #[arg(long, env = "MAAIG_PORT", default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long)]
        clips: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { kind, n, seed, out } => synth(kind, n, seed, &out),
        Command::BuildDataset {
            clips,
            annotations,
            seed,
            out,
        } => {
            let clips = load_clip_dir(&clips)?;
            let records = read_annotations(&annotations)?;
            let manifest = build_dataset(&clips, &records, seed)?;
            manifest.save(&out)?;
            println!(
                "{} examples ({} train, {} test) written to {}",
                manifest.examples.len(),
                manifest.count(Split::Train),
                manifest.count(Split::Test),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            stage,
            arch,
            coord,
            data,
            init,
            seed,
            out,
            steps,
            batch_size,
            lr,
            preset,
            vocab,
        } => {
            let stage = match stage {
                StageArg::Scratch => Stage::Scratch,
                StageArg::Pretrain => Stage::Pretrain,
                StageArg::Finetune => Stage::Finetune,
            };
            let arch = Arch::from(arch);
            let coord = CoordSystem::from(coord);
            let manifest = DatasetManifest::load(&data)?.only(Split::Train).in_coord(coord)?;
            let init = init.map(|p| Checkpoint::load(&p)).transpose()?;
            let vocab = match (&vocab, &init) {
                (Some(path), _) => Vocabulary::load(path)?,
                (None, Some(Checkpoint { vocab: Some(words), .. })) => Vocabulary::from_words(words.clone()),
                _ => {
                    let texts: Vec<&str> = manifest.examples.iter().map(|e| e.instruction.as_str()).collect();
                    Vocabulary::train(&texts, 1)
                }
            };
            let mut cfg = TrainConfig::new(stage, arch, coord);
            cfg.steps = steps;
            cfg.batch_size = batch_size;
            cfg.seed = seed;
            cfg.init_from = init;
            cfg.model = preset.config(arch);
            if let Some(lr) = lr {
                cfg.lr = lr;
            }
            let report = train(&cfg, &manifest, &vocab)?;
            std::fs::create_dir_all(&out)?;
            report.checkpoint.save(&out.join("checkpoint.json"))?;
            vocab.save(&out.join("vocab.json"))?;
            write_json(
                &out.join("report.json"),
                &TrainSummary {
                    stage: stage.to_string(),
                    loss_curve: &report.loss_curve,
                    wall_time_s: report.wall_time_s,
                    lineage: &report.checkpoint.lineage,
                },
            )?;
            println!(
                "{} steps, final loss {:.6}, {:.1}s",
                steps,
                report.final_loss(),
                report.wall_time_s
            );
            Ok(())
        }
        Command::Matrix {
            pretrain,
            finetune,
            out,
            pretrain_steps,
            finetune_steps,
            batch_size,
            lr,
            seed,
            preset,
        } => {
            let pre = DatasetManifest::load(&pretrain)?;
            let ft = DatasetManifest::load(&finetune)?;
            let cfg = MatrixConfig {
                model: preset.config(Arch::T5Style),
                pretrain_steps,
                finetune_steps,
                batch_size,
                lr,
                seed,
            };
            let result = run_matrix(&cfg, &pre, &ft)?;
            result.save(&out)?;
            print!("{}", result.table());
            Ok(())
        }
        Command::Generate {
            ckpt,
            clip,
            start,
            end,
            beam,
        } => {
            let model = LoadedModel::load(&ckpt)?;
            let clip = MotionClip::load(&clip)?;
            let text = if beam <= 1 {
                model.generate(&clip, start.zip(end))?
            } else {
                let segment = match start.zip(end) {
                    Some((s, e)) => skeleton::clip_by_time(&clip, s, e)?,
                    None => clip,
                };
                let tokens = beam_decode(
                    &model.params,
                    &ensure_local(&segment),
                    beam,
                    model.params.config.max_tokens,
                )?;
                model.vocab.decode(&tokens)?
            };
            println!("{text}");
            Ok(())
        }
        Command::Evaluate {
            pred,
            reference,
            vocab,
            out,
        } => {
            let mut preds = read_lines(&pred)?;
            let mut refs = read_lines(&reference)?;
            if let Some(path) = vocab {
                let v = Vocabulary::load(&path)?;
                let map = |xs: &mut Vec<String>| -> anyhow::Result<()> {
                    for x in xs.iter_mut() {
                        *x = v.decode(&v.encode(x, false))?;
                    }
                    Ok(())
                };
                map(&mut preds)?;
                map(&mut refs)?;
            }
            let report = evaluate_corpus(&preds, &refs)?;
            write_json(&out, &report)?;
            print!("{}", report_table(&report));
            Ok(())
        }
        Command::Serve {
            port,
            clips,
            annotations,
            ckpt,
        } => {
            if !clips.is_dir() {
                bail!("clip directory {} does not exist", clips.display());
            }
            let model = ckpt.map(|p| LoadedModel::load(&p)).transpose()?;
            let state = ServiceState::new(clips, &annotations, model)?;
            tokio::runtime::Runtime::new()?.block_on(service::serve(state, port))
        }
    }
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    stage: String,
    loss_curve: &'a [(usize, f64)],
    wall_time_s: f64,
    lineage: &'a [String],
}

fn report_table(report: &MetricReport) -> String {
    format_table(&[TableRow {
        model: "-".into(),
        pretrain: "-".into(),
        report: *report,
    }])
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_lines(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Accepts a JSON array of records or the service's JSON-lines log.
pub fn read_annotations(path: &Path) -> anyhow::Result<Vec<AnnotationRecord>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('[') {
        return Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?);
    }
    Ok(service::read_annotation_log(path)?
        .into_iter()
        .map(|a| a.record)
        .collect())
}

fn synth(kind: KindArg, n: usize, seed: u64, out: &Path) -> anyhow::Result<()> {
    let kind = match kind {
        KindArg::Pretrain => CorpusKind::Pretrain,
        KindArg::Finetune => CorpusKind::Finetune,
    };
    let manifest = gen_corpus(kind, n, seed)?;
    manifest.save(out)?;
    let (videos, records) = as_annotated_videos(&manifest);
    let video_dir = out.join("videos");
    std::fs::create_dir_all(&video_dir)?;
    for v in &videos {
        v.save(&video_dir.join(format!("{}.json", v.clip_id)))?;
    }
    save_annotations(&out.join("annotations.json"), &records)?;
    println!(
        "{n} {kind} examples ({} train, {} test) written to {}",
        manifest.count(Split::Train),
        manifest.count(Split::Test),
        out.display()
    );
    Ok(())
}
