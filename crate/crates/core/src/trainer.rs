//! Training runs (scratch, pretrain, finetune), evaluation and the
//! six-setting comparison matrix.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, PairedExample, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_corpus, format_table, MetricReport, TableRow};
use crate::model::{
    greedy_decode, init_params, loss_and_grad, motion_matrix, Adam, Arch, Checkpoint, Mat, ModelConfig,
    ModelParameters,
};
use crate::skeleton::CoordSystem;
use crate::tokenizer::Vocabulary;

/// Finetuning defaults to this fraction of the base learning rate.
pub const FINETUNE_LR_FACTOR: f64 = 0.3;
/// Share of steps spent in linear warmup.
pub const WARMUP_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Scratch,
    Pretrain,
    Finetune,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Scratch => "scratch",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub stage: Stage,
    pub arch: Arch,
    pub coord: CoordSystem,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub init_from: Option<Checkpoint>,
    /// Shape of a freshly initialized model. `vocab_size` is taken from the
    /// vocabulary; ignored entirely when `init_from` is set.
    pub model: ModelConfig,
}

impl TrainConfig {
    /// Desk-scale defaults: 300 steps, batch 8, lr 1e-3 (x0.3 for finetune).
    pub fn new(stage: Stage, arch: Arch, coord: CoordSystem) -> TrainConfig {
        let base_lr = 1e-3;
        TrainConfig {
            stage,
            arch,
            coord,
            steps: 300,
            batch_size: 8,
            lr: if stage == Stage::Finetune {
                base_lr * FINETUNE_LR_FACTOR
            } else {
                base_lr
            },
            seed: 0,
            init_from: None,
            model: ModelConfig::desk(arch, 0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Precondition("steps and batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Precondition("learning rate must be positive".into()));
        }
        if self.stage == Stage::Finetune && self.init_from.is_none() {
            return Err(Error::Precondition("finetune requires init_from".into()));
        }
        if let Some(ck) = &self.init_from {
            if ck.params.config.arch != self.arch {
                return Err(Error::Precondition(format!(
                    "init checkpoint is {} but config asks for {}",
                    ck.params.config.arch, self.arch
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// `(step, mean batch loss)`, steps counted from 1.
    pub loss_curve: Vec<(usize, f64)>,
    pub checkpoint: Checkpoint,
    pub wall_time_s: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.loss_curve.last().map_or(f64::NAN, |&(_, l)| l)
    }
}

struct Prepared {
    frames: Mat,
    target: Vec<usize>,
}

fn prepare(examples: &[PairedExample], vocab: &Vocabulary, cfg: &ModelConfig) -> Result<Vec<Prepared>> {
    examples
        .iter()
        .map(|e| {
            let target = vocab.encode(&e.instruction, true);
            if target.len() - 1 > cfg.max_tokens {
                return Err(Error::CapExceeded {
                    what: "instruction tokens",
                    len: target.len() - 1,
                    cap: cfg.max_tokens,
                });
            }
            Ok(Prepared {
                frames: motion_matrix(&e.clip, cfg.max_frames),
                target,
            })
        })
        .collect()
}

fn check_vocab(ck: &Checkpoint, vocab: &Vocabulary) -> Result<()> {
    if ck.params.config.vocab_size != vocab.len() {
        return Err(Error::Precondition(format!(
            "checkpoint vocabulary has {} entries, given vocabulary {}",
            ck.params.config.vocab_size,
            vocab.len()
        )));
    }
    if let Some(words) = &ck.vocab {
        if words.as_slice() != vocab.words() {
            return Err(Error::Precondition("checkpoint was trained with a different vocabulary".into()));
        }
    }
    Ok(())
}

/// Trains on the examples of `data`, all of which must be Train-split and
/// carry `config.coord`.
///
/// Each step draws `batch_size` examples from a seeded reshuffle of the
/// data; the batch loss is the mean over all target tokens in the batch.
pub fn train(config: &TrainConfig, data: &DatasetManifest, vocab: &Vocabulary) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Precondition("training data is empty".into()));
    }
    if let Some(e) = data.examples.iter().find(|e| e.split == Split::Test) {
        return Err(Error::Precondition(format!(
            "example {} is from the test split",
            e.example_id
        )));
    }
    if data.coord() != Some(config.coord) {
        return Err(Error::Precondition(format!(
            "training data is not uniformly {} coordinates",
            config.coord
        )));
    }
    let start = Instant::now();

    let (mut params, mut lineage) = match &config.init_from {
        Some(ck) => {
            check_vocab(ck, vocab)?;
            (ck.params.clone(), ck.lineage.clone())
        }
        None => {
            let mut cfg = config.model.clone();
            cfg.arch = config.arch;
            cfg.vocab_size = vocab.len();
            (init_params(&cfg, config.seed)?, vec![format!("init seed={}", config.seed)])
        }
    };
    let cfg = params.config.clone();
    let items = prepare(&data.examples, vocab, &cfg)?;

    let warmup = (config.steps as f64 * WARMUP_FRACTION).round() as usize;
    let mut opt = Adam::new(&params.tensors, config.lr, warmup);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(1);
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut order_rng);
    let mut cursor = 0;

    let mut grads = params.zeros_like();
    let mut scratch = params.zeros_like();
    let mut curve = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let total_tokens: usize = batch.iter().map(|&i| items[i].target.len() - 1).sum();
        grads.iter_mut().for_each(|g| g.data.fill(0.0));
        let mut loss = 0.0;
        for &i in &batch {
            let item = &items[i];
            let weight = (item.target.len() - 1) as f64 / total_tokens as f64;
            scratch.iter_mut().for_each(|g| g.data.fill(0.0));
            let seed = dropout_rng.random();
            let l = loss_and_grad(&params, &item.frames, &item.target, Some(seed), &mut scratch)?;
            loss += weight * l;
            for (g, s) in grads.iter_mut().zip(&scratch) {
                for (a, b) in g.data.iter_mut().zip(&s.data) {
                    *a += weight * b;
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        opt.update(&mut params.tensors, &grads);
        if !params.is_finite() {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }
        curve.push((step, loss));
    }

    lineage.push(format!(
        "{} arch={} coord={} steps={} batch={} lr={} seed={} n={}",
        config.stage,
        config.arch,
        config.coord,
        config.steps,
        config.batch_size,
        config.lr,
        config.seed,
        items.len()
    ));
    Ok(TrainReport {
        loss_curve: curve,
        checkpoint: Checkpoint {
            params,
            lineage,
            vocab: Some(vocab.words().to_vec()),
        },
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Greedy-decoded instruction text for each example.
pub fn predict(params: &ModelParameters, vocab: &Vocabulary, examples: &[PairedExample]) -> Result<Vec<String>> {
    examples
        .iter()
        .map(|e| vocab.decode(&greedy_decode(params, &e.clip, params.config.max_tokens)))
        .collect()
}

/// Scores greedy predictions against the reference instructions.
pub fn evaluate(
    params: &ModelParameters,
    vocab: &Vocabulary,
    examples: &[PairedExample],
) -> Result<(MetricReport, Vec<String>)> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let preds = predict(params, vocab, examples)?;
    let refs: Vec<String> = examples.iter().map(|e| e.instruction.clone()).collect();
    Ok((evaluate_corpus(&preds, &refs)?, preds))
}

/// Vocabulary over every training text of both corpora.
pub fn shared_vocabulary(pretrain: &DatasetManifest, finetune: &DatasetManifest) -> Vocabulary {
    let texts: Vec<&str> = pretrain
        .split(Split::Train)
        .chain(finetune.split(Split::Train))
        .map(|e| e.instruction.as_str())
        .collect();
    Vocabulary::train(&texts, 1)
}

#[derive(Clone, Debug)]
pub struct MatrixConfig {
    /// Model shape shared by all settings; `arch` is set per row.
    pub model: ModelConfig,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub batch_size: usize,
    /// Pretraining and scratch learning rate; finetuning uses
    /// `lr * FINETUNE_LR_FACTOR`.
    pub lr: f64,
    pub seed: u64,
}

impl MatrixConfig {
    pub fn desk(seed: u64) -> MatrixConfig {
        MatrixConfig {
            model: ModelConfig::desk(Arch::T5Style, 0),
            pretrain_steps: 1000,
            finetune_steps: 200,
            batch_size: 8,
            lr: 1e-3,
            seed,
        }
    }
}

/// Pretraining source for one matrix row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainSource {
    None,
    World,
    Local,
}

impl PretrainSource {
    pub fn label(self) -> &'static str {
        match self {
            PretrainSource::None => "N/A",
            PretrainSource::World => "HumanML3D (world)",
            PretrainSource::Local => "HumanML3D (local)",
        }
    }

    fn slug(self) -> &'static str {
        match self {
            PretrainSource::None => "scratch",
            PretrainSource::World => "world",
            PretrainSource::Local => "local",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SettingResult {
    pub arch: Arch,
    pub source: PretrainSource,
    pub pretrain: Option<TrainReport>,
    /// The scratch run, or the finetune run after pretraining.
    pub report: TrainReport,
    pub metrics: MetricReport,
    pub predictions: Vec<String>,
}

impl SettingResult {
    pub fn row(&self) -> TableRow {
        TableRow {
            model: self.arch.label().to_string(),
            pretrain: self.source.label().to_string(),
            report: self.metrics,
        }
    }

    pub fn slug(&self) -> String {
        format!("{}-{}", self.arch, self.source.slug())
    }
}

#[derive(Clone, Debug)]
pub struct MatrixResult {
    pub settings: Vec<SettingResult>,
    pub vocab: Vocabulary,
}

#[derive(Serialize)]
struct SettingSummary<'a> {
    model: &'a str,
    pretrain: &'a str,
    metrics: &'a MetricReport,
    loss_curve: &'a [(usize, f64)],
    pretrain_loss_curve: Option<&'a [(usize, f64)]>,
    lineage: &'a [String],
    wall_time_s: f64,
    predictions: &'a [String],
}

impl MatrixResult {
    pub fn rows(&self) -> Vec<TableRow> {
        self.settings.iter().map(SettingResult::row).collect()
    }

    pub fn table(&self) -> String {
        format_table(&self.rows())
    }

    /// Writes one checkpoint and one report per setting, the shared
    /// vocabulary, and the table in text and JSON form.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for s in &self.settings {
            let slug = s.slug();
            s.report.checkpoint.save(&dir.join(format!("{slug}.ckpt.json")))?;
            let summary = SettingSummary {
                model: s.arch.label(),
                pretrain: s.source.label(),
                metrics: &s.metrics,
                loss_curve: &s.report.loss_curve,
                pretrain_loss_curve: s.pretrain.as_ref().map(|p| p.loss_curve.as_slice()),
                lineage: &s.report.checkpoint.lineage,
                wall_time_s: s.report.wall_time_s + s.pretrain.as_ref().map_or(0.0, |p| p.wall_time_s),
                predictions: &s.predictions,
            };
            let path = dir.join(format!("{slug}.report.json"));
            let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::json(&path, e))?;
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        self.vocab.save(&dir.join("vocab.json"))?;
        let table_path = dir.join("table.txt");
        std::fs::write(&table_path, self.table()).map_err(|e| Error::io(&table_path, e))?;
        let json_path = dir.join("table.json");
        let text = serde_json::to_string_pretty(&self.rows()).map_err(|e| Error::json(&json_path, e))?;
        std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
    }
}

/// Pretrain (world or local) then finetune, or train from scratch; then
/// score on the finetune test split. The finetune corpus is always used in
/// local coordinates.
pub fn run_setting(
    cfg: &MatrixConfig,
    arch: Arch,
    source: PretrainSource,
    pretrain: &DatasetManifest,
    finetune: &DatasetManifest,
    vocab: &Vocabulary,
) -> Result<SettingResult> {
    let ft_local = finetune.in_coord(CoordSystem::Local)?;
    let ft_train = ft_local.only(Split::Train);
    let ft_test: Vec<PairedExample> = ft_local.split(Split::Test).cloned().collect();

    let mut model = cfg.model.clone();
    model.arch = arch;
    let base = |stage, coord, steps, lr| TrainConfig {
        stage,
        arch,
        coord,
        steps,
        batch_size: cfg.batch_size,
        lr,
        seed: cfg.seed,
        init_from: None,
        model: model.clone(),
    };

    let (pre_report, report) = match source {
        PretrainSource::None => {
            let tc = base(Stage::Scratch, CoordSystem::Local, cfg.finetune_steps, cfg.lr);
            (None, train(&tc, &ft_train, vocab)?)
        }
        PretrainSource::World | PretrainSource::Local => {
            let coord = if source == PretrainSource::World {
                CoordSystem::World
            } else {
                CoordSystem::Local
            };
            let pre_data = pretrain.only(Split::Train).in_coord(coord)?;
            let pc = base(Stage::Pretrain, coord, cfg.pretrain_steps, cfg.lr);
            let pre = train(&pc, &pre_data, vocab)?;
            let mut fc = base(
                Stage::Finetune,
                CoordSystem::Local,
                cfg.finetune_steps,
                cfg.lr * FINETUNE_LR_FACTOR,
            );
            fc.init_from = Some(pre.checkpoint.clone());
            let ft = train(&fc, &ft_train, vocab)?;
            (Some(pre), ft)
        }
    };
    let (metrics, predictions) = evaluate(&report.checkpoint.params, vocab, &ft_test)?;
    Ok(SettingResult {
        arch,
        source,
        pretrain: pre_report,
        report,
        metrics,
        predictions,
    })
}

/// All six settings, Transformer rows first, each ordered scratch, world,
/// local.
pub fn run_matrix(cfg: &MatrixConfig, pretrain: &DatasetManifest, finetune: &DatasetManifest) -> Result<MatrixResult> {
    let vocab = shared_vocabulary(pretrain, finetune);
    let mut settings = Vec::with_capacity(6);
    for arch in [Arch::Transformer, Arch::T5Style] {
        for source in [PretrainSource::None, PretrainSource::World, PretrainSource::Local] {
            log::info!("matrix setting {} / {}", arch.label(), source.label());
            settings.push(run_setting(cfg, arch, source, pretrain, finetune, &vocab)?);
        }
    }
    Ok(MatrixResult { settings, vocab })
}
