//! Parameter layout, seeded initialization and checkpoint files.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::{Arch, ModelConfig};
use super::tensor::Mat;
use crate::error::{Error, Result};
use crate::skeleton::FRAME_DIM;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Scaled(usize),
    Ones,
    Zeros,
}

struct Spec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Norm {
    pub gain: usize,
    pub bias: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct EncoderLayer {
    pub attn: Attention,
    pub attn_norm: Norm,
    pub ff: FeedForward,
    pub ff_norm: Norm,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct DecoderLayer {
    pub self_attn: Attention,
    pub self_norm: Norm,
    pub cross_attn: Attention,
    pub cross_norm: Norm,
    pub ff: FeedForward,
    pub ff_norm: Norm,
}

/// Indices of every learnable tensor, derived from the config alone.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    pub frame_proj: Linear,
    pub tok_emb: usize,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub enc_rel_bias: Option<usize>,
    pub dec_rel_bias: Option<usize>,
    pub enc_final_norm: Option<Norm>,
    pub dec_final_norm: Option<Norm>,
    pub out_proj: Linear,
}

struct Builder<'c> {
    cfg: &'c ModelConfig,
    specs: Vec<Spec>,
}

impl Builder<'_> {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.specs.push(Spec {
            name,
            rows,
            cols,
            init,
        });
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Linear {
        let w = self.add(format!("{name}.weight"), fan_in, fan_out, Init::Scaled(fan_in));
        let b = bias.then(|| self.add(format!("{name}.bias"), 1, fan_out, Init::Zeros));
        Linear { w, b }
    }

    fn norm(&mut self, name: &str) -> Norm {
        let d = self.cfg.d_model;
        let gain = self.add(format!("{name}.scale"), 1, d, Init::Ones);
        let bias = (self.cfg.arch == Arch::Transformer)
            .then(|| self.add(format!("{name}.bias"), 1, d, Init::Zeros));
        Norm { gain, bias }
    }

    fn attention(&mut self, name: &str) -> Attention {
        let d = self.cfg.d_model;
        let bias = self.cfg.arch == Arch::Transformer;
        Attention {
            q: self.linear(&format!("{name}.q"), d, d, bias),
            k: self.linear(&format!("{name}.k"), d, d, bias),
            v: self.linear(&format!("{name}.v"), d, d, bias),
            o: self.linear(&format!("{name}.o"), d, d, bias),
        }
    }

    fn feed_forward(&mut self, name: &str) -> FeedForward {
        let (d, f) = (self.cfg.d_model, self.cfg.d_ff);
        FeedForward {
            up: self.linear(&format!("{name}.up"), d, f, true),
            down: self.linear(&format!("{name}.down"), f, d, true),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<Spec>) {
    let mut b = Builder {
        cfg,
        specs: Vec::new(),
    };
    let d = cfg.d_model;
    let t5 = cfg.arch == Arch::T5Style;
    let frame_proj = b.linear("frame_proj", FRAME_DIM, d, true);
    let tok_emb = b.add("tok_emb".into(), cfg.vocab_size, d, Init::Scaled(d));
    let rel_table = |b: &mut Builder, name: &str| {
        b.add(
            name.to_string(),
            cfg.rel_buckets,
            cfg.n_heads,
            Init::Scaled(cfg.rel_buckets),
        )
    };
    let enc_rel_bias = t5.then(|| rel_table(&mut b, "encoder.rel_bias"));
    let encoder = (0..cfg.n_layers_enc)
        .map(|l| EncoderLayer {
            attn: b.attention(&format!("encoder.{l}.attn")),
            attn_norm: b.norm(&format!("encoder.{l}.attn_norm")),
            ff: b.feed_forward(&format!("encoder.{l}.ff")),
            ff_norm: b.norm(&format!("encoder.{l}.ff_norm")),
        })
        .collect();
    let enc_final_norm = t5.then(|| b.norm("encoder.final_norm"));
    let dec_rel_bias = t5.then(|| rel_table(&mut b, "decoder.rel_bias"));
    let decoder = (0..cfg.n_layers_dec)
        .map(|l| DecoderLayer {
            self_attn: b.attention(&format!("decoder.{l}.self_attn")),
            self_norm: b.norm(&format!("decoder.{l}.self_norm")),
            cross_attn: b.attention(&format!("decoder.{l}.cross_attn")),
            cross_norm: b.norm(&format!("decoder.{l}.cross_norm")),
            ff: b.feed_forward(&format!("decoder.{l}.ff")),
            ff_norm: b.norm(&format!("decoder.{l}.ff_norm")),
        })
        .collect();
    let dec_final_norm = t5.then(|| b.norm("decoder.final_norm"));
    let out_proj = b.linear("out_proj", d, cfg.vocab_size, true);
    (
        Layout {
            frame_proj,
            tok_emb,
            encoder,
            decoder,
            enc_rel_bias,
            dec_rel_bias,
            enc_final_norm,
            dec_final_norm,
            out_proj,
        },
        b.specs,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Mat>,
    pub(crate) layout: Layout,
}

/// Number of learnable scalars for a config.
pub fn param_count(cfg: &ModelConfig) -> usize {
    build_layout(cfg).1.iter().map(|s| s.rows * s.cols).sum()
}

/// Seeded initialization: weights drawn from N(0, 1) / sqrt(fan_in), norm
/// scales one, biases zero.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParameters> {
    cfg.validate()?;
    let (layout, specs) = build_layout(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = specs
        .iter()
        .map(|s| match s.init {
            Init::Zeros => Mat::zeros(s.rows, s.cols),
            Init::Ones => Mat::filled(s.rows, s.cols, 1.0),
            Init::Scaled(fan_in) => {
                let scale = 1.0 / (fan_in as f64).sqrt();
                Mat::from_vec(
                    s.rows,
                    s.cols,
                    (0..s.rows * s.cols)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            z * scale
                        })
                        .collect(),
                )
            }
        })
        .collect();
    Ok(ModelParameters {
        config: cfg.clone(),
        names: specs.into_iter().map(|s| s.name).collect(),
        tensors,
        layout,
    })
}

impl ModelParameters {
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Mat> {
        self.tensors
            .iter()
            .map(|t| Mat::zeros(t.rows, t.cols))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Mat::is_finite)
    }

    pub fn tensor(&self, name: &str) -> Option<&Mat> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Mat> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    fn from_named(config: ModelConfig, named: Vec<NamedTensor>) -> Result<ModelParameters> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        if specs.len() != named.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(specs.len());
        for (spec, t) in specs.iter().zip(named) {
            if spec.name != t.name || (spec.rows, spec.cols) != (t.rows, t.cols) {
                return Err(Error::Checkpoint(format!(
                    "tensor {} [{}x{}] does not match expected {} [{}x{}]",
                    t.name, t.rows, t.cols, spec.name, spec.rows, spec.cols
                )));
            }
            if t.data.len() != t.rows * t.cols {
                return Err(Error::Checkpoint(format!("tensor {} has wrong length", t.name)));
            }
            tensors.push(Mat::from_vec(t.rows, t.cols, t.data));
        }
        Ok(ModelParameters {
            config,
            names: specs.into_iter().map(|s| s.name).collect(),
            tensors,
            layout,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

pub const CHECKPOINT_FORMAT: &str = "maaig-checkpoint/1";

/// Self-describing checkpoint: config, how the weights came to be, the
/// vocabulary they were trained with, and every named tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParameters,
    /// One entry per stage, oldest first, e.g. `init seed=3`.
    pub lineage: Vec<String>,
    pub vocab: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: ModelConfig,
    lineage: Vec<String>,
    #[serde(default)]
    vocab: Option<Vec<String>>,
    tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            config: self.params.config.clone(),
            lineage: self.lineage.clone(),
            vocab: self.vocab.clone(),
            tensors: self
                .params
                .names
                .iter()
                .zip(&self.params.tensors)
                .map(|(name, t)| NamedTensor {
                    name: name.clone(),
                    rows: t.rows,
                    cols: t.cols,
                    data: t.data.clone(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Checkpoint> {
        let file: CheckpointFile = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", file.format)));
        }
        Ok(Checkpoint {
            params: ModelParameters::from_named(file.config, file.tensors)?,
            lineage: file.lineage,
            vocab: file.vocab,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Shape-sum by hand for each architecture.
    fn closed_form(cfg: &ModelConfig) -> usize {
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let (le, ld) = (cfg.n_layers_enc, cfg.n_layers_dec);
        let common = 66 * d + d + v * d + d * v + v;
        let ff = d * f + f + f * d + d;
        match cfg.arch {
            Arch::Transformer => {
                let attn = 4 * (d * d + d);
                let norm = 2 * d;
                common + le * (attn + ff + 2 * norm) + ld * (2 * attn + ff + 3 * norm)
            }
            Arch::T5Style => {
                let attn = 4 * d * d;
                let norm = d;
                common
                    + le * (attn + ff + 2 * norm)
                    + ld * (2 * attn + ff + 3 * norm)
                    + 2 * cfg.rel_buckets * cfg.n_heads
                    + 2 * norm
            }
        }
    }

    #[test]
    fn counts_match_closed_form() {
        for arch in [Arch::Transformer, Arch::T5Style] {
            let cfg = ModelConfig::desk(arch, 64);
            assert_eq!(param_count(&cfg), closed_form(&cfg));
            let p = init_params(&cfg, 1).unwrap();
            assert_eq!(p.num_scalars(), closed_form(&cfg));
        }
        // d=64, 2+2 layers, vocab 64, d_ff 128
        assert_eq!(param_count(&ModelConfig::desk(Arch::Transformer, 64)), 179_968);
        assert_eq!(param_count(&ModelConfig::desk(Arch::T5Style, 64)), 178_048);
        let tiny = ModelConfig::tiny(Arch::Transformer, 11);
        assert!(param_count(&tiny) <= 5000);
        assert!(param_count(&ModelConfig::tiny(Arch::T5Style, 11)) <= 5000);
    }

    #[test]
    fn init_is_deterministic_and_well_formed() {
        let cfg = ModelConfig::desk(Arch::T5Style, 40);
        let a = init_params(&cfg, 9).unwrap();
        let b = init_params(&cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.tensors, init_params(&cfg, 10).unwrap().tensors);
        for (name, t) in a.names.iter().zip(&a.tensors) {
            if name.ends_with(".scale") {
                assert!(t.data.iter().all(|&v| v == 1.0), "{name}");
            }
            if name.ends_with(".bias") {
                assert!(t.data.iter().all(|&v| v == 0.0), "{name}");
            }
        }
        let w = a.tensor("frame_proj.weight").unwrap();
        assert_eq!(w.shape(), (66, 64));
        let std = (w.data.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
        assert!((std - 1.0 / 66f64.sqrt()).abs() < 0.02, "std {std}");
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = ModelConfig::desk(Arch::Transformer, 10);
        cfg.n_heads = 3;
        assert!(matches!(init_params(&cfg, 0), Err(Error::InvalidConfig(_))));
        cfg.n_heads = 4;
        cfg.dropout = 1.0;
        assert!(init_params(&cfg, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let p = init_params(&ModelConfig::tiny(Arch::T5Style, 11), 5).unwrap();
        let ck = Checkpoint {
            params: p,
            lineage: vec!["init seed=5".into()],
            vocab: Some(vec!["a".into(), "b".into()]),
        };
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
        let broken = ck.to_json().replace("\"decoder.rel_bias\"", "\"decoder.other\"");
        assert!(matches!(
            Checkpoint::from_json(&broken),
            Err(Error::Checkpoint(_))
        ));
    }
}
