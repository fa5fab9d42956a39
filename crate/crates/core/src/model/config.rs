use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which of the two encoder-decoder baselines to build.
///
/// `Transformer`: sinusoidal absolute positions, post-layer LayerNorm,
/// biased attention projections.
/// `T5Style`: bucketed relative-position biases, pre-layer RMS norm with a
/// final norm per stack, bias-free attention projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Transformer,
    #[serde(rename = "t5")]
    T5Style,
}

impl Arch {
    /// Row label used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            Arch::Transformer => "Transformer",
            Arch::T5Style => "T5",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Transformer => "transformer",
            Arch::T5Style => "t5",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub d_model: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_frames: usize,
    pub max_tokens: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    /// Relative-position buckets per direction table (T5Style only).
    pub rel_buckets: usize,
    pub rel_max_distance: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: width 64, 2+2 layers, 4 heads.
    pub fn desk(arch: Arch, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            arch,
            d_model: 64,
            n_layers_enc: 2,
            n_layers_dec: 2,
            n_heads: 4,
            d_ff: 128,
            max_frames: 64,
            max_tokens: 32,
            vocab_size,
            dropout: 0.1,
            rel_buckets: 16,
            rel_max_distance: 64,
        }
    }

    /// Full-width preset with the 66 -> 512 frame projection.
    pub fn large(arch: Arch, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            arch,
            d_model: 512,
            n_layers_enc: 6,
            n_layers_dec: 6,
            n_heads: 8,
            d_ff: 2048,
            max_frames: 256,
            max_tokens: 64,
            vocab_size,
            dropout: 0.1,
            rel_buckets: 32,
            rel_max_distance: 128,
        }
    }

    /// The gradient-check configuration: width 8, one layer each side.
    pub fn tiny(arch: Arch, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            arch,
            d_model: 8,
            n_layers_enc: 1,
            n_layers_dec: 1,
            n_heads: 2,
            d_ff: 16,
            max_frames: 32,
            max_tokens: 32,
            vocab_size,
            dropout: 0.0,
            rel_buckets: 8,
            rel_max_distance: 16,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if [
            self.d_model,
            self.n_layers_enc,
            self.n_layers_dec,
            self.n_heads,
            self.d_ff,
            self.max_frames,
            self.max_tokens,
            self.vocab_size,
        ]
        .contains(&0)
        {
            return bad("all sizes and counts must be at least 1");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.arch == Arch::T5Style && (self.rel_buckets < 4 || self.rel_max_distance < 2) {
            return bad("relative bias needs at least 4 buckets and max distance 2");
        }
        Ok(())
    }
}
