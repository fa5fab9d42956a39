//! Motion-to-instruction modeling on 22-joint skeleton clips.
//!
//! The crate covers the full pipeline: clip handling ([`skeleton`]),
//! interval-based dataset construction ([`dataset`]), synthetic corpora
//! ([`synth`]), a word-level tokenizer ([`tokenizer`]), a motion-conditioned
//! encoder-decoder with reverse-mode gradients ([`model`]), two-stage
//! training ([`trainer`]) and text-generation metrics ([`metrics`]).

pub mod dataset;
pub mod error;
pub mod metrics;
pub mod model;
pub mod skeleton;
pub mod synth;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
