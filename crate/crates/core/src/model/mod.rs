//! Motion-conditioned encoder-decoder: parameters, forward pass,
//! reverse-mode gradients, decoding and the optimizer.

pub mod config;
pub mod decode;
pub mod gradcheck;
pub mod graph;
pub mod net;
pub mod optim;
pub mod params;
pub mod tensor;

pub use config::{Arch, ModelConfig};
pub use decode::{beam_decode, greedy_decode, sequence_score};
pub use gradcheck::{grad_check, grad_check_with_step, GradCheckReport};
pub use net::{embed_motion, subsample_indices, forward_loss, logits, loss_and_grad, motion_matrix};
pub use optim::Adam;
pub use params::{init_params, param_count, Checkpoint, ModelParameters};
pub use tensor::Mat;
