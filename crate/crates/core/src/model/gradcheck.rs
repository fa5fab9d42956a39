//! Central-difference check of the analytic gradient.

use super::config::{Arch, ModelConfig};
use super::net::{loss_and_grad, motion_matrix};
use super::params::{init_params, ModelParameters};
use super::tensor::Mat;
use crate::error::Result;
use crate::skeleton::{CoordSystem, Frame, MotionClip, NUM_JOINTS};
use crate::tokenizer::{BOS, EOS};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub arch: Arch,
    pub scalars_checked: usize,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub worst_tensor: String,
}

pub const GRAD_CHECK_STEP: f64 = 1e-4;
/// Keeps gradients that are zero up to rounding from dominating the ratio.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

fn probe_clip() -> MotionClip {
    let frames = (0..5)
        .map(|f| Frame {
            joints: (0..NUM_JOINTS)
                .map(|j| {
                    let t = (f * NUM_JOINTS + j) as f64;
                    [(0.37 * t).sin(), (0.53 * t).cos(), 0.1 * (0.11 * t).sin()]
                })
                .collect(),
        })
        .collect();
    MotionClip {
        clip_id: "probe".into(),
        fps: 20.0,
        coord: CoordSystem::Local,
        frames,
    }
}

/// Checks every scalar of a width-8, one-layer, vocab-11 model on a
/// 5-frame clip and a 7-token target.
pub fn grad_check(arch: Arch, seed: u64) -> Result<GradCheckReport> {
    grad_check_with_step(arch, seed, GRAD_CHECK_STEP)
}

pub fn grad_check_with_step(arch: Arch, seed: u64, step: f64) -> Result<GradCheckReport> {
    let vocab = 11;
    let cfg = ModelConfig::tiny(arch, vocab);
    let mut params = init_params(&cfg, seed)?;
    // non-trivial norms and biases so their gradients are exercised
    for (t, name) in params.tensors.iter_mut().zip(&params.names) {
        if name.ends_with(".bias") || name.ends_with(".scale") || name.ends_with(".gain") {
            for (i, v) in t.data.iter_mut().enumerate() {
                *v += 0.1 * ((i as f64) * 1.7 + name.len() as f64).sin();
            }
        }
    }
    let frames = motion_matrix(&probe_clip(), cfg.max_frames);
    let target = [BOS, 5, 7, 10, 4, 6, EOS];

    let mut grads = params.zeros_like();
    loss_and_grad(&params, &frames, &target, None, &mut grads)?;

    let loss_at = |p: &ModelParameters| -> Result<f64> {
        let mut scratch: Vec<Mat> = p.zeros_like();
        loss_and_grad(p, &frames, &target, None, &mut scratch)
    };

    let mut report = GradCheckReport {
        arch,
        scalars_checked: 0,
        max_rel_error: 0.0,
        worst_tensor: String::new(),
    };
    for ti in 0..params.tensors.len() {
        for i in 0..params.tensors[ti].data.len() {
            let orig = params.tensors[ti].data[i];
            params.tensors[ti].data[i] = orig + step;
            let up = loss_at(&params)?;
            params.tensors[ti].data[i] = orig - step;
            let down = loss_at(&params)?;
            params.tensors[ti].data[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads[ti].data[i];
            let denom = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            let rel = (analytic - numeric).abs() / denom;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_tensor = params.names[ti].clone();
            }
            report.scalars_checked += 1;
        }
    }
    Ok(report)
}
