//! Forward pass: frame projection, encoder over frames, decoder over
//! tokens with cross-attention, and the teacher-forced loss.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::Arch;
use super::graph::{Graph, NodeId};
use super::params::{Attention, FeedForward, Linear, ModelParameters, Norm};
use super::tensor::Mat;
use crate::error::{Error, Result};
use crate::skeleton::{MotionClip, FRAME_DIM};
use crate::tokenizer::{BOS, EOS, PAD};

/// `max` indices spread uniformly over `0..n`, always including the first
/// and last frame. Returns every index when `n <= max`.
pub fn subsample_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    if max == 1 {
        return vec![0];
    }
    let span = (n - 1) as u64;
    let steps = (max - 1) as u64;
    (0..max as u64)
        .map(|i| ((2 * i * span + steps) / (2 * steps)) as usize)
        .collect()
}

/// Flattens each (subsampled) frame joint-major into one row of 66 values.
pub fn motion_matrix(clip: &MotionClip, max_frames: usize) -> Mat {
    let idx = subsample_indices(clip.frames.len(), max_frames);
    let mut data = Vec::with_capacity(idx.len() * FRAME_DIM);
    for &i in &idx {
        data.extend(clip.frames[i].flatten());
    }
    Mat::from_vec(idx.len(), FRAME_DIM, data)
}

/// T5 relative-position bucketing of `memory_pos - query_pos`.
pub fn relative_bucket(
    relative: i64,
    bidirectional: bool,
    num_buckets: usize,
    max_distance: usize,
) -> usize {
    let mut buckets = num_buckets as i64;
    let mut out = 0i64;
    let dist = if bidirectional {
        buckets /= 2;
        if relative > 0 {
            out += buckets;
        }
        relative.abs()
    } else {
        (-relative).max(0)
    };
    let max_exact = buckets / 2;
    if dist < max_exact {
        out += dist;
    } else {
        let large = max_exact
            + ((dist as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln()
                * (buckets - max_exact) as f64) as i64;
        out += large.min(buckets - 1);
    }
    out as usize
}

fn sinusoidal(rows: usize, d: usize) -> Mat {
    let mut m = Mat::zeros(rows, d);
    for pos in 0..rows {
        for i in 0..d {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / d as f64);
            m.data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    m
}

/// Additive attention mask: 0 where allowed, `-inf` where blocked.
fn mask_matrix(rows: usize, cols: usize, allowed: impl Fn(usize, usize) -> bool) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            if !allowed(i, j) {
                m.data[i * cols + j] = f64::NEG_INFINITY;
            }
        }
    }
    m
}

/// One forward computation on a tape.
pub(crate) struct Net<'p> {
    pub p: &'p ModelParameters,
    pub g: Graph<'p>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

/// Encoder output plus what the decoder needs to attend to it.
#[derive(Clone, Copy)]
pub(crate) struct Encoded {
    pub out: NodeId,
    pub frames: usize,
    pub valid: usize,
}

impl<'p> Net<'p> {
    pub fn new(p: &'p ModelParameters) -> Self {
        Net {
            p,
            g: Graph::new(),
            dropout: None,
        }
    }

    /// Training mode: dropout masks drawn from a generator seeded with `seed`.
    pub fn with_dropout(p: &'p ModelParameters, seed: u64) -> Self {
        let rate = p.config.dropout;
        Net {
            p,
            g: Graph::new(),
            dropout: (rate > 0.0).then(|| (rate, ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    fn param(&mut self, idx: usize) -> NodeId {
        self.g.param(idx, &self.p.tensors[idx])
    }

    fn linear(&mut self, x: NodeId, lin: &Linear) -> NodeId {
        let w = self.param(lin.w);
        let y = self.g.matmul(x, w);
        match lin.b {
            Some(b) => {
                let b = self.param(b);
                self.g.add_row(y, b)
            }
            None => y,
        }
    }

    fn norm(&mut self, x: NodeId, norm: &Norm) -> NodeId {
        let gain = self.param(norm.gain);
        match norm.bias {
            Some(b) => {
                let b = self.param(b);
                self.g.layer_norm(x, gain, b)
            }
            None => self.g.rms_norm(x, gain),
        }
    }

    fn dropout(&mut self, x: NodeId) -> NodeId {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return x;
        };
        let keep_scale = 1.0 / (1.0 - *rate);
        let n = self.g.value(x).len();
        let keep: Rc<[f64]> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < *rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        self.g.mask(x, keep)
    }

    /// Multi-head attention from `q_in` rows to `kv_in` rows. `bias` holds
    /// one additive matrix per head (relative positions); `mask` is shared.
    fn attention(
        &mut self,
        q_in: NodeId,
        kv_in: NodeId,
        attn: &Attention,
        bias: Option<&[NodeId]>,
        mask: Option<NodeId>,
    ) -> NodeId {
        let cfg = &self.p.config;
        let (heads, hd) = (cfg.n_heads, cfg.head_dim());
        let q = self.linear(q_in, &attn.q);
        let k = self.linear(kv_in, &attn.k);
        let v = self.linear(kv_in, &attn.v);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.g.slice_cols(q, h * hd, hd);
            let kh = self.g.slice_cols(k, h * hd, hd);
            let vh = self.g.slice_cols(v, h * hd, hd);
            let s = self.g.matmul_bt(qh, kh);
            let mut s = self.g.scale(s, scale);
            if let Some(b) = bias {
                s = self.g.add(s, b[h]);
            }
            if let Some(m) = mask {
                s = self.g.add(s, m);
            }
            let prob = self.g.softmax(s);
            outs.push(self.g.matmul(prob, vh));
        }
        let cat = if heads == 1 {
            outs[0]
        } else {
            self.g.concat_cols(outs)
        };
        self.linear(cat, &attn.o)
    }

    fn feed_forward(&mut self, x: NodeId, ff: &FeedForward) -> NodeId {
        let h = self.linear(x, &ff.up);
        let h = self.g.gelu(h);
        self.linear(h, &ff.down)
    }

    fn rel_biases(&mut self, table: usize, rows: usize, cols: usize, bidirectional: bool) -> Vec<NodeId> {
        let cfg = &self.p.config;
        let buckets: Rc<[usize]> = (0..rows * cols)
            .map(|ij| {
                let (i, j) = ((ij / cols) as i64, (ij % cols) as i64);
                relative_bucket(j - i, bidirectional, cfg.rel_buckets, cfg.rel_max_distance)
            })
            .collect();
        let t = self.param(table);
        (0..cfg.n_heads)
            .map(|h| self.g.table_bias(t, buckets.clone(), rows, cols, h))
            .collect()
    }

    /// Encodes `frames` (n × 66). Rows at or past `valid` are padding: they
    /// are never attended to.
    pub fn encode(&mut self, frames: &Mat, valid: usize) -> Encoded {
        let p = self.p;
        let cfg = &p.config;
        let lay = &p.layout;
        let n = frames.rows;
        let x = self.g.constant(frames.clone());
        let mut h = self.linear(x, &lay.frame_proj);
        if cfg.arch == Arch::Transformer {
            let pe = self.g.constant(sinusoidal(n, cfg.d_model));
            h = self.g.add(h, pe);
        }
        h = self.dropout(h);
        let mask = (valid < n).then(|| {
            let m = mask_matrix(n, n, |_, j| j < valid);
            self.g.constant(m)
        });
        let bias = lay
            .enc_rel_bias
            .map(|t| self.rel_biases(t, n, n, true));
        for layer in &lay.encoder {
            h = match cfg.arch {
                Arch::Transformer => {
                    let a = self.attention(h, h, &layer.attn, None, mask);
                    let a = self.dropout(a);
                    let r = self.g.add(h, a);
                    let h1 = self.norm(r, &layer.attn_norm);
                    let f = self.feed_forward(h1, &layer.ff);
                    let f = self.dropout(f);
                    let r = self.g.add(h1, f);
                    self.norm(r, &layer.ff_norm)
                }
                Arch::T5Style => {
                    let xn = self.norm(h, &layer.attn_norm);
                    let a = self.attention(xn, xn, &layer.attn, bias.as_deref(), mask);
                    let a = self.dropout(a);
                    let h1 = self.g.add(h, a);
                    let xn = self.norm(h1, &layer.ff_norm);
                    let f = self.feed_forward(xn, &layer.ff);
                    let f = self.dropout(f);
                    self.g.add(h1, f)
                }
            };
        }
        if let Some(norm) = &lay.enc_final_norm {
            h = self.norm(h, norm);
            h = self.dropout(h);
        }
        Encoded {
            out: h,
            frames: n,
            valid,
        }
    }

    /// Decoder logits (one row per input token) given an encoding.
    pub fn decode(&mut self, enc: &Encoded, tokens: &[usize]) -> NodeId {
        let p = self.p;
        let cfg = &p.config;
        let lay = &p.layout;
        let t = tokens.len();
        let emb = self.param(lay.tok_emb);
        let mut h = self.g.gather(emb, Rc::from(tokens));
        if cfg.arch == Arch::Transformer {
            let pe = self.g.constant(sinusoidal(t, cfg.d_model));
            h = self.g.add(h, pe);
        }
        h = self.dropout(h);
        let self_mask = {
            let m = mask_matrix(t, t, |i, j| j <= i && tokens[j] != PAD);
            self.g.constant(m)
        };
        let cross_mask = (enc.valid < enc.frames).then(|| {
            let valid = enc.valid;
            let m = mask_matrix(t, enc.frames, |_, j| j < valid);
            self.g.constant(m)
        });
        let bias = lay
            .dec_rel_bias
            .map(|tb| self.rel_biases(tb, t, t, false));
        for layer in &lay.decoder {
            h = match cfg.arch {
                Arch::Transformer => {
                    let a = self.attention(h, h, &layer.self_attn, None, Some(self_mask));
                    let a = self.dropout(a);
                    let r = self.g.add(h, a);
                    let h1 = self.norm(r, &layer.self_norm);
                    let c = self.attention(h1, enc.out, &layer.cross_attn, None, cross_mask);
                    let c = self.dropout(c);
                    let r = self.g.add(h1, c);
                    let h2 = self.norm(r, &layer.cross_norm);
                    let f = self.feed_forward(h2, &layer.ff);
                    let f = self.dropout(f);
                    let r = self.g.add(h2, f);
                    self.norm(r, &layer.ff_norm)
                }
                Arch::T5Style => {
                    let xn = self.norm(h, &layer.self_norm);
                    let a = self.attention(xn, xn, &layer.self_attn, bias.as_deref(), Some(self_mask));
                    let a = self.dropout(a);
                    let h1 = self.g.add(h, a);
                    let xn = self.norm(h1, &layer.cross_norm);
                    let c = self.attention(xn, enc.out, &layer.cross_attn, None, cross_mask);
                    let c = self.dropout(c);
                    let h2 = self.g.add(h1, c);
                    let xn = self.norm(h2, &layer.ff_norm);
                    let f = self.feed_forward(xn, &layer.ff);
                    let f = self.dropout(f);
                    self.g.add(h2, f)
                }
            };
        }
        if let Some(norm) = &lay.dec_final_norm {
            h = self.norm(h, norm);
            h = self.dropout(h);
        }
        self.linear(h, &lay.out_proj)
    }
}

/// Splits a `BOS … EOS [PAD…]` target into decoder inputs and labels.
/// PAD labels are excluded from the loss.
pub(crate) fn teacher_forcing(target: &[usize], max_tokens: usize) -> Result<(Vec<usize>, Rc<[Option<usize>]>)> {
    if target.first() != Some(&BOS) {
        return Err(Error::InvalidTarget("target must start with BOS".into()));
    }
    let last = target.iter().rposition(|&t| t != PAD).unwrap_or(0);
    if target[last] != EOS || last == 0 {
        return Err(Error::InvalidTarget("target must end with EOS before any padding".into()));
    }
    let inputs = target[..target.len() - 1].to_vec();
    if inputs.len() > max_tokens {
        return Err(Error::CapExceeded {
            what: "target",
            len: inputs.len(),
            cap: max_tokens,
        });
    }
    let labels = target[1..]
        .iter()
        .map(|&t| (t != PAD).then_some(t))
        .collect();
    Ok((inputs, labels))
}

/// The affine frame projection alone: one `d_model` row per (subsampled) frame.
pub fn embed_motion(params: &ModelParameters, clip: &MotionClip) -> Mat {
    let frames = motion_matrix(clip, params.config.max_frames);
    let mut net = Net::new(params);
    let x = net.g.constant(frames);
    let y = net.linear(x, &params.layout.frame_proj);
    net.g.value(y).clone()
}

/// Teacher-forced logits for every decoder position.
pub fn logits(params: &ModelParameters, frames: &Mat, valid_frames: usize, tokens: &[usize]) -> Mat {
    let mut net = Net::new(params);
    let enc = net.encode(frames, valid_frames);
    let out = net.decode(&enc, tokens);
    net.g.value(out).clone()
}

/// Mean cross-entropy over non-PAD target positions, with the logits.
pub fn forward_loss(params: &ModelParameters, clip: &MotionClip, target: &[usize]) -> Result<(f64, Mat)> {
    let (inputs, labels) = teacher_forcing(target, params.config.max_tokens)?;
    let frames = motion_matrix(clip, params.config.max_frames);
    let mut net = Net::new(params);
    let enc = net.encode(&frames, frames.rows);
    let out = net.decode(&enc, &inputs);
    let loss = net.g.cross_entropy(out, labels);
    Ok((net.g.value(loss).data[0], net.g.value(out).clone()))
}

/// Loss on one example with its gradient added into `grads`.
///
/// `dropout_seed` switches on training-mode dropout.
pub fn loss_and_grad(
    params: &ModelParameters,
    frames: &Mat,
    target: &[usize],
    dropout_seed: Option<u64>,
    grads: &mut [Mat],
) -> Result<f64> {
    let (inputs, labels) = teacher_forcing(target, params.config.max_tokens)?;
    let mut net = match dropout_seed {
        Some(seed) => Net::with_dropout(params, seed),
        None => Net::new(params),
    };
    let enc = net.encode(frames, frames.rows);
    let out = net.decode(&enc, &inputs);
    let loss = net.g.cross_entropy(out, labels);
    let node_grads = net.g.backward(loss);
    net.g.param_grads(&node_grads, grads);
    Ok(net.g.value(loss).data[0])
}
