//! A small reverse-mode tape over [`Mat`] values.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and backward is a single reverse sweep. Parameter
//! leaves borrow their tensors; their gradients are collected by index.

use std::borrow::Cow;
use std::rc::Rc;

use super::tensor::{dot, gemm_acc, gemm_at_acc, gemm_bt_acc, Mat};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;
const RMS_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulBT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    RmsNorm {
        x: NodeId,
        gain: NodeId,
        inv_rms: Vec<f64>,
    },
    Softmax(NodeId),
    Gather {
        table: NodeId,
        ids: Rc<[usize]>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    TableBias {
        table: NodeId,
        buckets: Rc<[usize]>,
        column: usize,
    },
    Mask {
        x: NodeId,
        keep: Rc<[f64]>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Rc<[Option<usize>]>,
        probs: Mat,
    },
}

struct Node<'a> {
    value: Cow<'a, Mat>,
    op: Op,
    param: Option<usize>,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            param: None,
        });
        self.nodes.len() - 1
    }

    pub fn param(&mut self, index: usize, value: &'a Mat) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            param: Some(index),
        });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Mat::zeros(va.rows, vb.cols);
        gemm_acc(&mut out, va, vb);
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Mat::zeros(va.rows, vb.rows);
        gemm_bt_acc(&mut out, va, vb);
        self.push(out, Op::MatMulBT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        let r = self.value(row);
        debug_assert_eq!((r.rows, r.cols), (1, out.cols));
        for i in 0..out.rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(a, s))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            let x = *v;
            *v = 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh());
        }
        self.push(out, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let vx = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = Mat::zeros(vx.rows, vx.cols);
        let mut out = Mat::zeros(vx.rows, vx.cols);
        let mut inv_std = Vec::with_capacity(vx.rows);
        let n = vx.cols as f64;
        for i in 0..vx.rows {
            let row = vx.row(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for j in 0..vx.cols {
                let h = (row[j] - mean) * inv;
                xhat.data[i * vx.cols + j] = h;
                out.data[i * vx.cols + j] = h * g.data[j] + b.data[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId) -> NodeId {
        let vx = self.value(x);
        let g = self.value(gain);
        let mut out = Mat::zeros(vx.rows, vx.cols);
        let mut inv_rms = Vec::with_capacity(vx.rows);
        for i in 0..vx.rows {
            let row = vx.row(i);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / vx.cols as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            for j in 0..vx.cols {
                out.data[i * vx.cols + j] = row[j] * inv * g.data[j];
            }
        }
        self.push(out, Op::RmsNorm { x, gain, inv_rms })
    }

    /// Row softmax; entries equal to `-inf` get probability exactly 0.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for i in 0..out.rows {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                row.fill(0.0);
                continue;
            }
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = if *v == f64::NEG_INFINITY {
                    0.0
                } else {
                    (*v - max).exp()
                };
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::Softmax(a))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: NodeId, ids: Rc<[usize]>) -> NodeId {
        let t = self.value(table);
        let mut out = Mat::zeros(ids.len(), t.cols);
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(id));
        }
        self.push(out, Op::Gather { table, ids })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> NodeId {
        let v = self.value(x);
        let mut out = Mat::zeros(v.rows, width);
        for i in 0..v.rows {
            out.row_mut(i)
                .copy_from_slice(&v.row(i)[start..start + width]);
        }
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in &parts {
            let v = self.value(p);
            for i in 0..rows {
                out.row_mut(i)[off..off + v.cols].copy_from_slice(v.row(i));
            }
            off += v.cols;
        }
        self.push(out, Op::ConcatCols(parts))
    }

    /// `rows × cols` matrix whose entry `(i, j)` is
    /// `table[buckets[i * cols + j], column]`.
    pub fn table_bias(
        &mut self,
        table: NodeId,
        buckets: Rc<[usize]>,
        rows: usize,
        cols: usize,
        column: usize,
    ) -> NodeId {
        let t = self.value(table);
        let out = Mat::from_vec(
            rows,
            cols,
            buckets.iter().map(|&b| t.get(b, column)).collect(),
        );
        self.push(
            out,
            Op::TableBias {
                table,
                buckets,
                column,
            },
        )
    }

    /// Elementwise multiply by a fixed mask (dropout).
    pub fn mask(&mut self, x: NodeId, keep: Rc<[f64]>) -> NodeId {
        let mut out = self.value(x).clone();
        for (v, k) in out.data.iter_mut().zip(keep.iter()) {
            *v *= k;
        }
        self.push(out, Op::Mask { x, keep })
    }

    /// Mean token cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Rc<[Option<usize>]>) -> NodeId {
        let l = self.value(logits);
        let mut probs = Mat::zeros(l.rows, l.cols);
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..l.rows {
            let row = l.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for (p, v) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            if let Some(t) = targets[i] {
                total += lse - row[t];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            Mat::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
        )
    }

    /// Reverse sweep from a `1 × 1` node. Returns one optional gradient per
    /// node; parameters are read back with [`Graph::param_grads`].
    pub fn backward(&self, root: NodeId) -> Vec<Option<Mat>> {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Mat::filled(1, 1, 1.0));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        grads
    }

    /// Adds each parameter leaf's gradient into `out[param_index]`.
    pub fn param_grads(&self, grads: &[Option<Mat>], out: &mut [Mat]) {
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Some(p), Some(g)) = (node.param, g) {
                out[p].add_assign(g);
            }
        }
    }

    fn propagate(&self, id: NodeId, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                gemm_bt_acc(slot(grads, *a, va), g, vb);
                gemm_at_acc(slot(grads, *b, vb), va, g);
            }
            Op::MatMulBT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                gemm_acc(slot(grads, *a, va), g, vb);
                gemm_at_acc(slot(grads, *b, vb), g, va);
            }
            Op::Add(a, b) => {
                slot(grads, *a, g).add_assign(g);
                slot(grads, *b, g).add_assign(g);
            }
            Op::AddRow(a, row) => {
                slot(grads, *a, g).add_assign(g);
                let vr = self.value(*row);
                let gr = slot(grads, *row, vr);
                for i in 0..g.rows {
                    for (o, v) in gr.data.iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
            }
            Op::Scale(a, s) => {
                let ga = slot(grads, *a, g);
                for (o, v) in ga.data.iter_mut().zip(&g.data) {
                    *o += s * v;
                }
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let ga = slot(grads, *a, va);
                for ((o, &x), gv) in ga.data.iter_mut().zip(&va.data).zip(&g.data) {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    *o += gv * d;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let vg = self.value(*gain);
                let n = xhat.cols;
                {
                    let gg = slot(grads, *gain, vg);
                    for i in 0..g.rows {
                        for j in 0..n {
                            gg.data[j] += g.get(i, j) * xhat.get(i, j);
                        }
                    }
                }
                {
                    let gb = slot(grads, *bias, vg);
                    for i in 0..g.rows {
                        for (o, v) in gb.data.iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                }
                let gx = slot(grads, *x, xhat);
                let nf = n as f64;
                let mut dxhat = vec![0.0; n];
                for i in 0..g.rows {
                    for j in 0..n {
                        dxhat[j] = g.get(i, j) * vg.data[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / nf;
                    let mean_dx = dot(&dxhat, xhat.row(i)) / nf;
                    let xr = xhat.row(i);
                    let out = gx.row_mut(i);
                    for j in 0..n {
                        out[j] += inv_std[i] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (vx, vg) = (self.value(*x), self.value(*gain));
                let n = vx.cols;
                {
                    let gg = slot(grads, *gain, vg);
                    for i in 0..g.rows {
                        for j in 0..n {
                            gg.data[j] += g.get(i, j) * vx.get(i, j) * inv_rms[i];
                        }
                    }
                }
                let gx = slot(grads, *x, vx);
                let mut d = vec![0.0; n];
                for i in 0..g.rows {
                    let xr = vx.row(i);
                    for j in 0..n {
                        d[j] = g.get(i, j) * vg.data[j];
                    }
                    let r = inv_rms[i];
                    let proj = dot(&d, xr) * r * r * r / n as f64;
                    let out = gx.row_mut(i);
                    for j in 0..n {
                        out[j] += d[j] * r - xr[j] * proj;
                    }
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let ga = slot(grads, *a, y);
                for i in 0..y.rows {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let s = dot(yr, gr);
                    for (o, (yv, gv)) in ga.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *o += yv * (gv - s);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let vt = self.value(*table);
                let gt = slot(grads, *table, vt);
                for (i, &idx) in ids.iter().enumerate() {
                    for (o, v) in gt.row_mut(idx).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let vx = self.value(*x);
                let gx = slot(grads, *x, vx);
                for i in 0..g.rows {
                    for (o, v) in gx.row_mut(i)[*start..*start + g.cols].iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let w = vp.cols;
                    let gp = slot(grads, p, vp);
                    for i in 0..g.rows {
                        for (o, v) in gp.row_mut(i).iter_mut().zip(&g.row(i)[off..off + w]) {
                            *o += v;
                        }
                    }
                    off += w;
                }
            }
            Op::TableBias {
                table,
                buckets,
                column,
            } => {
                let vt = self.value(*table);
                let gt = slot(grads, *table, vt);
                for (&b, v) in buckets.iter().zip(&g.data) {
                    gt.data[b * gt.cols + column] += v;
                }
            }
            Op::Mask { x, keep } => {
                let gx = slot(grads, *x, g);
                for ((o, v), k) in gx.data.iter_mut().zip(&g.data).zip(keep.iter()) {
                    *o += v * k;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let count = targets.iter().filter(|t| t.is_some()).count();
                if count == 0 {
                    return;
                }
                let scale = g.data[0] / count as f64;
                let gl = slot(grads, *logits, probs);
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for (o, p) in gl.row_mut(i).iter_mut().zip(probs.row(i)) {
                        *o += scale * p;
                    }
                    gl.data[i * gl.cols + t] -= scale;
                }
            }
        }
    }
}

fn slot<'g>(grads: &'g mut [Option<Mat>], id: NodeId, like: &Mat) -> &'g mut Mat {
    grads[id].get_or_insert_with(|| Mat::zeros(like.rows, like.cols))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of d(sum(w ⊙ f(x)))/dx for a single op.
    fn check_op(x: Mat, build: impl Fn(&mut Graph, NodeId) -> NodeId) {
        let weights: Vec<f64> = (0..64).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let objective = |x: &Mat| -> (f64, Option<Mat>) {
            let mut g = Graph::new();
            let xi = g.constant(x.clone());
            let y = build(&mut g, xi);
            let vy = g.value(y).clone();
            let w = g.constant(Mat::from_vec(
                vy.rows,
                vy.cols,
                (0..vy.len()).map(|i| weights[i % weights.len()]).collect(),
            ));
            let prod = elementwise_sum(&mut g, y, w);
            let grads = g.backward(prod);
            (g.value(prod).data[0], grads[xi].clone())
        };
        let (_, analytic) = objective(&x);
        let analytic = analytic.unwrap();
        let h = 1e-5;
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp.data[k] += h;
            let mut xm = x.clone();
            xm.data[k] -= h;
            let fd = (objective(&xp).0 - objective(&xm).0) / (2.0 * h);
            let a = analytic.data[k];
            assert!(
                (fd - a).abs() <= 1e-7 * (1.0 + fd.abs()),
                "index {k}: analytic {a} vs numeric {fd}"
            );
        }
    }

    /// sum over all entries of y ⊙ w, as a 1x1 node built from primitives.
    fn elementwise_sum(g: &mut Graph, y: NodeId, w: NodeId) -> NodeId {
        let rows = g.value(y).rows;
        // (y · wᵀ) has trace sum(y ⊙ w); pick the diagonal with a 0/1 mask and
        // reduce with ones vectors.
        let ywt = g.matmul_bt(y, w);
        let eye: Rc<[f64]> = (0..rows * rows)
            .map(|i| if i / rows == i % rows { 1.0 } else { 0.0 })
            .collect();
        let diag = g.mask(ywt, eye);
        let ones_l = g.constant(Mat::filled(1, rows, 1.0));
        let ones_r = g.constant(Mat::filled(rows, 1, 1.0));
        let left = g.matmul(ones_l, diag);
        g.matmul(left, ones_r)
    }

    fn sample(rows: usize, cols: usize) -> Mat {
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|i| ((i as f64 + 1.0) * 1.37).sin() * 1.5)
                .collect(),
        )
    }

    #[test]
    fn gelu_gradient() {
        check_op(sample(3, 4), |g, x| g.gelu(x));
    }

    #[test]
    fn layer_norm_gradient() {
        check_op(sample(3, 5), |g, x| {
            let gain = g.constant(sample(1, 5));
            let bias = g.constant(sample(1, 5));
            g.layer_norm(x, gain, bias)
        });
    }

    #[test]
    fn rms_norm_gradient() {
        check_op(sample(3, 5), |g, x| {
            let gain = g.constant(sample(1, 5));
            g.rms_norm(x, gain)
        });
    }

    #[test]
    fn softmax_gradient_with_mask() {
        check_op(sample(3, 4), |g, x| {
            let mut m = Mat::zeros(3, 4);
            m.data[1] = f64::NEG_INFINITY;
            m.data[7] = f64::NEG_INFINITY;
            let m = g.constant(m);
            let s = g.add(x, m);
            g.softmax(s)
        });
    }

    #[test]
    fn cross_entropy_gradient() {
        check_op(sample(4, 6), |g, x| {
            g.cross_entropy(x, Rc::from(vec![Some(2), None, Some(0), Some(5)]))
        });
    }

    #[test]
    fn structural_ops_gradient() {
        check_op(sample(4, 6), |g, x| {
            let a = g.slice_cols(x, 1, 3);
            let b = g.slice_cols(x, 4, 2);
            let c = g.concat_cols(vec![b, a]);
            let t = g.gather(x, Rc::from(vec![3, 0, 0]));
            let mm = g.matmul_bt(t, x);
            let sl = g.slice_cols(mm, 0, 3);
            let tb = g.table_bias(x, Rc::from(vec![0, 1, 1, 3, 2, 0, 3, 3, 1]), 3, 3, 4);
            let s = g.add(sl, tb);
            let s = g.scale(s, 0.7);
            let c3 = g.gather(c, Rc::from(vec![0, 1, 2]));
            let mc = g.matmul(s, c3);
            let r = g.gather(x, Rc::from(vec![2]));
            let r = g.slice_cols(r, 0, 5);
            let out = g.add_row(mc, r);
            g.mask(out, Rc::from(vec![1.0, 0.0, 2.0, 1.0, 1.0].repeat(3)))
        });
    }

    #[test]
    fn masked_softmax_is_exactly_zero() {
        let mut g = Graph::new();
        let mut m = Mat::zeros(1, 3);
        m.data[2] = f64::NEG_INFINITY;
        let x = g.constant(m);
        let s = g.softmax(x);
        assert_eq!(g.value(s).data, vec![0.5, 0.5, 0.0]);
    }
}
