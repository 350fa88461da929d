//! A small reverse-mode automatic differentiation tape over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep. Parameters are
//! borrowed, not copied, and deduplicated by address so that gradients can be
//! collected back in a network's own parameter order.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    MulRows(NodeId, NodeId),
    Relu(NodeId),
    Im2Col { input: NodeId, kernel: usize },
    InstanceNorm { input: NodeId, inv_std: Vec<f64> },
    MeanCols(NodeId),
    BroadcastCols(NodeId),
    RowSlice { input: NodeId, start: usize },
    Scale(NodeId, f64),
    L1Mean(NodeId, NodeId),
    SumSquares(NodeId),
    SquaredDistance(NodeId, NodeId),
    SoftmaxCrossEntropy { logits: NodeId, target: usize, probs: Vec<f64> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    params: HashMap<usize, NodeId>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Registers a trainable tensor. Registering the same tensor twice yields
    /// the same node.
    pub fn param(&mut self, t: &'a Tensor) -> NodeId {
        let key = t as *const Tensor as usize;
        if let Some(&id) = self.params.get(&key) {
            return id;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.params.insert(key, id);
        id
    }

    /// Node for a registered parameter, if it took part in this graph.
    pub fn param_node(&self, t: &Tensor) -> Option<NodeId> {
        self.params.get(&(t as *const Tensor as usize)).copied()
    }

    /// A borrowed tensor that never receives gradients.
    pub fn constant(&mut self, t: &'a Tensor) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// An owned leaf; `requires_grad` decides whether `backward` reaches it.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> NodeId {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shape");
        out.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    /// `x + b` with the `rows × 1` column `b` broadcast over columns.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xv = self.value(x);
        let bv = self.value(b);
        assert_eq!((xv.rows(), 1), bv.shape(), "add_bias shape");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let br = bv.data()[r];
            out.row_mut(r).iter_mut().for_each(|v| *v += br);
        }
        let rg = self.rg(&[x, b]);
        self.push(out, Op::AddBias(x, b), rg)
    }

    /// `x ⊙ s` with the `rows × 1` column `s` broadcast over columns.
    pub fn mul_rows(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let xv = self.value(x);
        let sv = self.value(s);
        assert_eq!((xv.rows(), 1), sv.shape(), "mul_rows shape");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let sr = sv.data()[r];
            out.row_mut(r).iter_mut().for_each(|v| *v *= sr);
        }
        let rg = self.rg(&[x, s]);
        self.push(out, Op::MulRows(x, s), rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// Unfolds a `channels × frames` map into `(channels · kernel) × frames`
    /// patches with zero "same" padding, so a 1-D convolution becomes a matmul.
    pub fn im2col(&mut self, x: NodeId, kernel: usize) -> NodeId {
        assert!(kernel % 2 == 1, "odd kernels only");
        let xv = self.value(x);
        let (ch, frames) = xv.shape();
        let pad = kernel / 2;
        let mut out = Tensor::zeros(ch * kernel, frames);
        for c in 0..ch {
            let src = xv.row(c);
            for j in 0..kernel {
                let dst = out.row_mut(c * kernel + j);
                for (t, d) in dst.iter_mut().enumerate() {
                    let s = t + j;
                    if s >= pad && s - pad < frames {
                        *d = src[s - pad];
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Im2Col { input: x, kernel }, rg)
    }

    /// Per-row (channel) normalization over columns (frames):
    /// `(x − μ) / sqrt(σ² + eps)` with the population variance.
    pub fn instance_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        let (out, inv_std) = instance_norm_forward(self.value(x), eps);
        let rg = self.rg(&[x]);
        self.push(out, Op::InstanceNorm { input: x, inv_std }, rg)
    }

    /// Mean over columns: `rows × cols → rows × 1`.
    pub fn mean_cols(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let n = xv.cols() as f64;
        let out = Tensor::column((0..xv.rows()).map(|r| xv.row(r).iter().sum::<f64>() / n).collect());
        let rg = self.rg(&[x]);
        self.push(out, Op::MeanCols(x), rg)
    }

    /// Repeats a `rows × 1` column `cols` times.
    pub fn broadcast_cols(&mut self, x: NodeId, cols: usize) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.cols(), 1, "broadcast_cols expects a column");
        let mut out = Tensor::zeros(xv.rows(), cols);
        for r in 0..xv.rows() {
            let v = xv.data()[r];
            out.row_mut(r).iter_mut().for_each(|o| *o = v);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::BroadcastCols(x), rg)
    }

    pub fn row_slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        assert!(start + len <= xv.rows(), "row_slice out of range");
        let cols = xv.cols();
        let out = Tensor::from_vec(len, cols, xv.data()[start * cols..(start + len) * cols].to_vec())
            .expect("slice shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::RowSlice { input: x, start }, rg)
    }

    pub fn scale(&mut self, x: NodeId, alpha: f64) -> NodeId {
        let out = self.value(x).map(|v| alpha * v);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, alpha), rg)
    }

    /// Mean absolute difference, a `1 × 1` scalar.
    pub fn l1_mean(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "l1_mean shape");
        let n = av.len().max(1) as f64;
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y).abs()).sum();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::scalar(s / n), Op::L1Mean(a, b), rg)
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).squared_norm();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumSquares(x), rg)
    }

    /// `‖a − b‖²`, a `1 × 1` scalar.
    pub fn squared_distance(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "squared_distance shape");
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::scalar(s), Op::SquaredDistance(a, b), rg)
    }

    /// `−log softmax(logits)[target]` for a column of logits.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: usize) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.cols(), 1, "logits must be a column");
        assert!(target < lv.rows(), "target class out of range");
        let max = lv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = lv.data().iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let loss = -(lv.data()[target] - max - z.ln());
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar root. Gradients are retained for leaves only.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let n = root.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        let rv = self.value(root);
        grads[root.0] = Some(Tensor::filled(rv.rows(), rv.cols(), 1.0));

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.requires_grad(*a) {
                        acc_gemm(&mut grads, *a, &g, false, self.value(*b), true);
                    }
                    if self.requires_grad(*b) {
                        acc_gemm(&mut grads, *b, self.value(*a), true, &g, false);
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, || g.clone());
                    self.acc(&mut grads, *b, || g.clone());
                }
                Op::AddBias(x, b) => {
                    self.acc(&mut grads, *b, || row_sums(&g));
                    self.acc(&mut grads, *x, || g.clone());
                }
                Op::MulRows(x, s) => {
                    let xv = self.value(*x);
                    let sv = self.value(*s);
                    self.acc(&mut grads, *s, || {
                        Tensor::column(
                            (0..g.rows())
                                .map(|r| g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum())
                                .collect(),
                        )
                    });
                    self.acc(&mut grads, *x, || {
                        let mut gx = g.clone();
                        for r in 0..gx.rows() {
                            let sr = sv.data()[r];
                            gx.row_mut(r).iter_mut().for_each(|v| *v *= sr);
                        }
                        gx
                    });
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    self.acc(&mut grads, *x, || {
                        let mut gx = g.clone();
                        for (gv, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                            if v <= 0.0 {
                                *gv = 0.0;
                            }
                        }
                        gx
                    });
                }
                Op::Im2Col { input, kernel } => {
                    let (ch, frames) = self.value(*input).shape();
                    let k = *kernel;
                    let pad = k / 2;
                    self.acc(&mut grads, *input, || {
                        let mut gx = Tensor::zeros(ch, frames);
                        for c in 0..ch {
                            let dst = gx.row_mut(c);
                            for j in 0..k {
                                let src = g.row(c * k + j);
                                for (t, &s) in src.iter().enumerate() {
                                    let p = t + j;
                                    if p >= pad && p - pad < frames {
                                        dst[p - pad] += s;
                                    }
                                }
                            }
                        }
                        gx
                    });
                }
                Op::InstanceNorm { input, inv_std } => {
                    let y = &node.value;
                    self.acc(&mut grads, *input, || {
                        let mut gx = Tensor::zeros(y.rows(), y.cols());
                        let n = y.cols() as f64;
                        for r in 0..y.rows() {
                            let gr = g.row(r);
                            let yr = y.row(r);
                            let mg = gr.iter().sum::<f64>() / n;
                            let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                            for (t, o) in gx.row_mut(r).iter_mut().enumerate() {
                                *o = inv_std[r] * (gr[t] - mg - yr[t] * mgy);
                            }
                        }
                        gx
                    });
                }
                Op::MeanCols(x) => {
                    let (rows, cols) = self.value(*x).shape();
                    self.acc(&mut grads, *x, || {
                        let mut gx = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            let v = g.data()[r] / cols as f64;
                            gx.row_mut(r).iter_mut().for_each(|o| *o = v);
                        }
                        gx
                    });
                }
                Op::BroadcastCols(x) => {
                    self.acc(&mut grads, *x, || row_sums(&g));
                }
                Op::RowSlice { input, start } => {
                    let (rows, cols) = self.value(*input).shape();
                    self.acc(&mut grads, *input, || {
                        let mut gx = Tensor::zeros(rows, cols);
                        gx.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                        gx
                    });
                }
                Op::Scale(x, alpha) => {
                    self.acc(&mut grads, *x, || g.map(|v| alpha * v));
                }
                Op::L1Mean(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let w = g.item() / av.len().max(1) as f64;
                    let sign = || {
                        let data = av
                            .data()
                            .iter()
                            .zip(bv.data())
                            .map(|(x, y)| w * sign(x - y))
                            .collect();
                        Tensor::from_vec(av.rows(), av.cols(), data).expect("shape")
                    };
                    self.acc(&mut grads, *a, sign);
                    self.acc(&mut grads, *b, || sign().map(|v| -v));
                }
                Op::SumSquares(x) => {
                    let w = 2.0 * g.item();
                    self.acc(&mut grads, *x, || self.value(*x).map(|v| w * v));
                }
                Op::SquaredDistance(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let w = 2.0 * g.item();
                    let diff = || {
                        let data = av.data().iter().zip(bv.data()).map(|(x, y)| w * (x - y)).collect();
                        Tensor::from_vec(av.rows(), av.cols(), data).expect("shape")
                    };
                    self.acc(&mut grads, *a, diff);
                    self.acc(&mut grads, *b, || diff().map(|v| -v));
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let w = g.item();
                    self.acc(&mut grads, *logits, || {
                        let mut d: Vec<f64> = probs.iter().map(|p| w * p).collect();
                        d[*target] -= w;
                        Tensor::column(d)
                    });
                }
            }
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: impl FnOnce() -> Tensor) {
        if !self.requires_grad(id) {
            return;
        }
        let d = delta();
        match &mut grads[id.0] {
            Some(t) => t.add_assign(&d),
            slot @ None => *slot = Some(d),
        }
    }
}

fn acc_gemm(grads: &mut [Option<Tensor>], id: NodeId, a: &Tensor, ta: bool, b: &Tensor, tb: bool) {
    let m = if ta { a.cols() } else { a.rows() };
    let n = if tb { b.rows() } else { b.cols() };
    match &mut grads[id.0] {
        Some(t) => gemm(1.0, a, ta, b, tb, 1.0, t),
        slot @ None => {
            let mut t = Tensor::zeros(m, n);
            gemm(1.0, a, ta, b, tb, 0.0, &mut t);
            *slot = Some(t);
        }
    }
}

fn row_sums(g: &Tensor) -> Tensor {
    Tensor::column((0..g.rows()).map(|r| g.row(r).iter().sum()).collect())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Shared by the graph op and by graph-free callers.
pub(crate) fn instance_norm_forward(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let (rows, cols) = x.shape();
    let n = cols as f64;
    let mut out = Tensor::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = x.row(r);
        let mean = xr.iter().sum::<f64>() / n;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for (o, v) in out.row_mut(r).iter_mut().zip(xr) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences over every entry of `x` for a scalar function.
    fn numeric(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        for (x, y) in a.data().iter().zip(b.data()) {
            let scale = x.abs().max(y.abs()).max(1.0);
            assert!((x - y).abs() / scale < tol, "{x} vs {y}");
        }
    }

    /// Exercises every op in one expression and compares against finite differences.
    #[test]
    fn composite_expression_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = random(3, 6, &mut rng);
        let w0 = random(4, 9, &mut rng);
        let b0 = random(4, 1, &mut rng);
        let s0 = random(4, 1, &mut rng);
        let target = random(2, 6, &mut rng);

        let eval = |x: &Tensor, w: &Tensor, b: &Tensor, s: &Tensor| -> (f64, Vec<Tensor>) {
            let mut g = Graph::new();
            let xi = g.param(x);
            let wi = g.param(w);
            let bi = g.param(b);
            let si = g.param(s);
            let ti = g.constant(&target);
            let cols = g.im2col(xi, 3);
            let h = g.matmul(wi, cols);
            let h = g.add_bias(h, bi);
            let h = g.instance_norm(h, 1e-5);
            let h = g.mul_rows(h, si);
            let h = g.relu(h);
            let top = g.row_slice(h, 1, 2);
            let l1 = g.l1_mean(top, ti);
            let pooled = g.mean_cols(h);
            let wide = g.broadcast_cols(pooled, 2);
            let sq = g.sum_squares(wide);
            let sq = g.scale(sq, 0.3);
            let dist = g.squared_distance(pooled, si);
            let ce = g.softmax_cross_entropy(pooled, 2);
            let total = g.add(l1, sq);
            let total = g.add(total, dist);
            let total = g.add(total, ce);
            let value = g.value(total).item();
            let grads = g.backward(total);
            (value, [xi, wi, bi, si].iter().map(|&id| grads.get(id).unwrap().clone()).collect())
        };

        let (_, analytic) = eval(&x0, &w0, &b0, &s0);
        let nx = numeric(&x0, &|x| eval(x, &w0, &b0, &s0).0);
        let nw = numeric(&w0, &|w| eval(&x0, w, &b0, &s0).0);
        let nb = numeric(&b0, &|b| eval(&x0, &w0, b, &s0).0);
        let ns = numeric(&s0, &|s| eval(&x0, &w0, &b0, s).0);
        assert_close(&analytic[0], &nx, 1e-5);
        assert_close(&analytic[1], &nw, 1e-5);
        assert_close(&analytic[2], &nb, 1e-5);
        assert_close(&analytic[3], &ns, 1e-5);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let a = Tensor::column(vec![1.0, 2.0]);
        let b = Tensor::column(vec![3.0, 5.0]);
        let mut g = Graph::new();
        let ai = g.param(&a);
        let bi = g.constant(&b);
        let d = g.squared_distance(ai, bi);
        let grads = g.backward(d);
        assert_eq!(grads.get(ai).unwrap().data(), &[-4.0, -6.0]);
        assert!(grads.get(bi).is_none());
    }

    #[test]
    fn param_registration_is_deduplicated() {
        let a = Tensor::scalar(2.0);
        let mut g = Graph::new();
        let first = g.param(&a);
        let second = g.param(&a);
        assert_eq!(first, second);
        let sq = g.mul_rows(first, second);
        let grads = g.backward(sq);
        assert_eq!(grads.get(first).unwrap().item(), 4.0);
    }
}
