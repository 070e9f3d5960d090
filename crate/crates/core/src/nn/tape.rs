//! Tape-based reverse-mode differentiation over [`Tensor2D`] values.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to run its vector-Jacobian product. [`Tape::backward`] walks the
//! nodes in reverse creation order, which is a valid topological order.

use std::sync::Arc;

use super::kernels::{self, attend_row, dot, gelu_grad, matmul, matmul_nt, matmul_tn};
use super::mask::BoolMask;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor2D;
use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(f64, f64)> },
    Attention { q: Var, k: Var, v: Var, mask: Arc<BoolMask>, heads: usize, probs: Vec<f64> },
    ConcatRows(Vec<Var>),
    GatherRows { src: Var, idx: Vec<usize> },
    Mse { pred: Var, target: Tensor2D, weight: f64 },
    BceLogits { logits: Var, labels: Vec<f64> },
}

struct Node {
    value: Tensor2D,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every node.
pub struct Gradients {
    grads: Vec<Option<Tensor2D>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor2D> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor2D, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor2D {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor2D) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = matmul(self.value(a), self.value(b));
        self.push(y, Op::MatMul(a, b))
    }

    /// `x + b` with the row vector `b` broadcast across rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let mut y = self.value(x).clone();
        kernels::add_row_broadcast(&mut y, self.value(b));
        self.push(y, Op::AddBias(x, b))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        self.push(y, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push(y, Op::Scale(x, c))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = kernels::gelu_tensor(self.value(x));
        self.push(y, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        self.push(y, Op::Tanh(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        assert_eq!(g.shape(), (1, xv.cols()), "layer norm gain shape");
        assert_eq!(b.shape(), (1, xv.cols()), "layer norm bias shape");
        let mut y = Tensor2D::zeros(xv.rows(), xv.cols());
        let mut stats = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            stats.push(kernels::layer_norm_row(xv.row(r), g.data(), b.data(), y.row_mut(r)));
        }
        self.push(y, Op::LayerNorm { x, gamma, beta, stats })
    }

    /// Multi-head masked attention over `rows / mask.len()` stacked sequences
    /// that share one mask.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Arc<BoolMask>, heads: usize) -> Result<Var, NnError> {
        mask.validate()?;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let n = mask.len();
        let (rows, width) = qv.shape();
        if rows % n != 0 || kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(NnError::Shape(format!(
                "attention over {rows} rows with mask of {n} tokens (q {:?}, k {:?}, v {:?})",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        if heads == 0 || width % heads != 0 {
            return Err(NnError::Shape(format!("width {width} not divisible by {heads} heads")));
        }
        let mut out = Tensor2D::zeros(rows, width);
        let mut probs = vec![0.0; rows * heads * n];
        for s in 0..rows / n {
            let base = s * n;
            for i in 0..n {
                let row = base + i;
                let p = &mut probs[row * heads * n..(row + 1) * heads * n];
                let mut o = vec![0.0; width];
                attend_row(qv.row(row), kv, vv, base, mask.row(i), heads, &mut o, Some(p));
                out.row_mut(row).copy_from_slice(&o);
            }
        }
        Ok(self.push(out, Op::Attention { q, k, v, mask, heads, probs }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Tensor2D> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor2D::concat_rows(&refs);
        self.push(y, Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Var {
        let y = self.value(src).gather_rows(idx);
        self.push(y, Op::GatherRows { src, idx: idx.to_vec() })
    }

    /// `weight * mean((pred - target)^2)` as a 1x1 node.
    pub fn mse(&mut self, pred: Var, target: &Tensor2D, weight: f64) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "mse shape mismatch");
        let n = p.data().len().max(1) as f64;
        let sse: f64 = p.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let y = Tensor2D::from_vec(1, 1, vec![weight * sse / n]);
        self.push(y, Op::Mse { pred, target: target.clone(), weight })
    }

    /// Mean binary cross-entropy over a column of logits, 1x1 node.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.shape(), (labels.len(), 1), "bce expects a logit column");
        let total: f64 = z.data().iter().zip(labels).map(|(&z, &y)| bce_loss(z, y).0).sum();
        let y = Tensor2D::from_vec(1, 1, vec![total / labels.len().max(1) as f64]);
        self.push(y, Op::BceLogits { logits, labels: labels.to_vec() })
    }

    /// Reverse sweep from a 1x1 output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor2D>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor2D::filled(1, 1, 1.0));
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Add gradients of parameter nodes into the store's accumulators.
    pub fn accumulate(&self, grads: &Gradients, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                store.accumulate_grad(*id, g);
            }
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor2D, grads: &mut [Option<Tensor2D>]) {
        fn add_to(grads: &mut [Option<Tensor2D>], v: Var, d: Tensor2D) {
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        }
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                add_to(grads, *a, matmul_nt(g, self.value(*b)));
                add_to(grads, *b, matmul_tn(self.value(*a), g));
            }
            Op::AddBias(x, b) => {
                add_to(grads, *x, g.clone());
                let mut db = Tensor2D::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (d, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                add_to(grads, *b, db);
            }
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Scale(x, c) => {
                let mut d = g.clone();
                d.data_mut().iter_mut().for_each(|v| *v *= c);
                add_to(grads, *x, d);
            }
            Op::Gelu(x) => {
                let mut d = g.clone();
                for (dv, xv) in d.data_mut().iter_mut().zip(self.value(*x).data()) {
                    *dv *= gelu_grad(*xv);
                }
                add_to(grads, *x, d);
            }
            Op::Tanh(x) => {
                let mut d = g.clone();
                for (dv, yv) in d.data_mut().iter_mut().zip(self.nodes[idx].value.data()) {
                    *dv *= 1.0 - yv * yv;
                }
                add_to(grads, *x, d);
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let xv = self.value(*x);
                let gam = self.value(*gamma).data();
                let cols = xv.cols();
                let n = cols as f64;
                let mut dx = Tensor2D::zeros(xv.rows(), cols);
                let mut dg = Tensor2D::zeros(1, cols);
                let mut db = Tensor2D::zeros(1, cols);
                let mut xhat = vec![0.0; cols];
                let mut dxhat = vec![0.0; cols];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let gr = g.row(r);
                    for c in 0..cols {
                        xhat[c] = (xv.get(r, c) - mean) * rstd;
                        dxhat[c] = gr[c] * gam[c];
                        dg.data_mut()[c] += gr[c] * xhat[c];
                        db.data_mut()[c] += gr[c];
                    }
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dot(&dxhat, &xhat);
                    let out = dx.row_mut(r);
                    for c in 0..cols {
                        out[c] = rstd / n * (n * dxhat[c] - sum_d - xhat[c] * sum_dx);
                    }
                }
                add_to(grads, *x, dx);
                add_to(grads, *gamma, dg);
                add_to(grads, *beta, db);
            }
            Op::Attention { q, k, v, mask, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let n = mask.len();
                let (rows, width) = qv.shape();
                let heads = *heads;
                let hd = width / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let mut dq = Tensor2D::zeros(rows, width);
                let mut dk = Tensor2D::zeros(rows, width);
                let mut dv = Tensor2D::zeros(rows, width);
                let mut dp = vec![0.0; n];
                for s in 0..rows / n {
                    let base = s * n;
                    for i in 0..n {
                        let row = base + i;
                        let mrow = mask.row(i);
                        for h in 0..heads {
                            let hs = h * hd..(h + 1) * hd;
                            let p = &probs[(row * heads + h) * n..(row * heads + h + 1) * n];
                            let go = &g.row(row)[hs.clone()];
                            let mut weighted = 0.0;
                            for j in 0..n {
                                if !mrow[j] {
                                    continue;
                                }
                                dp[j] = dot(go, &vv.row(base + j)[hs.clone()]);
                                weighted += p[j] * dp[j];
                                let dvr = &mut dv.row_mut(base + j)[hs.clone()];
                                for (d, gv) in dvr.iter_mut().zip(go) {
                                    *d += p[j] * gv;
                                }
                            }
                            for j in 0..n {
                                if !mrow[j] {
                                    continue;
                                }
                                let ds = p[j] * (dp[j] - weighted) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let krow = &kv.row(base + j)[hs.clone()];
                                let dqr = &mut dq.row_mut(row)[hs.clone()];
                                for (d, kx) in dqr.iter_mut().zip(krow) {
                                    *d += ds * kx;
                                }
                                let qrow = &qv.row(row)[hs.clone()];
                                let dkr = &mut dk.row_mut(base + j)[hs.clone()];
                                for (d, qx) in dkr.iter_mut().zip(qrow) {
                                    *d += ds * qx;
                                }
                            }
                        }
                    }
                }
                add_to(grads, *q, dq);
                add_to(grads, *k, dk);
                add_to(grads, *v, dv);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    let idx: Vec<usize> = (start..start + r).collect();
                    add_to(grads, p, g.gather_rows(&idx));
                    start += r;
                }
            }
            Op::GatherRows { src, idx } => {
                let sv = self.value(*src);
                let mut d = Tensor2D::zeros(sv.rows(), sv.cols());
                for (o, &i) in idx.iter().enumerate() {
                    for (dv, gv) in d.row_mut(i).iter_mut().zip(g.row(o)) {
                        *dv += gv;
                    }
                }
                add_to(grads, *src, d);
            }
            Op::Mse { pred, target, weight } => {
                let p = self.value(*pred);
                let n = p.data().len().max(1) as f64;
                let c = g.get(0, 0) * weight * 2.0 / n;
                let d: Vec<f64> = p.data().iter().zip(target.data()).map(|(a, b)| c * (a - b)).collect();
                add_to(grads, *pred, Tensor2D::from_vec(p.rows(), p.cols(), d));
            }
            Op::BceLogits { logits, labels } => {
                let z = self.value(*logits);
                let c = g.get(0, 0) / labels.len().max(1) as f64;
                let d: Vec<f64> = z.data().iter().zip(labels).map(|(&z, &y)| c * bce_loss(z, y).1).collect();
                add_to(grads, *logits, Tensor2D::from_vec(z.rows(), 1, d));
            }
        }
    }
}

/// Binary cross-entropy on a logit in log-sum-exp form.
///
/// Returns `(loss, dloss/dz)` where the derivative is `sigmoid(z) - y`.
pub fn bce_loss(z: f64, y: f64) -> (f64, f64) {
    // max(z,0) - z*y + ln(1 + e^{-|z|}) equals the textbook form without log(0).
    let loss = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    (loss, kernels::sigmoid(z) - y)
}
