//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! tape in reverse once per call; gradients reaching leaves are added to what
//! is already stored there, so two calls without `zero_grad` accumulate.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::real::Real;
use crate::tensor::{
    dims2, for_each_broadcast, matmul_at_into, matmul_bt_into, matmul_into, reduce_to_shape, sigmoid, softmax_in_place,
    transpose_into, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, rstd: Vec<F> },
    GatherRows { x: Var, rows: Vec<usize> },
    Unfold { x: Var, geom: UnfoldGeom },
    AvgPool { x: Var, geom: PoolGeom },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<F> },
    BceRows { logits: Var, targets: Vec<F> },
    DiceRows { logits: Var, targets: Vec<F> },
    CrossEntropy { logits: Var, targets: Vec<usize>, row_weights: Vec<F>, probs: Vec<F> },
}

#[derive(Debug, Clone, Copy)]
struct UnfoldGeom {
    frames: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
}

#[derive(Debug, Clone, Copy)]
struct PoolGeom {
    frames: usize,
    h: usize,
    w: usize,
    c: usize,
    factor: usize,
}

#[derive(Debug, Clone)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
    grad: Option<Vec<F>>,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<F = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf; it receives gradients iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<F>) -> Var {
        let ng = tensor.requires_grad;
        let mut t = tensor;
        t.grad = None;
        self.push(t, Op::Leaf, ng)
    }

    pub fn param(&mut self, tensor: &Tensor<F>) -> Var {
        let mut t = tensor.clone();
        t.requires_grad = true;
        self.leaf(t)
    }

    pub fn constant(&mut self, tensor: Tensor<F>) -> Var {
        let mut t = tensor;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated at a leaf by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).broadcast_add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.value(b).map(|v| -v);
        let out = self.value(a).broadcast_add(&neg)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).broadcast_mul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).map(|v| v * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMulT(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// `x[M,in] · w[in,out] + b[out]`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).sigmoid();
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(F::zero()));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_lastdim()?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Softmax(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / F::from_f64(t.len() as f64));
        let ng = self.ng(a);
        self.push(out, Op::Mean(a), ng)
    }

    /// Normalizes each row over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x);
        let c = *xs.shape().last().ok_or_else(|| invalid("layer_norm on a scalar"))?;
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: xs.shape().to_vec(),
                right: self.value(gain).shape().to_vec(),
            });
        }
        let eps = F::from_f64(1e-5);
        let rows = xs.len() / c;
        let mut xhat = vec![F::zero(); xs.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xs.len()];
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let cf = F::from_f64(c as f64);
        for r in 0..rows {
            let row = &xs.data()[r * c..(r + 1) * c];
            let mean = row.iter().fold(F::zero(), |a, &v| a + v) / cf;
            let var = row.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) / cf;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + b[j];
            }
        }
        let out = Tensor::new(xs.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng))
    }

    /// Selects rows of a 2-D value; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = dims2("gather_rows", self.value(x))?;
        if let Some(&r) = rows.iter().find(|&&r| r >= m) {
            return Err(invalid(alloc::format!("gather_rows: row {r} out of range for {m} rows")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let out = Tensor::new(vec![rows.len(), n], out)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::GatherRows { x, rows: rows.to_vec() }, ng))
    }

    /// im2col for a `k×k` stride-1 convolution with zero padding `k/2`:
    /// `[frames,H,W,C] → [frames·H·W, k·k·C]`, columns ordered `(dy, dx, c)`.
    pub fn unfold(&mut self, x: Var, k: usize) -> Result<Var> {
        let (frames, h, w, c) = dims4("unfold", self.value(x))?;
        if k.is_multiple_of(2) {
            return Err(invalid("unfold: kernel size must be odd"));
        }
        let geom = UnfoldGeom { frames, h, w, c, k };
        let src = self.value(x).data();
        let cols = k * k * c;
        let mut out = vec![F::zero(); frames * h * w * cols];
        unfold_walk(geom, |dst, s| out[dst..dst + c].copy_from_slice(&src[s..s + c]));
        let out = Tensor::new(vec![frames * h * w, cols], out)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Unfold { x, geom }, ng))
    }

    /// Non-overlapping average pooling over `factor×factor` windows of a
    /// `[frames,H,W,C]` value.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (frames, h, w, c) = dims4("avg_pool", self.value(x))?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(invalid(alloc::format!("avg_pool: factor {factor} does not divide {h}x{w}")));
        }
        let geom = PoolGeom { frames, h, w, c, factor };
        let (oh, ow) = (h / factor, w / factor);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); frames * oh * ow * c];
        let inv = F::one() / F::from_f64((factor * factor) as f64);
        pool_walk(geom, |o, s| {
            for j in 0..c {
                out[o + j] = out[o + j] + src[s + j] * inv;
            }
        });
        let out = Tensor::new(vec![frames, oh, ow, c], out)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::AvgPool { x, geom }, ng))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [N,C]`, `k, v: [S,C]`, optional additive `mask: [N,S]` shared by all
    /// heads. Channels are split into `heads` contiguous slices; the per-head
    /// outputs are concatenated back to `[N,C]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Option<&[F]>, heads: usize) -> Result<Var> {
        let (out, probs) = attention_forward(self.value(q), self.value(k), self.value(v), mask, heads)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }, ng))
    }

    /// Attention probabilities `[heads, N, S]` of an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<Tensor<F>> {
        match &self.nodes[v.0].op {
            Op::Attention { q, k, heads, probs, .. } => {
                let n = self.shape(*q)[0];
                let s = self.shape(*k)[0];
                Tensor::new(vec![*heads, n, s], probs.clone()).ok()
            }
            _ => None,
        }
    }

    /// Per-row mean binary cross-entropy of `logits: [P,S]` against soft
    /// targets in `[0,1]`. Output `[P]`.
    pub fn bce_rows(&mut self, logits: Var, targets: &[F]) -> Result<Var> {
        let (p, s) = dims2("bce_rows", self.value(logits))?;
        if targets.len() != p * s {
            return Err(invalid("bce_rows: target length mismatch"));
        }
        let x = self.value(logits).data();
        let sf = F::from_f64(s as f64);
        let out = (0..p)
            .map(|r| (0..s).fold(F::zero(), |acc, j| acc + bce_with_logits(x[r * s + j], targets[r * s + j])) / sf)
            .collect();
        let out = Tensor::new(vec![p], out)?;
        let ng = self.ng(logits);
        Ok(self.push(out, Op::BceRows { logits, targets: targets.to_vec() }, ng))
    }

    /// Per-row dice loss `1 − (2Σσt + 1)/(Σσ + Σt + 1)` on `logits: [P,S]`.
    pub fn dice_rows(&mut self, logits: Var, targets: &[F]) -> Result<Var> {
        let (p, s) = dims2("dice_rows", self.value(logits))?;
        if targets.len() != p * s {
            return Err(invalid("dice_rows: target length mismatch"));
        }
        let x = self.value(logits).data();
        let out = (0..p).map(|r| dice_loss(&x[r * s..(r + 1) * s], &targets[r * s..(r + 1) * s])).collect();
        let out = Tensor::new(vec![p], out)?;
        let ng = self.ng(logits);
        Ok(self.push(out, Op::DiceRows { logits, targets: targets.to_vec() }, ng))
    }

    /// Weighted softmax cross-entropy over rows of `logits: [N,K]`:
    /// `Σ_n w[t_n]·(−log p_n[t_n]) / Σ_n w[t_n]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], class_weights: &[F]) -> Result<Var> {
        let (n, k) = dims2("cross_entropy", self.value(logits))?;
        if targets.len() != n || class_weights.len() != k {
            return Err(invalid("cross_entropy: target/weight length mismatch"));
        }
        if targets.iter().any(|&t| t >= k) {
            return Err(invalid("cross_entropy: target class out of range"));
        }
        let mut probs = self.value(logits).data().to_vec();
        probs.chunks_mut(k).for_each(softmax_in_place);
        let row_weights: Vec<F> = targets.iter().map(|&t| class_weights[t]).collect();
        let total_w = row_weights.iter().fold(F::zero(), |a, &b| a + b);
        let x = self.value(logits).data();
        let mut loss = F::zero();
        for r in 0..n {
            let row = &x[r * k..(r + 1) * k];
            let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().fold(F::zero(), |a, &v| a + (v - max).exp()).ln() + max;
            loss = loss + row_weights[r] * (lse - row[targets[r]]);
        }
        let loss = if total_w > F::zero() { loss / total_w } else { F::zero() };
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), row_weights, probs },
            ng,
        ))
    }

    /// Reverse pass from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    /// Adds `g` into the pending gradient of `v`.
    fn send(&self, grads: &mut [Option<Vec<F>>], v: Var, g: Vec<F>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sub = matches!(node.op, Op::Sub(..));
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                if self.ng(*a) {
                    self.send(grads, *a, reduce_to_shape(g, out_shape, sa, sb, true));
                }
                if self.ng(*b) {
                    let mut gb = reduce_to_shape(g, out_shape, sb, sa, false);
                    if sub {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    self.send(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut ga = vec![F::zero(); ta.len()];
                let mut gb = vec![F::zero(); tb.len()];
                for_each_broadcast(ta.shape(), tb.shape(), out_shape, |o, ia, ib| {
                    ga[ia] = ga[ia] + g[o] * tb.data()[ib];
                    gb[ib] = gb[ib] + g[o] * ta.data()[ia];
                });
                self.send(grads, *a, ga);
                self.send(grads, *b, gb);
            }
            Op::Scale(a, s) => self.send(grads, *a, g.iter().map(|&v| v * *s).collect()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.ng(*a) {
                    let mut ga = vec![F::zero(); m * k];
                    matmul_bt_into(g, tb.data(), &mut ga, m, n, k);
                    self.send(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = vec![F::zero(); k * n];
                    matmul_at_into(ta.data(), g, &mut gb, k, m, n);
                    self.send(grads, *b, gb);
                }
            }
            Op::MatMulT(a, b) => {
                // out[m,n] = a[m,k] · b[n,k]ᵀ
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[0];
                if self.ng(*a) {
                    let mut ga = vec![F::zero(); m * k];
                    matmul_into(g, tb.data(), &mut ga, m, n, k);
                    self.send(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = vec![F::zero(); n * k];
                    matmul_at_into(g, ta.data(), &mut gb, n, m, k);
                    self.send(grads, *b, gb);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (out_shape[1], out_shape[0]);
                let mut ga = vec![F::zero(); m * n];
                transpose_into(g, &mut ga, n, m);
                self.send(grads, *a, ga);
            }
            Op::Reshape(a) => self.send(grads, *a, g.to_vec()),
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.send(grads, *a, g.iter().zip(y).map(|(&g, &y)| g * y * (F::one() - y)).collect());
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.send(
                    grads,
                    *a,
                    g.iter().zip(x).map(|(&g, &x)| if x > F::zero() { g } else { F::zero() }).collect(),
                );
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = *out_shape.last().unwrap();
                let mut ga = vec![F::zero(); y.len()];
                for r in 0..y.len() / c {
                    let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                    let dot = yr.iter().zip(gr).fold(F::zero(), |acc, (&y, &g)| acc + y * g);
                    for j in 0..c {
                        ga[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.send(grads, *a, ga);
            }
            Op::Sum(a) => self.send(grads, *a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.send(grads, *a, vec![g[0] / F::from_f64(n as f64); n]);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = self.value(*gain).len();
                let gd = self.value(*gain).data();
                let rows = xhat.len() / c;
                let cf = F::from_f64(c as f64);
                let mut gx = vec![F::zero(); xhat.len()];
                let mut gg = vec![F::zero(); c];
                let mut gbias = vec![F::zero(); c];
                for r in 0..rows {
                    let (xh, gr) = (&xhat[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                    let mut mean_d = F::zero();
                    let mut mean_dx = F::zero();
                    for j in 0..c {
                        let d = gr[j] * gd[j];
                        mean_d = mean_d + d;
                        mean_dx = mean_dx + d * xh[j];
                        gg[j] = gg[j] + gr[j] * xh[j];
                        gbias[j] = gbias[j] + gr[j];
                    }
                    mean_d = mean_d / cf;
                    mean_dx = mean_dx / cf;
                    for j in 0..c {
                        let d = gr[j] * gd[j];
                        gx[r * c + j] = rstd[r] * (d - mean_d - xh[j] * mean_dx);
                    }
                }
                self.send(grads, *x, gx);
                self.send(grads, *gain, gg);
                self.send(grads, *bias, gbias);
            }
            Op::GatherRows { x, rows } => {
                let n = out_shape[1];
                let mut gx = vec![F::zero(); self.value(*x).len()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        gx[r * n + j] = gx[r * n + j] + g[i * n + j];
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::Unfold { x, geom } => {
                let mut gx = vec![F::zero(); self.value(*x).len()];
                let c = geom.c;
                unfold_walk(*geom, |dst, s| {
                    for j in 0..c {
                        gx[s + j] = gx[s + j] + g[dst + j];
                    }
                });
                self.send(grads, *x, gx);
            }
            Op::AvgPool { x, geom } => {
                let mut gx = vec![F::zero(); self.value(*x).len()];
                let inv = F::one() / F::from_f64((geom.factor * geom.factor) as f64);
                let c = geom.c;
                pool_walk(*geom, |o, s| {
                    for j in 0..c {
                        gx[s + j] = g[o + j] * inv;
                    }
                });
                self.send(grads, *x, gx);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (gq, gk, gv) = attention_backward(self.value(*q), self.value(*k), self.value(*v), *heads, probs, g);
                self.send(grads, *q, gq);
                self.send(grads, *k, gk);
                self.send(grads, *v, gv);
            }
            Op::BceRows { logits, targets } => {
                let x = self.value(*logits).data();
                let s = x.len() / out_shape[0];
                let sf = F::from_f64(s as f64);
                let gx =
                    x.iter().zip(targets).enumerate().map(|(i, (&x, &t))| g[i / s] * (sigmoid(x) - t) / sf).collect();
                self.send(grads, *logits, gx);
            }
            Op::DiceRows { logits, targets } => {
                let x = self.value(*logits).data();
                let p = out_shape[0];
                let s = x.len() / p;
                let mut gx = vec![F::zero(); x.len()];
                let two = F::from_f64(2.0);
                for r in 0..p {
                    let (xr, tr) = (&x[r * s..(r + 1) * s], &targets[r * s..(r + 1) * s]);
                    let sig: Vec<F> = xr.iter().map(|&v| sigmoid(v)).collect();
                    let inter = sig.iter().zip(tr).fold(F::zero(), |a, (&p, &t)| a + p * t);
                    let denom =
                        sig.iter().fold(F::zero(), |a, &p| a + p) + tr.iter().fold(F::zero(), |a, &t| a + t) + F::one();
                    let numer = two * inter + F::one();
                    for j in 0..s {
                        let dl_dp = -(two * tr[j] * denom - numer) / (denom * denom);
                        gx[r * s + j] = g[r] * dl_dp * sig[j] * (F::one() - sig[j]);
                    }
                }
                self.send(grads, *logits, gx);
            }
            Op::CrossEntropy { logits, targets, row_weights, probs } => {
                let k = self.shape(*logits)[1];
                let total_w = row_weights.iter().fold(F::zero(), |a, &b| a + b);
                let mut gx = vec![F::zero(); probs.len()];
                if total_w > F::zero() {
                    for (r, &t) in targets.iter().enumerate() {
                        let w = g[0] * row_weights[r] / total_w;
                        for j in 0..k {
                            let onehot = if j == t { F::one() } else { F::zero() };
                            gx[r * k + j] = w * (probs[r * k + j] - onehot);
                        }
                    }
                }
                self.send(grads, *logits, gx);
            }
        }
    }
}

pub(crate) fn dims4<F: Real>(op: &'static str, t: &Tensor<F>) -> Result<(usize, usize, usize, usize)> {
    match t.shape()[..] {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => Err(Error::Rank { op, expected: 4, shape: t.shape().to_vec() }),
    }
}

/// Calls `f(dst, src)` for every in-bounds `(output column block, input pixel)` pair.
fn unfold_walk(g: UnfoldGeom, mut f: impl FnMut(usize, usize)) {
    let pad = (g.k / 2) as isize;
    let cols = g.k * g.k * g.c;
    for fr in 0..g.frames {
        for y in 0..g.h {
            for x in 0..g.w {
                let row = (fr * g.h + y) * g.w + x;
                for dy in 0..g.k {
                    let sy = y as isize + dy as isize - pad;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    for dx in 0..g.k {
                        let sx = x as isize + dx as isize - pad;
                        if sx < 0 || sx >= g.w as isize {
                            continue;
                        }
                        let dst = row * cols + (dy * g.k + dx) * g.c;
                        let src = ((fr * g.h + sy as usize) * g.w + sx as usize) * g.c;
                        f(dst, src);
                    }
                }
            }
        }
    }
}

fn pool_walk(g: PoolGeom, mut f: impl FnMut(usize, usize)) {
    let (oh, ow) = (g.h / g.factor, g.w / g.factor);
    for fr in 0..g.frames {
        for y in 0..g.h {
            for x in 0..g.w {
                let o = ((fr * oh + y / g.factor) * ow + x / g.factor) * g.c;
                let s = ((fr * g.h + y) * g.w + x) * g.c;
                f(o, s);
            }
        }
    }
}

#[inline]
pub(crate) fn bce_with_logits<F: Real>(x: F, t: F) -> F {
    x.max(F::zero()) - x * t + (F::one() + (-x.abs()).exp()).ln()
}

pub(crate) fn dice_loss<F: Real>(logits: &[F], targets: &[F]) -> F {
    let mut inter = F::zero();
    let mut denom = F::one();
    for (&x, &t) in logits.iter().zip(targets) {
        let p = sigmoid(x);
        inter = inter + p * t;
        denom = denom + p + t;
    }
    F::one() - (F::from_f64(2.0) * inter + F::one()) / denom
}

pub(crate) fn attention_forward<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    mask: Option<&[F]>,
    heads: usize,
) -> Result<(Tensor<F>, Vec<F>)> {
    let (n, c) = dims2("attention", q)?;
    let (s, ck) = dims2("attention", k)?;
    let (sv, cv) = dims2("attention", v)?;
    if ck != c || cv != c || sv != s {
        return Err(Error::ShapeMismatch { op: "attention", left: q.shape().to_vec(), right: k.shape().to_vec() });
    }
    if heads == 0 || c % heads != 0 {
        return Err(invalid(alloc::format!("attention: {c} channels not divisible into {heads} heads")));
    }
    if let Some(m) = mask {
        if m.len() != n * s {
            return Err(invalid("attention: mask must be [N,S]"));
        }
    }
    let d = c / heads;
    let scale = F::one() / F::from_f64(d as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut probs = vec![F::zero(); heads * n * s];
    let mut out = vec![F::zero(); n * c];
    for h in 0..heads {
        let off = h * d;
        for i in 0..n {
            let row = &mut probs[(h * n + i) * s..(h * n + i + 1) * s];
            let qi = &qd[i * c + off..i * c + off + d];
            for (j, r) in row.iter_mut().enumerate() {
                let kj = &kd[j * c + off..j * c + off + d];
                let dot = qi.iter().zip(kj).fold(F::zero(), |a, (&x, &y)| a + x * y);
                *r = dot * scale + mask.map_or(F::zero(), |m| m[i * s + j]);
            }
            softmax_in_place(row);
            let o = &mut out[i * c + off..i * c + off + d];
            for (j, &p) in row.iter().enumerate() {
                if p == F::zero() {
                    continue;
                }
                let vj = &vd[j * c + off..j * c + off + d];
                for (x, &y) in o.iter_mut().zip(vj) {
                    *x = *x + p * y;
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, c], out)?, probs))
}

fn attention_backward<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    heads: usize,
    probs: &[F],
    g: &[F],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let (n, c) = (q.shape()[0], q.shape()[1]);
    let s = k.shape()[0];
    let d = c / heads;
    let scale = F::one() / F::from_f64(d as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut gq = vec![F::zero(); n * c];
    let mut gk = vec![F::zero(); s * c];
    let mut gv = vec![F::zero(); s * c];
    let mut dp = vec![F::zero(); s];
    for h in 0..heads {
        let off = h * d;
        for i in 0..n {
            let p = &probs[(h * n + i) * s..(h * n + i + 1) * s];
            let gi = &g[i * c + off..i * c + off + d];
            let mut dot = F::zero();
            for j in 0..s {
                let vj = &vd[j * c + off..j * c + off + d];
                dp[j] = gi.iter().zip(vj).fold(F::zero(), |a, (&x, &y)| a + x * y);
                dot = dot + p[j] * dp[j];
                if p[j] != F::zero() {
                    let gvj = &mut gv[j * c + off..j * c + off + d];
                    for (x, &y) in gvj.iter_mut().zip(gi) {
                        *x = *x + p[j] * y;
                    }
                }
            }
            for j in 0..s {
                let ds = p[j] * (dp[j] - dot) * scale;
                if ds == F::zero() {
                    continue;
                }
                for t in 0..d {
                    gq[i * c + off + t] = gq[i * c + off + t] + ds * kd[j * c + off + t];
                    gk[j * c + off + t] = gk[j * c + off + t] + ds * qd[i * c + off + t];
                }
            }
        }
    }
    (gq, gk, gv)
}
