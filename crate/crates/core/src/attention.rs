//! Decoder sublayers: masked spatio-temporal cross-attention, query
//! self-attention, and the feed-forward block.
//!
//! Cross-attention runs one softmax per query over all `T·H_l·W_l` feature
//! positions at once, so a query gathers evidence from every frame in a
//! single step. Its footprint is restricted to the foreground that the
//! previous layer's 3D mask predicted.

use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{dims4, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::params::{Bind, Linear, Norm};
use crate::real::{Real, MASK_SENTINEL};
use crate::tensor::{dims2, Tensor};

/// Mask probabilities at or above this value count as foreground.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Additive attention mask over flattened `(t, x, y)` positions.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask3D<F = f32> {
    /// `[N, T·H_l·W_l]`, entries `0` (attend) or [`MASK_SENTINEL`] (blocked).
    pub additive: Tensor<F>,
    /// Layer whose prediction produced this mask.
    pub source_layer: usize,
    /// Queries whose binarized mask was empty and were opened up entirely.
    pub fallback_rows: Vec<usize>,
}

impl<F: Real> AttentionMask3D<F> {
    /// A mask that blocks nothing.
    pub fn open(queries: usize, positions: usize, source_layer: usize) -> Self {
        Self { additive: Tensor::zeros(&[queries, positions]), source_layer, fallback_rows: Vec::new() }
    }

    pub fn queries(&self) -> usize {
        self.additive.shape()[0]
    }

    pub fn positions(&self) -> usize {
        self.additive.shape()[1]
    }

    pub fn is_blocked(&self, query: usize, position: usize) -> bool {
        self.additive.data()[query * self.positions() + position] != F::zero()
    }
}

/// Bilinear resize of one `h×w` plane (half-pixel centers, edge clamped).
pub fn resize_bilinear<F: Real>(src: &[F], h: usize, w: usize, oh: usize, ow: usize) -> Vec<F> {
    if h == oh && w == ow {
        return src.to_vec();
    }
    let coords = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (s as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = coords(oh, h);
    let xs = coords(ow, w);
    let mut out = vec![F::zero(); oh * ow];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        let fy = F::from_f64(fy);
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let fx = F::from_f64(fx);
            let top = src[y0 * w + x0] * (F::one() - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (F::one() - fx) + src[y1 * w + x1] * fx;
            out[oy * ow + ox] = top * (F::one() - fy) + bot * fy;
        }
    }
    out
}

/// Resizes each `[H,W]` plane of a `[N,T,H,W]` tensor; time is untouched.
pub fn resize_volume<F: Real>(vol: &Tensor<F>, oh: usize, ow: usize) -> Result<Tensor<F>> {
    let (n, t, h, w) = dims4("resize_volume", vol)?;
    if oh == 0 || ow == 0 {
        return Err(invalid("resize target must be non-empty"));
    }
    let mut out = Vec::with_capacity(n * t * oh * ow);
    for plane in vol.data().chunks(h * w) {
        out.extend(resize_bilinear(plane, h, w, oh, ow));
    }
    Tensor::new(vec![n, t, oh, ow], out)
}

/// Turns the previous layer's mask probabilities `[N,T,H,W]` into an additive
/// mask at the attention resolution `(H_l, W_l)`.
pub fn build_attention_mask<F: Real>(
    mask_prob: &Tensor<F>,
    target_hw: (usize, usize),
    source_layer: usize,
) -> Result<AttentionMask3D<F>> {
    let (n, t, _, _) = dims4("build_attention_mask", mask_prob)?;
    let (hl, wl) = target_hw;
    let resized = resize_volume(mask_prob, hl, wl)?;
    let positions = t * hl * wl;
    let threshold = F::from_f64(MASK_THRESHOLD);
    let sentinel = F::from_f64(MASK_SENTINEL);
    let mut additive: Vec<F> =
        resized.data().iter().map(|&p| if p >= threshold { F::zero() } else { sentinel }).collect();
    let mut fallback_rows = Vec::new();
    for (q, row) in additive.chunks_mut(positions).enumerate() {
        if row.iter().all(|&v| v != F::zero()) {
            row.fill(F::zero());
            fallback_rows.push(q);
        }
    }
    Ok(AttentionMask3D { additive: Tensor::new(vec![n, positions], additive)?, source_layer, fallback_rows })
}

/// Projections of one attention sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnParams<H = usize> {
    pub q: Linear<H>,
    pub k: Linear<H>,
    pub v: Linear<H>,
    pub out: Linear<H>,
}

impl Bind for AttnParams {
    type Bound = AttnParams<Var>;
    fn bind(&self, vars: &[Var]) -> AttnParams<Var> {
        AttnParams { q: self.q.bind(vars), k: self.k.bind(vars), v: self.v.bind(vars), out: self.out.bind(vars) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelfAttnParams<H = usize> {
    pub norm: Norm<H>,
    pub attn: AttnParams<H>,
}

impl Bind for SelfAttnParams {
    type Bound = SelfAttnParams<Var>;
    fn bind(&self, vars: &[Var]) -> SelfAttnParams<Var> {
        SelfAttnParams { norm: self.norm.bind(vars), attn: self.attn.bind(vars) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FfnParams<H = usize> {
    pub norm: Norm<H>,
    pub fc1: Linear<H>,
    pub fc2: Linear<H>,
}

impl Bind for FfnParams {
    type Bound = FfnParams<Var>;
    fn bind(&self, vars: &[Var]) -> FfnParams<Var> {
        FfnParams { norm: self.norm.bind(vars), fc1: self.fc1.bind(vars), fc2: self.fc2.bind(vars) }
    }
}

fn check_width<F: Real>(tape: &Tape<F>, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
    let (n, c) = dims2(op, tape.value(a))?;
    let (_, cb) = dims2(op, tape.value(b))?;
    if c != cb {
        return Err(Error::ShapeMismatch { op, left: tape.shape(a).to_vec(), right: tape.shape(b).to_vec() });
    }
    Ok((n, c))
}

/// `X_l = softmax(M_{l-1} + Q Kᵀ/√d) V + X_{l-1}`, multi-head, with
/// `Q = f_Q(X_{l-1})`, `K = f_K(features + pos)`, `V = f_V(features)`.
///
/// `features` and `pos` are `[T·H_l·W_l, C]`; the output carries the
/// residual.
pub fn masked_cross_attention<F: Real>(
    tape: &mut Tape<F>,
    x_prev: Var,
    features: Var,
    pos: Option<Var>,
    mask: Option<&AttentionMask3D<F>>,
    params: &AttnParams<Var>,
    heads: usize,
) -> Result<Var> {
    let (n, _) = check_width(tape, "masked_cross_attention", x_prev, features)?;
    if n == 0 {
        return Err(invalid("masked_cross_attention: no queries"));
    }
    let s = tape.shape(features)[0];
    if let Some(m) = mask {
        if m.additive.shape() != [n, s] {
            return Err(Error::ShapeMismatch {
                op: "masked_cross_attention",
                left: m.additive.shape().to_vec(),
                right: vec![n, s],
            });
        }
    }
    let q = params.q.apply(tape, x_prev)?;
    let key_in = match pos {
        Some(p) => tape.add(features, p)?,
        None => features,
    };
    let k = params.k.apply(tape, key_in)?;
    let v = params.v.apply(tape, features)?;
    let attended = tape.attention(q, k, v, mask.map(|m| m.additive.data()), heads)?;
    let out = params.out.apply(tape, attended)?;
    tape.add(out, x_prev)
}

/// Pre-norm multi-head self-attention among queries, with residual.
pub fn self_attention<F: Real>(tape: &mut Tape<F>, x: Var, params: &SelfAttnParams<Var>, heads: usize) -> Result<Var> {
    dims2("self_attention", tape.value(x))?;
    let y = params.norm.apply(tape, x)?;
    let q = params.attn.q.apply(tape, y)?;
    let k = params.attn.k.apply(tape, y)?;
    let v = params.attn.v.apply(tape, y)?;
    let a = tape.attention(q, k, v, None, heads)?;
    let o = params.attn.out.apply(tape, a)?;
    tape.add(o, x)
}

/// Pre-norm two-layer ReLU MLP, with residual.
pub fn ffn<F: Real>(tape: &mut Tape<F>, x: Var, params: &FfnParams<Var>) -> Result<Var> {
    dims2("ffn", tape.value(x))?;
    let y = params.norm.apply(tape, x)?;
    let h = params.fc1.apply(tape, y)?;
    let h = tape.relu(h);
    let o = params.fc2.apply(tape, h)?;
    tape.add(o, x)
}
