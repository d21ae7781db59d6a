//! Dense row-major tensors and the pure (tape-free) kernels behind them.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::DataLength { len: data.len(), shape });
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n], requires_grad: false, grad: None }
    }

    pub fn scalar(value: F) -> Self {
        Self { shape: Vec::new(), data: vec![value], requires_grad: false, grad: None }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect(), requires_grad: false, grad: None }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { F::one() } else { F::zero() })
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch { op: "reshape", left: self.shape, right: shape.to_vec() });
        }
        self.shape = shape.to_vec();
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), self.data.len());
        }
        Ok(self)
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self.grad.as_ref().map(|g| g.iter().map(|v| G::from_f64(v.as_f64())).collect()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[F]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        self.data.iter().zip(&other.data).fold(F::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn broadcast_add(&self, other: &Self) -> Result<Self> {
        broadcast_binary(self, other, |a, b| a + b)
    }

    pub fn broadcast_mul(&self, other: &Self) -> Result<Self> {
        broadcast_binary(self, other, |a, b| a * b)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = dims2("matmul", self)?;
        let (k2, n) = dims2("matmul", other)?;
        if k != k2 {
            return Err(Error::ShapeMismatch { op: "matmul", left: self.shape.clone(), right: other.shape.clone() });
        }
        let mut out = vec![F::zero(); m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    /// `self · otherᵀ` for `self: [m,k]`, `other: [n,k]`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        let (m, k) = dims2("matmul_t", self)?;
        let (n, k2) = dims2("matmul_t", other)?;
        if k != k2 {
            return Err(Error::ShapeMismatch { op: "matmul_t", left: self.shape.clone(), right: other.shape.clone() });
        }
        let mut out = vec![F::zero(); m * n];
        matmul_bt_into(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = dims2("transpose", self)?;
        let mut out = vec![F::zero(); m * n];
        transpose_into(&self.data, &mut out, m, n);
        Tensor::new(vec![n, m], out)
    }

    pub fn softmax_lastdim(&self) -> Result<Self> {
        let last = *self.shape.last().ok_or(Error::Rank { op: "softmax", expected: 1, shape: Vec::new() })?;
        if last == 0 {
            return Err(Error::Rank { op: "softmax", expected: 1, shape: self.shape.clone() });
        }
        let mut out = self.data.clone();
        out.chunks_mut(last).for_each(softmax_in_place);
        Tensor::new(self.shape.clone(), out)
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn sum(&self) -> F {
        self.data.iter().fold(F::zero(), |a, &b| a + b)
    }
}

pub(crate) fn dims2<F: Real>(op: &'static str, t: &Tensor<F>) -> Result<(usize, usize)> {
    match t.shape[..] {
        [m, n] => Ok((m, n)),
        _ => Err(Error::Rank { op, expected: 2, shape: t.shape.clone() }),
    }
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Max-subtracted softmax of one row. Sentinel-masked entries underflow to an
/// exact zero whenever the row holds at least one unmasked entry.
pub fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Output shape of numpy-style broadcasting, aligning trailing dimensions.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::Broadcast { left: a.to_vec(), right: b.to_vec() }),
        };
    }
    Ok(out)
}

/// Strides of `shape` laid over `out_shape`, zero along broadcast dimensions.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let offset = out_shape.len() - shape.len();
    let mut strides = vec![0; out_shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Walks every output element of a broadcast, yielding `(out, a, b)` flat indices.
pub(crate) fn for_each_broadcast(
    a_shape: &[usize],
    b_shape: &[usize],
    out_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out_shape.iter().product();
    let a_len: usize = a_shape.iter().product();
    let b_len: usize = b_shape.iter().product();
    if a_len == n && b_len == n {
        (0..n).for_each(|i| f(i, i, i));
        return;
    }
    // trailing-suffix broadcast, e.g. [M,C] + [C]
    if a_len == n && out_shape.ends_with(b_shape) {
        (0..n).for_each(|i| f(i, i, i % b_len));
        return;
    }
    if b_len == n && out_shape.ends_with(a_shape) {
        (0..n).for_each(|i| f(i, i % a_len, i));
        return;
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ia -= sa[d] * idx[d];
            ib -= sb[d] * idx[d];
            idx[d] = 0;
        }
    }
}

fn broadcast_binary<F: Real>(a: &Tensor<F>, b: &Tensor<F>, op: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
    let shape = broadcast_shape(&a.shape, &b.shape)?;
    let mut out = vec![F::zero(); shape.iter().product()];
    for_each_broadcast(&a.shape, &b.shape, &shape, |o, i, j| out[o] = op(a.data[i], b.data[j]));
    Tensor::new(shape, out)
}

/// Sums a broadcast-shaped gradient back down to `shape`.
pub(crate) fn reduce_to_shape<F: Real>(
    grad: &[F],
    out_shape: &[usize],
    shape: &[usize],
    other_shape: &[usize],
    lhs: bool,
) -> Vec<F> {
    let mut acc = vec![F::zero(); shape.iter().product()];
    let (a_shape, b_shape) = if lhs { (shape, other_shape) } else { (other_shape, shape) };
    for_each_broadcast(a_shape, b_shape, out_shape, |o, i, j| {
        let k = if lhs { i } else { j };
        acc[k] = acc[k] + grad[o];
    });
    acc
}

/// `out += a[m,k] · b[k,n]`
pub fn matmul_into<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out += a[m,k] · b[n,k]ᵀ`
pub fn matmul_bt_into<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s = s + x * y;
            }
            out[i * n + j] = out[i * n + j] + s;
        }
    }
}

/// `out += a[k,m]ᵀ · b[k,n]`
pub fn matmul_at_into<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == F::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

pub fn transpose_into<F: Real>(a: &[F], out: &mut [F], m: usize, n: usize) {
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn broadcast_temporal_over_spatial() {
        let a = Tensor::<f32>::zeros(&[2, 1, 1, 8]);
        let b = Tensor::<f32>::zeros(&[1, 4, 5, 8]);
        assert_eq!(a.broadcast_add(&b).unwrap().shape(), &[2, 4, 5, 8]);
    }

    #[test]
    fn broadcast_zero_case() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[3]);
        let c = a.broadcast_add(&b).unwrap();
        assert_eq!(c, Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn broadcast_against_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[2, 1, 4], &mut rng);
        let b = random(&[1, 3, 1], &mut rng);
        let c = a.broadcast_add(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 4]);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    let want = a.data()[i * 4 + k] + b.data()[j];
                    assert_eq!(c.data()[(i * 3 + j) * 4 + k], want);
                }
            }
        }
    }

    #[test]
    fn broadcast_incompatible_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4]);
        let err = a.broadcast_add(&b).unwrap_err();
        assert_eq!(err, Error::Broadcast { left: vec![2, 3], right: vec![4] });
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"));
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let x = Tensor::<f32>::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(Tensor::eye(3).matmul(&x).unwrap(), x);
        let a = Tensor::<f32>::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f32>::new(vec![2, 1], vec![1., 1.]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3., 7.]);
    }

    #[test]
    fn matmul_against_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&[4, 5], &mut rng).cast::<f32>();
        let b = random(&[5, 6], &mut rng).cast::<f32>();
        let c = a.matmul(&b).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                let mut s = 0.0f32;
                for p in 0..5 {
                    s += a.data()[i * 5 + p] * b.data()[p * 6 + j];
                }
                assert!((c.data()[i * 6 + j] - s).abs() < 1e-6);
            }
        }
        let bt = b.transpose().unwrap();
        assert!(a.matmul_t(&bt).unwrap().max_abs_diff(&c) < 1e-6);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_cases() {
        let u = Tensor::<f32>::zeros(&[3]).softmax_lastdim().unwrap();
        for &v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let m = Tensor::<f32>::new(vec![2], vec![5.0, crate::MASK_SENTINEL as f32]).unwrap();
        assert_eq!(m.softmax_lastdim().unwrap().data(), &[1.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let row = random(&[7], &mut rng).map(|v| v * 4.0);
        let s = row.softmax_lastdim().unwrap();
        let denom: f64 = row.data().iter().map(|v| v.exp()).sum();
        for (o, v) in s.data().iter().zip(row.data()) {
            assert!((o - v.exp() / denom).abs() < 1e-6);
        }
    }

    #[test]
    fn sigmoid_saturates_finitely() {
        let t = Tensor::<f32>::new(vec![3], vec![0.0, 200.0, -200.0]).unwrap().sigmoid();
        assert_eq!(t.data()[0], 0.5);
        assert!(t.data()[1] <= 1.0 && t.data()[1] > 0.999);
        assert!(t.data()[2] >= 0.0 && t.data()[2] < 1e-3);
        assert!(t.all_finite());
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(matches!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]), Err(Error::DataLength { .. })));
    }

    fn shape_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        prop::collection::vec((1usize..=5, 0u8..3), 1..=4).prop_map(|dims| {
            // each dim: 0 = both equal, 1 = left is 1, 2 = right is 1
            let a = dims.iter().map(|&(d, k)| if k == 1 { 1 } else { d }).collect::<Vec<_>>();
            let b = dims.iter().map(|&(d, k)| if k == 2 { 1 } else { d }).collect::<Vec<_>>();
            (a, b)
        })
    }

    proptest! {
        #[test]
        fn broadcast_add_commutes_and_matches_oracle((sa, sb) in shape_strategy(), drop in 0usize..3, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // drop some leading dims of b to exercise rank alignment
            let sb = sb[drop.min(sb.len() - 1)..].to_vec();
            let a = random(&sa, &mut rng);
            let b = random(&sb, &mut rng);
            let ab = a.broadcast_add(&b).unwrap();
            let ba = b.broadcast_add(&a).unwrap();
            prop_assert_eq!(&ab, &ba);
            // oracle: decode each output multi-index independently
            let out = ab.shape().to_vec();
            let rank = out.len();
            for o in 0..ab.len() {
                let mut rem = o;
                let mut idx = vec![0; rank];
                for d in (0..rank).rev() {
                    idx[d] = rem % out[d];
                    rem /= out[d];
                }
                let pick = |s: &[usize]| {
                    let off = rank - s.len();
                    s.iter().enumerate().fold(0, |acc, (d, &n)| acc * n + if n == 1 { 0 } else { idx[d + off] })
                };
                prop_assert_eq!(ab.data()[o], a.data()[pick(&sa)] + b.data()[pick(&sb)]);
            }
        }
    }
}
