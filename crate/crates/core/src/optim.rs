//! AdamW with decoupled weight decay.

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float as _;

use crate::params::{ParamGroup, ParamStore};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Per-parameter moment estimates and the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F = f32> {
    pub config: AdamWConfig,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub step: u64,
}

impl<F: Real> AdamW<F> {
    pub fn new(config: AdamWConfig, params: &ParamStore<F>) -> Self {
        let zeros = || params.iter().map(|p| vec![F::zero(); p.tensor.len()]).collect();
        Self { config, m: zeros(), v: zeros(), step: 0 }
    }

    /// One update of every parameter: `p ← p·(1 − lr·wd)`, then the
    /// bias-corrected Adam step. Missing gradients count as zero.
    pub fn step(&mut self, params: &mut ParamStore<F>, lr_for: impl Fn(ParamGroup) -> f64) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::from_f64(c.beta1), F::from_f64(c.beta2));
        let (one_b1, one_b2) = (F::from_f64(1.0 - c.beta1), F::from_f64(1.0 - c.beta2));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let lr = lr_for(p.group);
            let decay = F::from_f64(1.0 - lr * c.weight_decay);
            let step = F::from_f64(lr / bc1);
            let inv_bc2 = F::from_f64(1.0 / bc2);
            let eps = F::from_f64(c.eps);
            let grad = p.tensor.grad.take();
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(F::zero(), |g| g[i]);
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                data[i] = data[i] * decay - step * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
            p.tensor.grad = grad;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", ParamGroup::Decoder, Tensor::new(vec![values.len()], values.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_gradient_still_decays() {
        let mut s = store(&[2.0, -4.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        opt.step(&mut s, |_| 0.01);
        let f = 1.0 - 0.01 * 0.05;
        assert_eq!(s.get(0).tensor.data(), &[2.0 * f, -4.0 * f]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut s = store(&[1.0, 1.0]);
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &s);
        s.get_mut(0).tensor.accumulate_grad(&[3.0, -0.5]);
        opt.step(&mut s, |_| 0.1);
        let d = s.get(0).tensor.data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn matches_reference_recurrence() {
        let cfg = AdamWConfig::default();
        let mut s = store(&[0.5]);
        let mut opt = AdamW::new(cfg, &s);
        let (mut p, mut m, mut v) = (0.5f64, 0.0, 0.0);
        for t in 1..=5 {
            let g = 0.3 * t as f64 - 0.7;
            s.zero_grad();
            s.get_mut(0).tensor.accumulate_grad(&[g]);
            opt.step(&mut s, |_| 0.01);
            p *= 1.0 - 0.01 * 0.05;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            p -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((s.get(0).tensor.data()[0] - p).abs() < 1e-12);
        }
    }
}
