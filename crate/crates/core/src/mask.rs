//! Binary `T×H×W` occupancy volumes.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    frames: usize,
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(frames: usize, height: usize, width: usize) -> Self {
        Self { frames, height, width, bits: vec![false; frames * height * width] }
    }

    pub fn from_bits(frames: usize, height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != frames * height * width {
            return Err(Error::DataLength { len: bits.len(), shape: vec![frames, height, width] });
        }
        Ok(Self { frames, height, width, bits })
    }

    /// Binarizes a `[T,H,W]` tensor: values `>= threshold` are set.
    pub fn from_tensor<F: Real>(t: &Tensor<F>, threshold: F) -> Result<Self> {
        match t.shape() {
            &[f, h, w] => {
                Ok(Self { frames: f, height: h, width: w, bits: t.data().iter().map(|&v| v >= threshold).collect() })
            }
            s => Err(Error::Rank { op: "BinaryMask::from_tensor", expected: 3, shape: s.to_vec() }),
        }
    }

    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        Tensor::new(
            vec![self.frames, self.height, self.width],
            self.bits.iter().map(|&b| if b { F::one() } else { F::zero() }).collect(),
        )
        .expect("mask dims match bit count")
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.frames, self.height, self.width]
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, t: usize, y: usize, x: usize) -> bool {
        self.bits[(t * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, t: usize, y: usize, x: usize, v: bool) {
        self.bits[(t * self.height + y) * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn frame_count(&self, t: usize) -> usize {
        let n = self.height * self.width;
        self.bits[t * n..(t + 1) * n].iter().filter(|&&b| b).count()
    }

    /// Keeps frames `start..start + len`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Self {
        let n = self.height * self.width;
        Self {
            frames: len,
            height: self.height,
            width: self.width,
            bits: self.bits[start * n..(start + len) * n].to_vec(),
        }
    }

    /// Keeps the listed frames, in order.
    pub fn select_frames(&self, frames: &[usize]) -> Self {
        let n = self.height * self.width;
        let mut bits = Vec::with_capacity(frames.len() * n);
        for &f in frames {
            bits.extend_from_slice(&self.bits[f * n..(f + 1) * n]);
        }
        Self { frames: frames.len(), height: self.height, width: self.width, bits }
    }

    /// Fraction of each `(H/oh)×(W/ow)` block that is set; `[T·oh·ow]`.
    pub fn area_downsample<F: Real>(&self, oh: usize, ow: usize) -> Result<Vec<F>> {
        if oh == 0 || ow == 0 || !self.height.is_multiple_of(oh) || !self.width.is_multiple_of(ow) {
            return Err(Error::InvalidArgument(alloc::format!(
                "cannot area-downsample {}x{} to {oh}x{ow}",
                self.height,
                self.width
            )));
        }
        let (fy, fx) = (self.height / oh, self.width / ow);
        let inv = 1.0 / (fy * fx) as f64;
        let mut out = vec![F::zero(); self.frames * oh * ow];
        for t in 0..self.frames {
            for y in 0..self.height {
                for x in 0..self.width {
                    if self.get(t, y, x) {
                        let o = (t * oh + y / fy) * ow + x / fx;
                        out[o] = out[o] + F::from_f64(inv);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn intersection(&self, other: &Self) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a && b).count()
    }

    pub fn union(&self, other: &Self) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a || b).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_downsample_fractions() {
        let mut m = BinaryMask::empty(1, 4, 4);
        m.set(0, 0, 0, true);
        m.set(0, 1, 1, true);
        m.set(0, 3, 3, true);
        let d: Vec<f64> = m.area_downsample(2, 2).unwrap();
        assert_eq!(d, vec![0.5, 0.0, 0.0, 0.25]);
        assert!(m.area_downsample::<f64>(3, 3).is_err());
    }

    #[test]
    fn select_and_round_trip() {
        let mut m = BinaryMask::empty(3, 2, 2);
        m.set(2, 1, 0, true);
        let s = m.select_frames(&[2, 0]);
        assert_eq!(s.frames(), 2);
        assert!(s.get(0, 1, 0));
        let t: Tensor<f32> = s.to_tensor();
        assert_eq!(BinaryMask::from_tensor(&t, 0.5).unwrap(), s);
    }
}
