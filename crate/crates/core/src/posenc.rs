//! Non-parametric sinusoidal positional encodings.
//!
//! The temporal and spatial encodings are computed independently, each over
//! the full channel width, and combined by broadcast addition. A model
//! trained on short clips can therefore encode any number of frames.

use alloc::format;
use alloc::vec;
#[allow(unused_imports)]
use num_traits::Float as _;

use crate::error::{invalid, Result};
use crate::real::Real;
use crate::tensor::Tensor;

const BASE: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoding<F = f32> {
    /// `[T,1,1,C]`
    pub temporal: Tensor<F>,
    /// `[1,H,W,C]`
    pub spatial: Tensor<F>,
    /// `[T,H,W,C]`
    pub combined: Tensor<F>,
}

/// `out[p,2i] = sin(p / BASE^(2i/width))`, `out[p,2i+1] = cos(…)`.
pub fn sinusoidal_1d<F: Real>(length: usize, width: usize) -> Result<Tensor<F>> {
    if width == 0 || !width.is_multiple_of(2) {
        return Err(invalid(format!("sinusoidal width must be even and positive, got {width}")));
    }
    if length == 0 {
        return Err(invalid("sinusoidal length must be positive"));
    }
    let mut out = vec![F::zero(); length * width];
    for p in 0..length {
        for i in 0..width / 2 {
            let freq = BASE.powf((2 * i) as f64 / width as f64);
            let angle = p as f64 / freq;
            out[p * width + 2 * i] = F::from_f64(angle.sin());
            out[p * width + 2 * i + 1] = F::from_f64(angle.cos());
        }
    }
    Tensor::new(vec![length, width], out)
}

/// Row-index encoding in the first half of the channels, column-index
/// encoding in the second half. Shape `[1,H,W,width]`.
pub fn spatial_2d<F: Real>(h: usize, w: usize, width: usize) -> Result<Tensor<F>> {
    if width == 0 || !width.is_multiple_of(4) {
        return Err(invalid(format!("spatial encoding width must be a positive multiple of 4, got {width}")));
    }
    let half = width / 2;
    let rows = sinusoidal_1d::<F>(h, half)?;
    let cols = sinusoidal_1d::<F>(w, half)?;
    let mut out = vec![F::zero(); h * w * width];
    for x in 0..h {
        for y in 0..w {
            let o = (x * w + y) * width;
            out[o..o + half].copy_from_slice(&rows.data()[x * half..(x + 1) * half]);
            out[o + half..o + width].copy_from_slice(&cols.data()[y * half..(y + 1) * half]);
        }
    }
    Tensor::new(vec![1, h, w, width], out)
}

pub fn combined_3d<F: Real>(t: usize, h: usize, w: usize, width: usize) -> Result<PositionalEncoding<F>> {
    let temporal = sinusoidal_1d::<F>(t, width)?.reshape(&[t, 1, 1, width])?;
    let spatial = spatial_2d::<F>(h, w, width)?;
    let combined = temporal.broadcast_add(&spatial)?;
    Ok(PositionalEncoding { temporal, spatial, combined })
}

/// Spatial-only variant: the temporal term is zero for every frame.
pub fn spatial_only_3d<F: Real>(t: usize, h: usize, w: usize, width: usize) -> Result<PositionalEncoding<F>> {
    let temporal = Tensor::zeros(&[t, 1, 1, width]);
    let spatial = spatial_2d::<F>(h, w, width)?;
    let combined = temporal.broadcast_add(&spatial)?;
    Ok(PositionalEncoding { temporal, spatial, combined })
}
