use core::fmt::Debug;
use core::iter::Sum;

use num_traits::Float;

/// Floating-point element type of every tensor.
///
/// The model runs in `f32`. `f64` exists so gradients can be checked against
/// finite differences without single-precision round-off swamping the
/// comparison.
pub trait Real: Float + Default + Debug + Sum + Send + Sync + 'static {
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn lit(v: f64) -> Self {
        Self::from_f64(v)
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Additive stand-in for `-inf` in attention masks.
///
/// A finite value keeps `x - max` well defined; `exp` of it underflows to an
/// exact zero in both precisions.
pub const MASK_SENTINEL: f64 = -1e9;
