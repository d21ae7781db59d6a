//! Video instance segmentation with a masked-attention transformer decoder.
//!
//! A clip is treated as one `T×H×W` volume: object queries cross-attend to
//! spatio-temporal features restricted to the foreground their previous layer
//! predicted, and each query emits a single 3D mask, so one query is one
//! track across every frame.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, dataset IO and
//! the command line live in the `stmask` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod autograd;
pub mod datagen;
pub mod decoder;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod mask;
pub mod matching;
pub mod optim;
pub mod params;
pub mod posenc;
mod real;
pub mod tensor;
pub mod trainer;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use real::{Real, MASK_SENTINEL};
pub use tensor::Tensor;
