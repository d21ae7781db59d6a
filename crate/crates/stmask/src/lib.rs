//! File formats, dataset tooling and the command line for `stmask-core`.

pub mod checkpoint;
pub mod commands;
pub mod dataset;
pub mod overlay;
pub mod predictions;
pub mod tensor_io;
