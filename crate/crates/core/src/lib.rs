//! Shared global workspace communication for modular neural networks.
//!
//! Specialists (transformer positions, recurrent modules, or mechanisms)
//! compete to write into a small slot memory whose contents are then
//! broadcast back to every specialist. The crate contains a CPU autodiff
//! engine, the attention and workspace primitives, the host models that
//! embed them, procedural tasks, training utilities and a communication
//! cost benchmark.

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod models;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod scalar;
pub mod tasks;
pub mod tensor;
pub mod train;
pub mod workspace;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{Initializer, ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
