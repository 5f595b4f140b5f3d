//! Learnable quantization-range laboratory.
//!
//! - [`quant`]: asymmetric and symmetric fake quantization.
//! - [`grad`]: range parameterizations and their gradients.
//! - [`optim`]: SGD/Adam steppers and learning-rate policies.
//! - [`lab`]: range-learning experiments on synthetic tensors.
//! - [`net`]: range learning inside a small frozen MLP.
//! - [`io`]: trace serialization and SVG plotting.

pub mod error;
pub mod grad;
pub mod io;
pub mod lab;
pub mod net;
pub mod optim;
pub mod quant;

pub use error::{QuantError, Result};
