//! Simulation and analysis of low-bit floating-point and integer
//! quantization: format grids, fast fake-quantization with a brute-force
//! oracle, closed-form expected-MSE for parametric distributions, MSE-based
//! format search on tensors, and gradient-based learning of the clipping
//! value and mantissa width.

pub mod analytic;
pub mod error;
pub mod formats;
pub mod learn;
pub mod quantsim;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};
pub use formats::{bias_from_max, FpFormat, IntFormat, QuantGrid};
pub use tensor::{read_tensor, write_tensor, Tensor};
