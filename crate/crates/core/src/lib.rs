//! Numerical core for decomposed temporal dynamic convolution (DTDY) speaker
//! verification models.
//!
//! `no_std` with `alloc`. File formats, audio IO and the command-line front
//! end live in the `dtdy` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod dynamic_conv;
pub mod error;
pub mod evaluation;
pub mod explainability;
pub mod features;
mod kernels;
pub mod model_zoo;
pub mod params;
pub mod tensor;
pub mod training;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::Tensor;
