//! Pixel-difference convolution (angular and radial), its exact rewrite into
//! vanilla convolution, a tape-based reverse-mode autodiff engine, and a
//! compact vision transformer classifier — all dense `f64`, no_std + alloc.
//!
//! The crate is IO-free: file formats, datasets, and the CLI live in the
//! companion `pdcvit` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod adam;
pub mod error;
pub mod gradcheck;
mod kernels;
mod math;
pub mod model;
pub mod pdc;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod vit;

pub use error::{CoreError, Result};
pub use tape::{GradTape, Var};
pub use tensor::Tensor;
