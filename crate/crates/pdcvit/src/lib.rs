//! IO, datasets, training, evaluation, and the CLI for the PDC-ViT
//! classifier. Numerics live in `pdcvit-core`; this crate owns everything
//! that touches the filesystem.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod synth;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
