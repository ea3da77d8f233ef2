//! Core library for a decoder-only visual grounding stack with dynamic
//! visual-token elimination: tensors and reverse-mode autodiff, fusion
//! layers, token elimination, task heads, losses, the assembled model,
//! and the synthetic data pipeline it trains on.

pub mod config;
pub mod dataset;
pub mod elimination;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod heads;
pub mod losses;
pub mod model;
pub mod optim;
pub mod pgm;
pub mod rng;
pub mod scalar;
pub mod synthgen;
pub mod tape;
pub mod tensor;
pub mod weights_io;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
