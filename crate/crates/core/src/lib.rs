//! ECG heartbeat classification with a compact temporal convolutional network.
//!
//! The crate covers the whole deployment path: float training on ECG5000,
//! batch-norm folding and INT-8 post-training quantization, a deterministic
//! integer-only inference engine, parameter/MAC/memory accounting, tiled
//! execution planning for a two-level memory, and emission of a portable C
//! implementation that is bit-identical to the engine.

pub mod codegen;
pub mod container;
pub mod cost;
pub mod data;
pub mod engine;
pub mod error;
pub mod model;
pub mod parallel;
pub mod quant;
pub mod synthetic;
pub mod tcn;
pub mod tiling;

pub use error::{Error, Result};
