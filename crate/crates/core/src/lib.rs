//! Mixed-precision quantization-aware training for a small Transformer
//! encoder, with a true nibble-packed int4/int8 integer inference path.
//!
//! The crate is organized around the training pipeline:
//! calibrate initial quantization scales from weight/activation statistics,
//! fine-tune weights and learned scales with fake quantization in the loop
//! (optionally distilling from a float teacher), then pack weights into
//! integer matrices and run them through exact integer GEMM kernels.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod integer;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod quant;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
