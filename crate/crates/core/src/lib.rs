//! Post-training quantization toolkit: fake-quantized inference graphs,
//! per-layer calibration, mixed-precision bit allocation and batch-norm /
//! bias tuning.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adam;
pub mod adaquant;
pub mod allocator;
pub mod archive;
pub mod bias_tune;
pub mod bn_tune;
pub mod error;
pub mod eval;
pub mod graph;
pub mod layers;
pub mod pipeline;
pub mod qmodel;
pub mod quant;
mod sampling;
pub mod tensor;
#[cfg(test)]
pub(crate) mod test_support;

pub use error::{Error, Result};
pub use graph::{CalibrationSet, LayerKind, LayerNode, ModelGraph, Precision};
pub use quant::{Granularity, LayerQuant, QuantParams};
pub use tensor::Tensor;
