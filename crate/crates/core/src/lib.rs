//! Classifier training with differentiable LRP heatmaps that penalize
//! background attention, plus the tooling to measure shortcut learning on
//! synthetically biased digit images.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors, convolution and pooling kernels.
//! - [`graph`]: typed layer graphs, forward tapes, backprop, SGD.
//! - [`autodiff`]: per-sample reverse-mode graphs used to differentiate heatmaps.
//! - [`lrp`]: the explicit per-layer relevance engine and the gradient-based flex engine.
//! - [`loss`]: background/foreground heatmap losses and their aggregation.
//! - [`range`]: online statistics that calibrate the foreground loss range.
//! - [`data`]: IDX files, synthetic digits, bias regimes, masks, splits.
//! - [`harness`]: training variants, evaluation, timing benchmarks, config.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod graph;
pub mod harness;
pub mod loss;
pub mod lrp;
pub mod par;
pub mod range;
pub mod tensor;

#[cfg(test)]
pub(crate) mod test_util;

pub use error::{Error, Result};
pub use tensor::Tensor;
