//! Multi-task residual network for single-frame crowd analysis.
//!
//! One shared convolutional backbone (the first five Resnet18-style
//! convolutions, pooling removed) feeds four task heads: a per-pixel crowd
//! heatmap, a scalar count regressor, two violent-behaviour concept scores
//! ("Fight", "Mob") and a five-way density level classifier. The crate
//! contains everything needed to train and evaluate the model from scratch
//! on the CPU:
//!
//! - [`tensor`]: a dense f32 tensor with reverse-mode autodiff covering
//!   exactly the operations the model needs, plus a finite-difference
//!   gradient checker.
//! - [`model`]: the ResnetCrowd architecture, forward pass and checkpoints.
//! - [`losses`]: the four task losses and their masked sum.
//! - [`optim`]: AdaGrad with L2 weight decay.
//! - [`data`]: dataset manifests, density binning, heatmap ground truth,
//!   augmentation, stratified folds and a synthetic scene generator.
//! - [`training`]: the optimization loop and the single-task ablation suite.
//! - [`evaluation`]: ROC AUC, counting and classification metrics, and the
//!   cross-validation report.
//! - [`anomaly`]: pooled-feature extraction plus a diagonal Gaussian mixture
//!   for outlier scoring.
//!
//! Heavy inner loops (convolutions, batch evaluation, scene rendering) run
//! data-parallel through rayon when the `parallel` feature is enabled
//! (default). [`exec::set_parallel`] switches to the sequential path at
//! runtime; both paths produce bit-identical results because work is always
//! split over disjoint output slices.

pub mod anomaly;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod losses;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
