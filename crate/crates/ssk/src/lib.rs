//! Sequence segmentation kit: a self-contained differentiable-computation
//! kernel plus experiment toolkit for ConvLSTM-FCN video segmentation at
//! desk scale.
//!
//! The pieces, bottom up:
//!
//! - [`tensor`] — deterministic N-D arrays with reverse-mode differentiation
//!   over exactly the operation set the models need, plus a finite-difference
//!   gradient checker.
//! - [`convlstm`] — the convolutional LSTM cell with peephole connections,
//!   sequence unrolling, and frame/clip reshapes.
//! - [`losses`] — cross-entropy, the soft multi-class IoU loss, and the
//!   weighted segmentation loss with intersection/union-derived weights.
//! - [`metrics`] — confusion-matrix mIoU, temporal-improvement profiles,
//!   per-subject reports, paired significance tests.
//! - [`models`] — the mini-FCN builder and its conversion to ConvLSTM-FCN.
//! - [`optim`] — Adam and RMSprop with layer-wise learning-rate groups,
//!   linear decay, and group freezing.
//! - [`data`] — landmark-to-mask rasterization, the synthetic video
//!   generator, sequence batching, crop localization, temporal smoothing.
//! - [`cascade`] — the primary + zoomed-in inference pipeline.
//! - [`checkpoint`] — the SSK1 parameter archive format.
//! - [`experiment`] — the two-step training protocol and report emitters
//!   driven by [`config::ExperimentConfig`].


pub mod cascade;
pub mod checkpoint;
pub mod config;
pub mod convlstm;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
