//! Hybrid windowed cross-attention transformer/CNN segmentation for cardiac
//! MRI, with self-supervised pretraining, sliding-window inference, Dice and
//! Hausdorff evaluation, NIfTI-1 I/O and sparse-slice whole-heart label
//! completion. Everything is computed with the in-crate reverse-mode
//! autodiff in [`tensor`].

pub mod attention;
pub mod cli;
pub mod error;
pub mod heartrecon;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ssl;
pub mod windowing;
pub mod tensor;
pub mod train;
pub mod volio;

pub use error::{Error, Result};
