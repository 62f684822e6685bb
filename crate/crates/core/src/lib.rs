//! Contour-aware nuclei instance segmentation built on a small reverse-mode
//! autodiff core: dense encoder with pyramidal laterals, twin decoders coupled
//! by information aggregation, robust truncated losses, synthetic corpus
//! generation, instance post-processing and AJI/F1 evaluation.

pub mod canonical;
pub mod config;
pub mod data;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod post;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
