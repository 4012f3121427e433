//! Two-stage lung nodule analysis: a pluggable ROI detection stage followed
//! by an attention-aware weight-excitation U-Net segmenter, plus the full
//! training/evaluation/synthesis toolchain around it.

pub mod attention;
pub mod autograd;
pub mod config;
pub mod data;
pub mod detect;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod par;
pub mod train;

pub use error::{Error, Result};
