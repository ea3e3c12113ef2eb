//! Metrics, training, and evaluation around the segmentation network.

pub mod eval;
pub mod metrics;
pub mod train;
