//! Dual-branch spatial/frequency selective-state-space segmentation for 3D
//! multi-modal volumes, self-contained on CPU with 64-bit floats.

pub mod diffcore;
pub mod blocks;
pub mod data;
pub mod error;
pub mod fft3d;
pub mod harness;
pub mod network;
pub mod rng;
pub mod scan;
pub mod ssm;

pub use diffcore::NdArray;
pub use error::{Error, Result};
