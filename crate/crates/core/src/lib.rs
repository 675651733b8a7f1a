//! Streaming, pose-free object reconstruction into a canonical field of 3D
//! Gaussians, driven by a bounded dual-key attention memory.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod losses;
pub mod memory;
pub mod pipeline;
pub mod ply;
pub mod raster;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
