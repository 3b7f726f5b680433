//! Cross-subject brain decoding on voxel recordings of varying size.
//!
//! Each subject's voxels are pooled to a common width, mapped by a
//! subject-specific embedder into a shared semantic space, and decoded by a
//! single shared translator into image and text embedding grids. A
//! per-subject builder inverts the embedder, which enables cycle-consistency
//! training, cross-subject signal synthesis and reset-tuning onto new
//! subjects.

pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod syntheval;
pub mod training;

pub use error::{Error, Result};
