//! Polar bird's-eye-view perception from multiple cameras.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: a small dense tensor engine with a reverse-mode tape, covering
//!   exactly the operators the model needs (ring convolution, bilinear
//!   sampling, height-driven projection, pooling, losses).
//! - [`geometry`]: the polar BEV grid, pinhole cameras and multi-view
//!   projection.
//! - [`pipeline`]: polar embeddings, iterative surface estimation, the
//!   height-based 2D-to-3D feature transform, the segmentation head, polar to
//!   rectangular remapping, the loss and a toy trainer.
//! - [`metrics`]: IoU, instance decoding and panoptic quality.
//! - [`synth`]: deterministic box-world scenes, analytic ray-cast rendering and
//!   ground-truth rasters.

pub mod error;
pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
