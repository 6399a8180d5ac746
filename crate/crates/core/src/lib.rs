//! Learned image stitching with alignment-oriented adversarial attacks and
//! adaptive adversarial architecture search.
//!
//! The crate is organized around a small `f64` reverse-mode autodiff tape
//! ([`graph`]) that makes the whole stitching pipeline differentiable:
//! homography estimation through a four-point DLT solve, bilinear warping,
//! and the alignment losses that both training and the attacks ascend.
//!
//! Modules:
//! - [`geometry`] — homography algebra, DLT, differentiable warping, canvases
//! - [`cells`] — searchable five-node mixed-operation cells and genotypes
//! - [`estimator`] — three-scale pyramid homography estimator
//! - [`reconstructor`] — U-Net-style wide-FOV reconstruction from warps
//! - [`losses`] — alignment losses on homographies and shared regions
//! - [`attacks`] — FGSM / BIM / PGD and the stitching-oriented attack
//! - [`training`] — standard, routine-adversarial, and adaptive training
//! - [`data`] — synthetic pair generation, manifests, splits
//! - [`metrics`] — stitched-image and alignment metrics, evaluation sweeps
//! - [`checkpoint`] — portable parameter archives

pub mod attacks;
pub mod cells;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod estimator;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod reconstructor;
pub mod tensor;
pub mod training;

pub use error::{CoreError, Result};
pub use tensor::Tensor;
