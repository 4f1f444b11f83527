//! Retrieval by dynamically generated per-image kernels, end to end on a
//! self-contained reverse-mode autodiff engine.
//!
//! The library trains and evaluates a three-branch embedding model for
//! instance re-identification on synthetic identity data:
//!
//! - a **global branch**: small convolutional backbone, pooled embedding,
//!   batch-hard triplet loss plus label-smoothed cross entropy;
//! - a **self-guided branch**: a controller network turns each image's own
//!   pooled feature into a per-image 1x1 kernel that reshapes its feature
//!   map before pooling;
//! - a **mutual branch**: every pair of images exchanges kernels, and the
//!   distance between two images is measured after each has been filtered
//!   by the other's kernel.
//!
//! See the chapters under `book/` (also compiled as doctests via [`guide`])
//! for a narrative walkthrough with runnable snippets.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod guide;
pub mod layers;
pub mod losses;
pub mod model;
pub mod mutual_guided;
pub mod ops;
pub mod self_guided;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::Tape;
pub use tensor::Tensor;

/// Whether a forward pass uses batch statistics and records gradients
/// (`Train`) or runs as a pure function of weights and input (`Eval`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
