//! The book, compiled.
//!
//! Each chapter of `book/` is included here as module documentation so
//! `cargo test --doc` executes every code block in the guide; the prose
//! and the library cannot drift apart. Build the rendered book with
//! `mdbook build book/` if mdbook is installed.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/tensors-and-tape.md")]
pub mod tensors_and_tape {}

#[doc = include_str!("../../../book/src/convolution-primitives.md")]
pub mod convolution_primitives {}

#[doc = include_str!("../../../book/src/dynamic-kernels.md")]
pub mod dynamic_kernels {}

#[doc = include_str!("../../../book/src/kernel-exchange.md")]
pub mod kernel_exchange {}

#[doc = include_str!("../../../book/src/losses-and-mining.md")]
pub mod losses_and_mining {}

#[doc = include_str!("../../../book/src/synthetic-data.md")]
pub mod synthetic_data {}

#[doc = include_str!("../../../book/src/retrieval-metrics.md")]
pub mod retrieval_metrics {}

#[doc = include_str!("../../../book/src/training-pipeline.md")]
pub mod training_pipeline {}
