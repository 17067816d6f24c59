//! Few-shot segmentation workbench core.
//!
//! Everything numeric lives here: a small dense-tensor substrate with
//! reverse-mode autodiff, a tiny convolutional backbone, training-free
//! correspondence prior masks, the multi-scale feature enrichment module,
//! the assembled network with its episodic trainer, synthetic episode
//! generation, and segmentation metrics.
//!
//! The crate is `no_std`-compatible (`alloc` required). Builds without the
//! default `std` feature must enable the `libm` feature for float math.

#![cfg_attr(not(feature = "std"), no_std)]

#[cfg(not(any(feature = "std", feature = "libm")))]
compile_error!("pfenet-core requires either the `std` or the `libm` feature");

extern crate alloc;

pub mod backbone;
pub mod episodes;
pub mod error;
pub mod fem;
pub mod layers;
mod math;
pub mod metrics;
pub mod model;
pub mod prior;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
