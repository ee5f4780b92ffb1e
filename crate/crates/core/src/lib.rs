//! Joint forecasting of future hand trajectories and interaction hotspots
//! from egocentric observations.
//!
//! The crate is organized as:
//!
//! * [`geometry`]: homographies, RANSAC, chain projection and automatic labels.
//! * [`synthdata`]: a deterministic synthetic scene generator with exact ground truth.
//! * [`tokens`]: per-frame hand/object/global tokens and their embeddings.
//! * [`oct`]: the object-centric transformer encoder and autoregressive decoder.
//! * [`heads`]: conditional VAE heads and the action-anticipation head.
//! * [`pipeline`]: training, stochastic forecasting, heatmaps and baselines.
//! * [`metrics`]: ADE/FDE, SIM, AUC-Judd and NSS.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops read better than zipped iterators in the numeric kernels.
#![allow(clippy::needless_range_loop)]

pub mod autograd;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod heads;
pub mod metrics;
pub mod oct;
pub mod pipeline;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod tokens;
pub mod types;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub use types::{BBox, ContactPointSet, HandTrajectory, Point, Side};
pub use weights::Weights;

/// Guide chapters, compiled so their snippets stay in sync with the code.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/synthdata.md")]
    mod synthdata {}
    #[doc = include_str!("../../../book/src/tokens.md")]
    mod tokens {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    mod reproducibility {}
}
