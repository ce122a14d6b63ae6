//! Sharpness-aware optimization on a small, allocation-only autodiff engine.
//!
//! The crate is `no_std` (it needs `alloc`) and contains only pure numerics:
//!
//! * [`tensor`], [`params`] and [`autodiff`]: dense tensors, flat parameter
//!   vectors with a layer layout, and a fresh-tape reverse-mode engine for
//!   ReLU MLPs with a mean softmax cross-entropy head.
//! * [`models`]: the MLP family plus analytic landscapes (dense quadratic and
//!   a 1-D sharp/flat double well) with known curvature.
//! * [`optim`]: SGD, SAM and bilateral SAM (BSAM) steps with the cosine
//!   learning-rate schedule and the learning-rate driven min-perturbation
//!   radius.
//! * [`probes`]: max/min/bilateral sharpness, Hessian-vector products, top
//!   Hessian eigenvalues, cosine diagnostics and 2-D loss slices.
//! * [`data`]: synthetic datasets, symmetric label noise, splits and
//!   mini-batching.
//! * [`train`]: the epoch loop that ties the pieces together.
//!
//! File formats, configuration and the command line live in the `bsam-lab`
//! crate.
#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod data;
mod error;
pub mod linalg;
mod math;
pub mod models;
pub mod optim;
pub mod params;
pub mod probes;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{finite_difference_gradient, forward_loss, grad, PassCount};
pub use data::{Batch, Dataset, Provenance};
pub use error::{Error, Result};
pub use models::ModelSpec;
pub use optim::{OptimizerConfig, OptimizerState, StepStats, Variant};
pub use params::{cosine_similarity, l2_norm, ParamVector, Segment};
pub use probes::SharpnessReport;
pub use tensor::Tensor;
