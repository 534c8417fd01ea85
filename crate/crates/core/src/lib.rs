//! Diffusion-prior-driven optimization on analytically tractable problems.
//!
//! Score distillation (SDS), variational score distillation (VSD) and the
//! approximate probability-flow ODE (APFO) drive differentiable generators
//! against Gaussian-mixture priors whose scores and denoisers are exact, so
//! every claim about optimization dynamics can be checked against a closed
//! form.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod denoiser;
pub mod distill;
pub mod error;
pub mod generator;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod prior;
pub mod rng;
pub mod sampler;
pub mod schedule;

pub use denoiser::{ConstantDenoiser, Denoiser, IdentityDenoiser};
pub use error::{Error, Result};
pub use prior::{Component, ConditionalPriorSet, GaussianMixturePrior, GuidedPrior};
pub use schedule::{stage_preset, NoiseSchedule, StagePreset, StageWindow};
