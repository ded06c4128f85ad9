//! Sparse-view CT reconstruction with a diffusion-regularized implicit
//! neural representation, plus filtered-backprojection, plain-INR and
//! diffusion-posterior baselines and the accompanying evaluation tooling.
//!
//! The crate is organized as a pipeline:
//!
//! * [`nnkit`] — tensors, reverse-mode autodiff, Adam, weight files
//! * [`tomo`] — parallel-beam geometry, matched projector pair, FBP
//! * [`phantom`] — synthetic training and evaluation images
//! * [`diffusion`] — noise schedule, denoiser pretraining, DDIM stepping
//! * [`inr`] — FBP-conditioned SIREN and its proximal training loss
//! * [`solver`] — the reconstruction loop and its baselines
//! * [`metrics`] — PSNR / SSIM / nested-ROI evaluation
//! * [`config`] + [`cli`] — experiment configs and the command-line runner

// Validation sites use `!(x > 0.0)` on purpose: unlike `x <= 0.0`, the
// negated form also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod export;
pub mod inr;
pub mod metrics;
pub mod nnkit;
pub mod phantom;
pub mod rng;
pub mod solver;
pub mod tomo;

pub use error::{Error, Result};
