//! Numerical laboratory for the loss landscape of adversarial training.
//!
//! The crate is organised bottom-up:
//!
//! - [`params`], [`model`], [`data`]: flat parameter vectors, differentiable
//!   classifiers (linear, binary logistic, MLP) and datasets.
//! - [`attack`]: FGSM, PGD, the exact vertex oracle for linear models and
//!   robust-error evaluation.
//! - [`objective`]: the adversarial loss `L_eps(theta)` as a pluggable oracle.
//! - [`schedule`]: adversarial-budget and learning-rate trajectories.
//! - [`train`]: optimizers, the min-max training loop, telemetry, ensembles.
//! - [`probe`]: Hessian-vector products, power iteration, landscape grids,
//!   perturbation similarity.
//! - [`theory`]: closed forms for linear models (version space, constant
//!   classifier threshold, adversarial logistic Hessian).
//! - [`connect`]: Bezier-curve mode connectivity.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod connect;
pub mod data;
pub mod error;
pub mod model;
pub mod objective;
pub mod params;
pub mod probe;
pub mod rng;
pub mod schedule;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamVector, Segment};
pub use rng::RngStream;
