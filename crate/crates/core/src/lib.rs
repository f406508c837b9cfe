//! Differentially private Adam with adaptive clipping (DP-Adam-AC).
//!
//! The crate is split along the training pipeline:
//!
//! * [`optim`] holds the non-private reference optimizers (SGD with momentum,
//!   Adam, AdamW).
//! * [`dp`] aggregates clipped microbatch gradients, adds Gaussian noise, and
//!   runs the full DP-Adam-AC step.
//! * [`controllers`] implements the adaptive clipping norm, the clip-rate
//!   driven learning-rate multiplier, and the EMA evaluation shadow.
//! * [`accountant`] tracks Rényi DP of the subsampled Gaussian mechanism with
//!   a per-step sampling rate and converts it to `(ε, δ)`.
//! * [`models`] and [`data`] provide small models with exact gradients and
//!   deterministic synthetic datasets.
//! * [`harness`] runs configured experiments and writes CSV telemetry.

pub mod accountant;
pub mod controllers;
pub mod data;
pub mod dp;
pub mod error;
pub mod harness;
pub mod models;
pub mod optim;
pub mod params;

pub use error::{Error, Result};
pub use params::ParameterVector;
