//! Dynamics-informed diffusion for probabilistic spatiotemporal forecasting.
//!
//! The forward process is temporal interpolation and the reverse process is
//! forecasting: an [`nets::InterpolatorModel`] with Monte-Carlo dropout maps
//! `(x_t, x_{t+h}, i)` to `x_{t+i}`, and a deterministic
//! [`nets::ForecasterModel`] maps any intermediate state back to `x_{t+h}`.
//! [`sampling::cold_sample`] alternates the two to produce ensemble forecasts.
//!
//! Module map:
//! - [`tensor`]: dense tensors, reverse-mode autodiff, dropout, AdamW.
//! - [`dynamics`]: spring-mesh simulator, closed-form oracle systems, trajectories.
//! - [`schedule`]: diffusion-step to dynamical-time maps.
//! - [`nets`]: time embedding, perceptron backbones, oracle model pairs.
//! - [`training`]: two-stage training.
//! - [`sampling`]: cold and naive sampling, rollout, refinement.
//! - [`ode`]: sampling as Euler integration and discretization-error orders.
//! - [`metrics`]: CRPS, ensemble-mean MSE, spread-skill ratio.
//! - [`baselines`]: dropout and perturbation ensembles.
//! - [`harness`]: configs and experiment orchestration.

mod binio;

pub mod baselines;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nets;
pub mod ode;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod stats;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
