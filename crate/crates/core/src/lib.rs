//! Diffusion posterior proximal sampling for linear inverse problems.
//!
//! The reverse diffusion chain is guided toward a measurement `y = A x0 + n`
//! and, at every step, picks among several candidate noise draws the one
//! whose next state lands closest to the DDIM deterministic target in
//! measurement space. Priors are analytic (Gaussian and Gaussian mixtures),
//! so every quantity has a closed-form reference.

pub mod commands;
pub mod config;
pub mod error;
pub mod field;
pub mod harness;
pub mod image;
pub mod operators;
pub mod prior;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};
pub use field::SignalField;
pub use operators::LinearOperator;
pub use prior::PriorModel;
pub use schedule::NoiseSchedule;
