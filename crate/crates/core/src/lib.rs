//! Drift-resistant autoregressive latent world model.
//!
//! The crate trains a small conditional flow-matching denoiser on a synthetic
//! 2-D driving world, hardens it against its own rollout errors with scheduled
//! rollout recovery, distills it into a few-step student along autoregressive
//! rollouts, and measures drift with exactly computable metrics.

pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod rollout;
pub mod srr;
pub mod trd;
pub mod worldsim;
pub mod tensor;

pub use error::{Error, Result};
