//! Numerical laboratory for a single-block mixture-of-experts residual model
//! trained by multi-rate gradient flow.
//!
//! * [`model`]: forward/backward field maps.
//! * [`dynamics`]: exact gradients, Euler integration, gating, bias balancing.
//! * [`kernels`]: particle states, two-time kernels, bounded-Lipschitz distance.
//! * [`volterra`]: telescoping and Volterra identities on recorded traces.
//! * [`meanfield`]: Monte-Carlo fixed point of the single-site mean-field equations.
//! * [`scaling`]: parameterizations, sweeps, concentration fits, loss-curve collapse.
//! * [`cli`]: configuration, seeding and file output.

pub mod cli;
pub mod dynamics;
pub mod error;
pub mod kernels;
pub mod meanfield;
pub mod model;
pub mod scaling;
pub mod seed;
pub mod volterra;

pub use error::{Error, Result};
