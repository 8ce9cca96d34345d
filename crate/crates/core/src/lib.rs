//! Capturability-constrained footstep planning and learning on a LIPM surrogate.
//!
//! The crate builds up a full pipeline in layers:
//!
//! * [`lipm`] — closed-form pendulum dynamics and the step-phase clock
//! * [`tvr`] — velocity-reversal footstep planner
//! * [`capturability`] — capture-region safe sets and a brute-force oracle
//! * [`gp`] — Gaussian-process residual dynamics model
//! * [`qp`] / [`safety`] — safety-filter quadratic program and action composition
//! * [`policy`] — Gaussian MLP policy and value networks
//! * [`env`] — surrogate per-footstep environment
//! * [`ppo`] — clipped-surrogate trainer with GAE
//! * [`config`] — scenario configuration, presets, manifests
//! * [`verify`] — runtime safety verification routines

pub mod capturability;
pub mod config;
pub mod env;
pub mod error;
pub mod gp;
pub mod lipm;
pub mod policy;
pub mod ppo;
pub mod qp;
pub mod safety;
pub mod rng;
pub mod tvr;
pub mod verify;

pub use error::{Error, Result};
