//! Streaming Bayesian inference: generative filtering and comparator
//! samplers over a generic streaming-model interface, with exact-posterior
//! oracles, convergence-bound calculators, and an experiment harness.

pub mod bounds;
pub mod diagnostics;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod pups;
pub mod rng;
pub mod samplers;
pub mod ssm;
pub mod textio;

pub use error::{Error, Result};
