//! Simulation and rate verification for slow-fast stochastic differential
//! equations driven by symmetric α-stable processes.

pub mod corrector;
pub mod ergodics;
pub mod error;
pub mod harness;
pub mod integrator;
pub mod model;
pub mod noise;
pub mod stats;

pub use error::{Error, Result};
