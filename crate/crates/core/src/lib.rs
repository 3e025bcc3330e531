//! Linear response laboratory.
//!
//! Exact linear-response evaluation on finite Markov chains, and Monte Carlo
//! response estimation plus structural checks for stochastic differential
//! equations with polynomial drift and additive noise.

pub mod cli_io;
pub mod error;
pub mod gap_probe;
pub mod integrator;
pub mod markov_testbed;
pub mod observable;
pub mod poly_system;
pub mod presets;
pub mod response;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
