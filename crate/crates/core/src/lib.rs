//! Simulation and numerical verification toolkit for the record process
//! on the Brownian continuum random tree.

pub mod analytics;
pub mod crt_sampler;
pub mod error;
pub mod quad;
pub mod randkit;
pub mod record_process;
pub mod removed_mass;
pub mod tree_core;

pub use error::{Error, Result};
