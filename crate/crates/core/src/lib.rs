//! Joint subgroup discovery and treatment-effect estimation for
//! longitudinal patient data, with benchmarks, metrics and a trial-emulation
//! harness.

pub mod autograd;
pub mod data;
pub mod emulation;
pub mod encoder;
pub mod error;
pub mod nn;
pub mod metrics;
pub mod model;
pub mod subgroup;

pub use error::{Result, StedrError};
