pub mod autodiff;
pub mod config;
pub mod datasets;
pub mod error;
pub mod gradcheck_suite;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod sweep;
pub mod trainer;

pub use error::{Error, Result};
