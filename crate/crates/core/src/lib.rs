//! Multi-stage detection heads trained at increasing IoU thresholds, on a
//! synthetic proposal benchmark.

pub mod assign;
pub mod baselines;
pub mod cascade;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geom;
pub mod io;
pub mod losses;
pub mod model;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
