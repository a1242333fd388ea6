//! Instance-free domain adaptive detection on a desk-scale synthetic benchmark.

pub mod autodiff;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod prototypes;
pub mod rng;
pub mod synthbench;
pub mod trainer;

pub use error::{Error, Result};
