pub mod analysis;
pub mod autodiff;
pub mod bench;
pub mod consolidation;
pub mod error;
pub mod harness;
pub mod losses;
pub mod model;
pub mod rng;
pub mod trainer;
pub mod worldgen;

pub use error::{Error, Result};
