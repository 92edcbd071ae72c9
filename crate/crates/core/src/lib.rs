pub mod cli;
pub mod error;
pub mod fsio;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod parallel;
pub mod params;
pub mod policy;
pub mod profiler;
pub mod tape;
pub mod tensor;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
