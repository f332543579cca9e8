pub mod augment;
pub mod dataset;
pub mod error;
pub mod features;
pub mod fixture;
pub mod model;
pub mod nn;
pub mod pbt;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
