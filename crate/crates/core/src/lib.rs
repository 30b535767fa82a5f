pub mod config;
pub mod disparity;
pub mod error;
pub mod features;
pub mod fusion;
pub mod geometry;
pub mod mda;
pub mod raster;
pub mod refiner;
pub mod synthdata;
pub mod training;

pub use config::ModelConfig;
pub use error::{Error, Result};
