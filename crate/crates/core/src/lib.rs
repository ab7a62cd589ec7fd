pub mod error;
pub mod geometry;
pub mod metrics;
pub mod models;
pub mod raster;
pub mod scene;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
