pub mod attention;
pub mod backbone;
pub mod classes;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod metrics;
pub mod model;
pub mod multilevel;
pub mod params;
pub mod plot;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
