pub mod attention;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod scoring;
pub mod ssm;
pub mod training;

pub use error::{MaatError, Result};
