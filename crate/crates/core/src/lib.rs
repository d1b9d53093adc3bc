pub mod autograd;
pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod trainer;

pub use config::{ArchConfig, DatasetSpec, FResolution, GleadConfig};
pub use error::{GleadError, Result};
