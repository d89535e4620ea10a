pub mod data;
pub mod ddo;
pub mod error;
pub mod grad;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod rng;
pub mod selfplay;

pub use error::{Error, Result};
