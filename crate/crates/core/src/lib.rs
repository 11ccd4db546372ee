pub mod classifier;
pub mod cli;
pub mod container;
pub mod data;
pub mod distributions;
pub mod error;
pub mod eval;
pub mod models;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
