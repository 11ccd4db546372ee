//! Minimal dense `f64` tensors with a define-by-run reverse-mode tape,
//! an Adam optimizer and seeded random streams.

pub mod check;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{GradError, Result};
pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamConfig, AdamState};
pub use params::{ParamId, ParamSet};
pub use rng::RngStream;
pub use tensor::Tensor;
