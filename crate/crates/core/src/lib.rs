//! Toy concept-erasure lab for conditional diffusion models on low-dimensional
//! Gaussian mixtures.

mod container;
pub mod data;
pub mod erasure;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod schedule;

pub use error::{Error, Result};
pub use rng::RngStream;
