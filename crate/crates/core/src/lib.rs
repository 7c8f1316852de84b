pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod retrieval;
pub mod seed;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
