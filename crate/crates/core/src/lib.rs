//! Cross-lingual representation fusion inside low-rank adapter bottlenecks.
pub mod adapters;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
