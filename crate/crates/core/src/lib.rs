pub mod aggregation;
pub mod data;
pub mod embedder;
pub mod experiment;
pub mod error;
pub mod federation;
pub mod graph;
pub mod kmeans;
pub mod prototypes;

pub use error::{Error, Result};
