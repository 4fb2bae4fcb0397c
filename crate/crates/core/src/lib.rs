pub mod car;
pub mod error;
pub mod graph;
pub mod inference;
pub mod metrics;
pub mod sampling;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};
