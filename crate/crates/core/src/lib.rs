pub mod cli;
pub mod error;
pub mod homotopy;
pub mod problems;
pub mod saa;
pub mod sampling;
pub mod schedule;
pub mod tracer;

pub use error::{Error, ModelError, Result};
