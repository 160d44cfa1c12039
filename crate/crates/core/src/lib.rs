pub mod bench;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod geometry;
pub mod heads;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod projector;
pub mod query;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, FormatError, Result};
