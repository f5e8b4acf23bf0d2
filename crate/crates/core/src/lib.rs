pub mod checkpoint;
pub mod data;
pub mod experiment;
pub mod error;
pub mod forecaster;
pub mod gan;
pub mod metrics;
pub mod stats;
pub mod toy;
pub mod training;

pub use error::{Error, ErrorKind, Result};
