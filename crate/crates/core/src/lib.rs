pub mod cli;
pub mod coeh;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numkernel;
pub mod pgcl;
pub mod synthetic;
pub mod trainer;

pub use error::{Result, TfecError};
