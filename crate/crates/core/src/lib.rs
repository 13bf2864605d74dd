pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod predictor;
pub mod report;
pub mod seed;
pub mod translator;

pub use error::{Error, Result};
