pub mod baselines;
pub mod bench;
pub mod datagen;
pub mod error;
pub mod estimator;
pub mod haar;
pub mod mechanism;
pub mod metrics;
pub mod seed;

pub use error::{Error, ErrorKind, Result};
