pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod contrast;
pub mod data;
pub mod dfa;
pub mod error;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod psmm;
pub mod selftrain;
pub mod tensor;

pub use error::{Domain, Error, Result};
