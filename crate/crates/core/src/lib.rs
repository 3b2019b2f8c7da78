pub mod batch;
pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod drift;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod interp;
pub mod rng;
pub mod schedule;
pub mod targets;
pub mod transform;

pub use error::{Error, Result};
