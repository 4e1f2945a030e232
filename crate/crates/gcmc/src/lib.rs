//! File formats, training and evaluation around [`gcmc_core`].

pub mod atomic;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod inspect;
pub mod ltns;
pub mod trainer;

pub use error::{Error, Result};
