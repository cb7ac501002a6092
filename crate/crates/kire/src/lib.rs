//! File formats, checkpoints, run configuration and the command pipeline
//! around `kire-core`.

pub mod checkpoint;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod run_config;
pub mod workdir;

pub use error::{Error, Result};
