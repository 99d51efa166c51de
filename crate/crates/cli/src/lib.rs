//! File formats, run manifests, a parallel trial executor and the `cpaudit`
//! command line, on top of [`cpaudit_core`].

pub mod cli;
pub mod error;
pub mod io;
pub mod manifest;
pub mod parallel;

pub use error::{CliError, Result};
pub use manifest::RunManifest;
pub use parallel::Parallel;
