//! Split conformal prediction with adaptive prediction sets (APS), plus the
//! audit machinery needed to see where its marginal guarantee stops helping.
//!
//! The crate is `no_std` (it needs `alloc`). Everything here is pure given
//! its inputs and seeds; file formats, the CLI and run manifests live in the
//! `cpaudit` crate.
//!
//! Modules:
//!
//! - [`data`]: prediction records, datasets, seeded splitting and resampling.
//! - [`conformal`]: APS scores, plain / weighted / Mondrian calibration,
//!   prediction-set construction.
//! - [`bounds`]: Hoeffding and Clopper–Pearson binomial bounds.
//! - [`audit`]: stratified coverage reports, calibration and efficiency
//!   sweeps, superclass collapse.
//! - [`shift`]: label shift and score-shift surrogates, recalibration runs.
//! - [`selective`]: selective-accuracy curves and certified thresholds.
//! - [`synth`]: Dirichlet-around-truth synthetic classifier outputs.
//! - [`pitfalls`]: the four canned demonstrations bundled into one report.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod audit;
pub mod bounds;
pub mod conformal;
pub mod data;
mod error;
pub mod pitfalls;
pub mod rng;
pub mod selective;
pub mod shift;
pub mod synth;
pub mod trials;

pub use error::{Error, Result};

pub use audit::{CoverageReport, CoverageStat};
pub use conformal::{CalibrationResult, Partition, PredictionSet, ScoreConfig};
pub use data::{LabeledDataset, PredictionRecord, SplitSpec, Taxonomy};
