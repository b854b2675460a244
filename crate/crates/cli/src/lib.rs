//! Run directories, resumable stages and reports behind the `tsap` binary.
//!
//! A run directory holds everything one experiment produces:
//!
//! ```text
//! config.toml        config snapshot
//! manifest.json      stage records, artifact checksums, timings
//! corpus/            one file per session plus a manifest
//! checkpoints/       selected pretraining weights per model
//! logs/              line-delimited training logs (step, metric, value)
//! results/           per-model cross-evaluation tables
//! results.tsv        merged result table
//! differences.tsv    difference from the matched fixed-length model
//! analysis/          clustering summaries, confusion matrices, projections
//! report.txt, report.json
//! ```

pub mod config;
pub mod error;
pub mod manifest;
pub mod report;
pub mod run;

pub use error::{CliError, Result};
