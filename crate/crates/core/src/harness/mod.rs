//! The pieces behind the `loat` command line: configs, sweeps, the metrics
//! table, manifests and post-hoc analysis.

pub mod analysis;
pub mod config;
pub mod manifest;
pub mod plot;
pub mod sweep;
pub mod table;
