//! Adversarial-training laboratory for bias-free ReLU MLPs.
//!
//! The crate is organised bottom-up:
//!
//! * [`math`]: dense row-major matrices, stable softmax, seeded RNG streams.
//! * [`dataset`]: IDX ingestion, synthetic blobs, deterministic batching, dump format.
//! * [`mlp`]: the hypothesis class, exact forward/backward passes, checkpoints.
//! * [`objectives`]: cross-entropy risk, mixture and TRADES objectives, gaps and bounds.
//! * [`attacks`]: FGSM and PGD under ℓ∞ / ℓ2 balls with [0,1] clipping.
//! * [`frn`]: Fisher-Rao norm, logit-gap radius estimators, Rademacher bounds.
//! * [`loat`]: logit-oriented penalties and the epoch-gated loss schedule.
//! * [`trainer`]: SGD-with-momentum training loop and per-epoch metrics.
//! * [`harness`]: configuration, sweeps, correlation and plot-script emission behind the `loat` CLI.

pub mod attacks;
pub mod dataset;
pub mod error;
pub mod frn;
pub mod harness;
pub mod loat;
pub mod math;
pub mod mlp;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
