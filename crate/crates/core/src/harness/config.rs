//! JSON configuration for single runs and sweeps.
//!
//! Unknown fields are rejected and every error names the offending field
//! path. A run manifest written by an earlier invocation is accepted in
//! place of a config; its embedded `config` object is used verbatim.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_idx, synth_blobs, DataSource, DatasetHandle};
use crate::math::RngStream;
use crate::objectives::ObjectiveSpec;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

pub const IDX_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const IDX_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const IDX_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const IDX_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// A directory holding the four standard IDX files.
    Idx {
        dir: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    /// Gaussian blobs clipped to the unit cube.
    Synthetic {
        n_train: usize,
        n_test: usize,
        dim: usize,
        classes: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_spread() -> f64 {
    0.1
}

impl DataConfig {
    /// The same config with a relative IDX directory made absolute.
    pub fn resolved(&self, base: &Path) -> DataConfig {
        match self {
            DataConfig::Idx { dir, train_limit, test_limit } if dir.is_relative() => {
                let joined = base.join(dir);
                let dir = fs::canonicalize(&joined).unwrap_or(joined);
                DataConfig::Idx { dir, train_limit: *train_limit, test_limit: *test_limit }
            }
            other => other.clone(),
        }
    }

    /// Loads the data; relative directories are taken relative to `base`.
    pub fn load(&self, base: &Path) -> Result<DatasetHandle> {
        match self {
            DataConfig::Idx { dir, train_limit, test_limit } => {
                let dir = if dir.is_relative() { base.join(dir) } else { dir.clone() };
                let train = load_idx(&dir.join(IDX_TRAIN_IMAGES), &dir.join(IDX_TRAIN_LABELS), *train_limit)?;
                let test = load_idx(&dir.join(IDX_TEST_IMAGES), &dir.join(IDX_TEST_LABELS), *test_limit)?;
                let name = dir.file_name().map_or("idx".into(), |n| n.to_string_lossy().into_owned());
                DatasetHandle::new(name, DataSource::IdxFiles, train, test)
            }
            DataConfig::Synthetic { n_train, n_test, dim, classes, spread, seed } => {
                let config_err = |field: &str, detail: &str| Error::Config { field: format!("data.{field}"), detail: detail.into() };
                if *n_train == 0 || *n_test == 0 {
                    return Err(config_err("n_train", "both splits need at least one sample"));
                }
                if *dim == 0 || *classes < 2 {
                    return Err(config_err("classes", "need dim >= 1 and at least 2 classes"));
                }
                // one draw so both splits share the blob centres
                let all = synth_blobs(&mut RngStream::derive(*seed, 1, 0), n_train + n_test, *dim, *classes, *spread)?;
                let train = all.select(&(0..*n_train).collect::<Vec<_>>());
                let test = all.select(&(*n_train..n_train + n_test).collect::<Vec<_>>());
                DatasetHandle::new("synthetic", DataSource::Synthetic, train, test)
            }
        }
    }
}

/// Config for a single training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| prefix_field("train", e))
    }
}

/// A width × λ × seed grid trained to the largest epoch budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub data: DataConfig,
    pub widths: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub epochs_list: Vec<usize>,
    /// Settings shared by every cell; width, λ, seed and epochs are overwritten.
    #[serde(default)]
    pub template: TrainConfig,
    /// Budgets up to this many epochs log every epoch.
    #[serde(default = "default_dense_budget")]
    pub dense_budget: usize,
    /// Longer budgets log every `log_every` epochs plus their final epoch.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_dense_budget() -> usize {
    10
}

fn default_log_every() -> usize {
    25
}

fn prefix_field(prefix: &str, e: Error) -> Error {
    match e {
        Error::Config { field, detail } => Error::Config { field: format!("{prefix}.{field}"), detail },
        other => other,
    }
}

fn dedup<T: Copy + PartialEq, K: Eq + std::hash::Hash>(values: &mut Vec<T>, key: impl Fn(T) -> K, name: &str, warnings: &mut Vec<String>) {
    let mut seen = HashSet::new();
    let before = values.len();
    values.retain(|&v| seen.insert(key(v)));
    if values.len() != before {
        warnings.push(format!("{name}: dropped {} duplicate value(s)", before - values.len()));
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: String, detail: &str| Err(Error::Config { field, detail: detail.into() });
        for (name, empty) in [
            ("widths", self.widths.is_empty()),
            ("lambdas", self.lambdas.is_empty()),
            ("seeds", self.seeds.is_empty()),
            ("epochs_list", self.epochs_list.is_empty()),
        ] {
            if empty {
                return bad(name.into(), "list must not be empty");
            }
        }
        if let Some(i) = self.widths.iter().position(|&w| w == 0) {
            return bad(format!("widths[{i}]"), "width must be at least 1");
        }
        if let Some(i) = self.lambdas.iter().position(|l| !(0.0..=1.0).contains(l)) {
            return bad(format!("lambdas[{i}]"), "lambda must lie in [0, 1]");
        }
        if let Some(i) = self.epochs_list.iter().position(|&e| e == 0) {
            return bad(format!("epochs_list[{i}]"), "epoch budget must be at least 1");
        }
        if self.log_every == 0 {
            return bad("log_every".into(), "must be at least 1");
        }
        if let ObjectiveSpec::Trades { .. } = self.template.objective {
            return bad("template.objective".into(), "sweeps vary lambda; use a mixture or standard objective");
        }
        self.template.validate().map_err(|e| prefix_field("template", e))
    }

    /// Removes duplicate grid values, returning one warning per affected list.
    pub fn dedup(&mut self) -> Vec<String> {
        let mut warnings = Vec::new();
        dedup(&mut self.widths, |w| w, "widths", &mut warnings);
        dedup(&mut self.lambdas, f64::to_bits, "lambdas", &mut warnings);
        dedup(&mut self.seeds, |s| s, "seeds", &mut warnings);
        dedup(&mut self.epochs_list, |e| e, "epochs_list", &mut warnings);
        self.epochs_list.sort_unstable();
        warnings
    }

    pub fn max_epochs(&self) -> usize {
        self.epochs_list.iter().copied().max().unwrap_or(0)
    }

    /// Epochs reported under `budget`.
    pub fn logged_epochs(&self, budget: usize) -> Vec<usize> {
        if budget <= self.dense_budget {
            (1..=budget).collect()
        } else {
            (1..=budget).filter(|e| e % self.log_every == 0 || *e == budget).collect()
        }
    }
}

/// Parses JSON into `T`, turning type errors into field-path diagnostics.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Config { field: "<document>".into(), detail: e.to_string() })?;
    let embedded = value.get("format_version").is_some() && value.get("config").is_some();
    if embedded {
        return serde_path_to_error::deserialize(&value["config"])
            .map_err(|e| Error::Config { field: format!("config.{}", e.path()), detail: e.inner().to_string() });
    }
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Config { field: e.path().to_string(), detail: e.inner().to_string() })
}

/// Reads a config (or manifest) file; returns it with the directory that
/// relative data paths resolve against.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<(T, PathBuf)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((parse_json(&text)?, base))
}
