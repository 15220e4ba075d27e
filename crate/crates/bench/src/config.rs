//! Experiment configuration files.
//!
//! An experiment is a TOML document:
//!
//! ```toml
//! name = "sum-spinal"
//! model = """
//! input 8
//! spinal in=8 sublayers=6 width=50 segments=2 out=1
//! """
//! epochs = 200
//! batch_size = 512
//! seeds = [1, 2, 3]
//!
//! [dataset]
//! kind = "regression"
//! target = "sum"
//!
//! [optimizer]
//! kind = "adam"
//! lr = 0.01
//!
//! [output]
//! csv = "sum-spinal.csv"
//! summary = "sum-spinal.json"
//! ```
//!
//! Every optional key has a default, and [`ExperimentConfig::resolve`] writes
//! those defaults back so the summary echoes the exact settings used.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spinalnet::data::RegressionSpec;
use spinalnet::train::OptimizerKind;
use spinalnet::ModelSpec;

use crate::error::{BenchError, Result};

/// Environment variable naming the directory that holds the IDX files.
pub const DATA_DIR_ENV: &str = "SPINALNET_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelSpec,
    pub dataset: DatasetConfig,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    /// Defaults to the whole training set for regression and 64 otherwise.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Defaults to `false` for full-batch runs and `true` otherwise.
    #[serde(default)]
    pub shuffle: Option<bool>,
    /// When false the CSV `wall_time_s` column is written as 0 so repeated
    /// runs produce identical files; timings still go to the summary.
    #[serde(default)]
    pub record_wall_time: bool,
    /// Epochs summarized in the JSON report. Defaults to 100 and 200 (those
    /// not exceeding `epochs`) for regression, the final epoch otherwise.
    #[serde(default)]
    pub checkpoints: Option<Vec<usize>>,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Regression(RegressionSpec),
    Idx(IdxConfig),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxConfig {
    /// Directory with `train-*` and `t10k-*` IDX files, optionally gzipped.
    /// Falls back to `$SPINALNET_DATA_DIR`.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Train on the first `n` training samples only.
    #[serde(default)]
    pub train_subset: Option<usize>,
    #[serde(default)]
    pub test_subset: Option<usize>,
    /// Standardize pixels with the training-set mean and std.
    #[serde(default)]
    pub standardize: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Metrics CSV; stdout when absent.
    #[serde(default)]
    pub csv: Option<PathBuf>,
    /// JSON summary; stderr when absent.
    #[serde(default)]
    pub summary: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
        let config: ExperimentConfig =
            toml::from_str(&text).map_err(|source| BenchError::Config { path: path.into(), source })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.seeds.is_empty() {
            return Err(BenchError::Invalid("seeds must not be empty".into()));
        }
        if self.batch_size == Some(0) {
            return Err(BenchError::Invalid("batch_size must be at least 1".into()));
        }
        if let Some(cps) = &self.checkpoints {
            if let Some(bad) = cps.iter().find(|&&c| c == 0 || c > self.epochs) {
                return Err(BenchError::Invalid(format!(
                    "checkpoint {bad} outside 1..={}",
                    self.epochs
                )));
            }
        }
        Ok(())
    }

    pub fn is_regression(&self) -> bool {
        matches!(self.dataset, DatasetConfig::Regression(_))
    }

    /// A copy with every default materialized.
    pub fn resolve(&self) -> ExperimentConfig {
        let mut c = self.clone();
        let batch = c.batch_size.unwrap_or(match &c.dataset {
            DatasetConfig::Regression(spec) => spec.train_samples,
            DatasetConfig::Idx(_) => 64,
        });
        c.batch_size = Some(batch);
        if c.shuffle.is_none() {
            let full_batch = matches!(&c.dataset, DatasetConfig::Regression(s) if batch >= s.train_samples);
            c.shuffle = Some(!full_batch);
        }
        if c.checkpoints.is_none() {
            c.checkpoints = Some(if c.is_regression() {
                [100, 200].into_iter().filter(|&e| e <= c.epochs).collect()
            } else if c.epochs > 0 {
                vec![c.epochs]
            } else {
                Vec::new()
            });
        }
        if let DatasetConfig::Idx(idx) = &mut c.dataset {
            if idx.dir.is_none() {
                idx.dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
            }
        }
        c
    }

    pub fn batch(&self) -> usize {
        self.batch_size.unwrap_or(64)
    }
}
