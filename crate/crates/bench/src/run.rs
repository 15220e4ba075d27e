//! Running an experiment and reporting its metrics.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use spinalnet::data::{gen_regression, load_idx_dir, Dataset, Split};
use spinalnet::seed::{self, Stream};
use spinalnet::train::{fit, FitConfig, MetricsRecord, Optimizer, Task};
use spinalnet::Model;

use crate::config::{DatasetConfig, ExperimentConfig, IdxConfig, DATA_DIR_ENV};
use crate::error::{BenchError, Result};

pub const CSV_HEADER: [&str; 6] = ["seed", "epoch", "train_loss", "eval_metric", "best_so_far", "wall_time_s"];

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    /// The resolved configuration.
    pub config: ExperimentConfig,
    pub task: Task,
    pub total_params: u64,
    pub runs: Vec<SeedRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        Some(Stats {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Checkpoint {
    pub epoch: usize,
    /// Best-so-far metric of each seed, in seed order.
    pub best_so_far: Vec<f64>,
    #[serde(flatten)]
    pub stats: Stats,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub name: String,
    pub task: Task,
    /// `test_mse` or `test_accuracy`.
    pub metric: &'static str,
    pub total_params: u64,
    pub seeds: Vec<u64>,
    pub checkpoints: Vec<Checkpoint>,
    pub wall_time_s: Vec<f64>,
    pub config: ExperimentConfig,
}

pub fn load_idx(idx: &IdxConfig) -> Result<(Dataset, Dataset)> {
    let dir = idx
        .dir
        .as_deref()
        .ok_or_else(|| BenchError::MissingData(format!("no data directory given and ${DATA_DIR_ENV} is unset")))?;
    if !dir.is_dir() {
        return Err(BenchError::MissingData(dir.display().to_string()));
    }
    let mut train = load_idx_dir(dir, Split::Train)?;
    let mut test = load_idx_dir(dir, Split::Test)?;
    if let Some(n) = idx.train_subset {
        train = train.head(n)?;
    }
    if let Some(n) = idx.test_subset {
        test = test.head(n)?;
    }
    if idx.standardize {
        let px = train.inputs.data();
        let mean = px.iter().sum::<f64>() / px.len() as f64;
        let std = (px.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / px.len() as f64).sqrt();
        train = train.standardized(mean, std)?;
        test = test.standardized(mean, std)?;
    }
    Ok((train, test))
}

/// Trains one model per seed. `progress` sees each seed's records once its run ends.
pub fn run_experiment(config: &ExperimentConfig, mut progress: impl FnMut(&MetricsRecord)) -> Result<Outcome> {
    config.validate()?;
    let config = config.resolve();
    let shared = match &config.dataset {
        DatasetConfig::Idx(idx) => Some(load_idx(idx)?),
        DatasetConfig::Regression(_) => None,
    };
    let total_params = spinalnet::costing::count_params(&config.model)?;
    let mut task = None;
    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let generated;
        let (train, test) = match (&shared, &config.dataset) {
            (Some((train, test)), _) => (train, test),
            (None, DatasetConfig::Regression(spec)) => {
                generated = gen_regression(spec, seed)?;
                (&generated.0, &generated.1)
            }
            (None, DatasetConfig::Idx(_)) => unreachable!("idx data is loaded up front"),
        };
        task = Some(Task::of(train));
        let mut model = Model::new(config.model.clone(), &mut seed::rng(seed, Stream::Init))?;
        let mut optimizer = Optimizer::new(config.optimizer);
        let fit_config = FitConfig {
            epochs: config.epochs,
            batch_size: config.batch(),
            shuffle: config.shuffle.unwrap_or(true),
            seed,
        };
        let started = Instant::now();
        let records = fit(&mut model, train, test, &mut optimizer, &fit_config)?;
        records.iter().for_each(&mut progress);
        runs.push(SeedRun {
            seed,
            records,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }
    Ok(Outcome {
        task: task.expect("at least one seed"),
        config,
        total_params,
        runs,
    })
}

impl Outcome {
    pub fn best_at(&self, epoch: usize) -> Vec<f64> {
        self.runs
            .iter()
            .filter_map(|r| r.records.get(epoch.checked_sub(1)?).map(|m| m.best_so_far))
            .collect()
    }

    pub fn summary(&self) -> Summary {
        let checkpoints = self
            .config
            .checkpoints
            .iter()
            .flatten()
            .filter_map(|&epoch| {
                let best = self.best_at(epoch);
                Some(Checkpoint {
                    epoch,
                    stats: Stats::of(&best)?,
                    best_so_far: best,
                })
            })
            .collect();
        Summary {
            name: self.config.name.clone(),
            task: self.task,
            metric: match self.task {
                Task::Regression => "test_mse",
                Task::Classification => "test_accuracy",
            },
            total_params: self.total_params,
            seeds: self.config.seeds.clone(),
            checkpoints,
            wall_time_s: self.runs.iter().map(|r| r.wall_time_s).collect(),
            config: self.config.clone(),
        }
    }

    /// One row per (seed, epoch) under [`CSV_HEADER`]. The header is written
    /// even when there are no rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(CSV_HEADER)?;
        for r in self.runs.iter().flat_map(|r| &r.records) {
            let time = if self.config.record_wall_time { r.wall_time_s } else { 0.0 };
            w.serialize((r.seed, r.epoch, r.train_loss, r.eval_metric, r.best_so_far, time))?;
        }
        w.flush().map_err(|e| BenchError::io("<csv>", e))?;
        Ok(())
    }
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| BenchError::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| BenchError::io(path, e))
}
