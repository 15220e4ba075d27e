//! Side-by-side reproduction of the regression and MNIST comparisons.

use std::fmt::Write as _;
use std::path::PathBuf;

use spinalnet::costing::{count_activations, count_mults, count_params, reduction};
use spinalnet::data::{RegressionSpec, TargetFn};
use spinalnet::train::OptimizerKind;
use spinalnet::ModelSpec;

use crate::config::{DatasetConfig, ExperimentConfig, IdxConfig, OutputConfig};
use crate::error::{BenchError, Result};
use crate::presets::{self, CountReference};
use crate::run::{run_experiment, write_file, Outcome, Stats};

#[derive(Debug, Clone, PartialEq)]
pub struct CountCheck {
    pub label: &'static str,
    pub expected: u64,
    pub measured: u64,
}

impl CountCheck {
    pub fn ok(&self) -> bool {
        self.expected == self.measured
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Criterion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Default)]
pub struct Report {
    pub counts: Vec<CountCheck>,
    pub criteria: Vec<Criterion>,
    /// Human-readable comparison table.
    pub table: String,
    pub outcomes: Vec<Outcome>,
}

impl Report {
    /// Fails on any count mismatch first, then on any failed criterion.
    pub fn verdict(&self) -> Result<()> {
        let bad_counts = self.counts.iter().filter(|c| !c.ok()).count();
        if bad_counts > 0 {
            return Err(BenchError::CountMismatch(bad_counts));
        }
        let failed = self.criteria.iter().filter(|c| !c.passed).count();
        if failed > 0 {
            return Err(BenchError::Failed(failed));
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<34} {:>10} {:>10}", "structural count", "reference", "measured").unwrap();
        for c in &self.counts {
            let mark = if c.ok() { "ok" } else { "MISMATCH" };
            writeln!(s, "{:<34} {:>10} {:>10}  {mark}", c.label, c.expected, c.measured).unwrap();
        }
        if !self.table.is_empty() {
            writeln!(s).unwrap();
            s.push_str(&self.table);
        }
        if !self.criteria.is_empty() {
            writeln!(s).unwrap();
            for c in &self.criteria {
                let mark = if c.passed { "PASS" } else { "FAIL" };
                writeln!(s, "{mark} {}: {}", c.name, c.detail).unwrap();
            }
        }
        s
    }
}

fn check(refs: &[CountReference], measured: &[u64]) -> Vec<CountCheck> {
    refs.iter()
        .zip(measured)
        .map(|(r, &m)| CountCheck {
            label: r.label,
            expected: r.expected,
            measured: m,
        })
        .collect()
}

pub fn regression_counts() -> Result<Vec<CountCheck>> {
    let (base, spinal) = (presets::regression_baseline(), presets::regression_spinal());
    let measured = [
        count_params(&base)?,
        count_params(&spinal)?,
        count_mults(&base)?.total,
        count_mults(&spinal)?.total,
        count_activations(&spinal)?,
    ];
    Ok(check(presets::REGRESSION_COUNTS, &measured))
}

pub fn mnist_counts() -> Result<Vec<CountCheck>> {
    let (base, s8, s10) = (presets::cnn_baseline(), presets::cnn_spinal(8), presets::cnn_spinal(10));
    let measured = [
        count_params(&base)?,
        count_params(&s8)?,
        count_params(&s10)?,
        count_mults(&base)?.fc,
        count_mults(&s8)?.fc,
        count_activations(&base)?,
        count_activations(&s8)?,
    ];
    Ok(check(presets::MNIST_COUNTS, &measured))
}

#[derive(Debug, Clone)]
pub struct RegressionOptions {
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub noise_sigma: f64,
    pub samples: usize,
    pub targets: Vec<TargetFn>,
    /// Write each run's CSV and summary here.
    pub out_dir: Option<PathBuf>,
}

impl Default for RegressionOptions {
    fn default() -> Self {
        RegressionOptions {
            seeds: vec![1, 2, 3],
            epochs: 200,
            noise_sigma: 0.2,
            samples: 512,
            targets: TargetFn::ALL.to_vec(),
            out_dir: None,
        }
    }
}

pub fn regression_config(name: &str, model: ModelSpec, target: TargetFn, opts: &RegressionOptions) -> ExperimentConfig {
    let mut spec = RegressionSpec::new(target);
    spec.noise_sigma = opts.noise_sigma;
    spec.train_samples = opts.samples;
    spec.test_samples = opts.samples;
    ExperimentConfig {
        name: name.to_string(),
        model,
        dataset: DatasetConfig::Regression(spec),
        optimizer: OptimizerKind::adam(0.01),
        epochs: opts.epochs,
        batch_size: None,
        seeds: opts.seeds.clone(),
        shuffle: None,
        record_wall_time: false,
        checkpoints: None,
        output: OutputConfig::default(),
    }
}

fn persist(outcome: &Outcome, out_dir: &Option<PathBuf>) -> Result<()> {
    let Some(dir) = out_dir else { return Ok(()) };
    let name = &outcome.config.name;
    let mut csv = Vec::new();
    outcome.write_csv(&mut csv)?;
    write_file(&dir.join(format!("{name}.csv")), &csv)?;
    let json = serde_json::to_vec_pretty(&outcome.summary())?;
    write_file(&dir.join(format!("{name}.json")), &json)
}

fn mean(values: &[f64]) -> f64 {
    Stats::of(values).map_or(f64::NAN, |s| s.mean)
}

pub fn reproduce_regression(opts: &RegressionOptions, mut log: impl FnMut(&str)) -> Result<Report> {
    let mut report = Report {
        counts: regression_counts()?,
        ..Report::default()
    };
    let base_mults = count_mults(&presets::regression_baseline())?.total;
    let spinal_mults = count_mults(&presets::regression_spinal())?.total;
    let mut table = format!(
        "multiplication reduction {:.2}%\n\n{:<9} {:<8} {:>16} {:>16} {:>16} {:>16}\n",
        100.0 * reduction(base_mults, spinal_mults),
        "target",
        "model",
        "reported@100",
        "reported@200",
        "mean best@100",
        "mean best@final"
    );
    let noise_var = opts.noise_sigma * opts.noise_sigma;
    let mut within = 0;
    let mut compared = 0;
    for target in &opts.targets {
        let reference = presets::REGRESSION_MSE.iter().find(|r| r.target == *target);
        let mut finals = [f64::NAN; 2];
        for (slot, (label, model)) in [("baseline", presets::regression_baseline()), ("spinal", presets::regression_spinal())]
            .into_iter()
            .enumerate()
        {
            let name = format!("{}-{label}", target.name());
            log(&format!("training {name}"));
            let outcome = run_experiment(&regression_config(&name, model, *target, opts), |_| {})?;
            persist(&outcome, &opts.out_dir)?;
            let at100 = mean(&outcome.best_at(100));
            let last = outcome.best_at(opts.epochs);
            finals[slot] = mean(&last);
            let reported = reference.map(|r| if slot == 0 { r.baseline } else { r.spinal });
            let fmt_ref = |i: usize| reported.map_or("-".to_string(), |r| format!("{:.3}e-3", r[i]));
            writeln!(
                table,
                "{:<9} {:<8} {:>16} {:>16} {:>16.5} {:>16.5}",
                target.name(),
                label,
                fmt_ref(0),
                fmt_ref(1),
                at100,
                finals[slot]
            )
            .unwrap();
            if *target == TargetFn::Sum {
                let worst = last.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                report.criteria.push(Criterion {
                    name: format!("sum target, {label} below 10x noise variance"),
                    passed: worst < 10.0 * noise_var,
                    detail: format!("worst seed best-so-far {worst:.5} vs bound {:.5}", 10.0 * noise_var),
                });
            }
            report.outcomes.push(outcome);
        }
        compared += 1;
        let ratio = finals[1] / finals[0];
        if ratio <= 1.5 {
            within += 1;
        }
        writeln!(table, "{:<9} spinal/baseline mean MSE ratio {ratio:.3}", "").unwrap();
    }
    let needed = compared.min(3);
    report.criteria.push(Criterion {
        name: "spinal within 1.5x of baseline".into(),
        passed: within >= needed,
        detail: format!("{within} of {compared} targets (need {needed})"),
    });
    report.table = table;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct MnistOptions {
    pub data_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub train_subset: Option<usize>,
    /// Also train the 10-unit spinal head.
    pub wide_head: bool,
    pub out_dir: Option<PathBuf>,
}

impl Default for MnistOptions {
    fn default() -> Self {
        MnistOptions {
            data_dir: None,
            seeds: vec![0],
            epochs: 8,
            train_subset: None,
            wide_head: false,
            out_dir: None,
        }
    }
}

pub fn mnist_config(name: &str, model: ModelSpec, opts: &MnistOptions) -> ExperimentConfig {
    ExperimentConfig {
        name: name.to_string(),
        model,
        dataset: DatasetConfig::Idx(IdxConfig {
            dir: opts.data_dir.clone(),
            train_subset: opts.train_subset,
            test_subset: None,
            standardize: false,
        }),
        optimizer: OptimizerKind::sgd(0.01, 0.5),
        epochs: opts.epochs,
        batch_size: Some(64),
        seeds: opts.seeds.clone(),
        shuffle: Some(true),
        record_wall_time: false,
        checkpoints: None,
        output: OutputConfig::default(),
    }
}

pub fn reproduce_mnist(opts: &MnistOptions, mut log: impl FnMut(&str)) -> Result<Report> {
    let mut report = Report {
        counts: mnist_counts()?,
        ..Report::default()
    };
    let base = count_mults(&presets::cnn_baseline())?.fc;
    let s8 = count_mults(&presets::cnn_spinal(8))?.fc;
    let mut table = format!(
        "head multiplication reduction {:.2}%, head activation reduction {:.2}%\n\n{:<14} {:>10} {:>12} {:>12}\n",
        100.0 * reduction(base, s8),
        100.0 * reduction(count_activations(&presets::cnn_baseline())?, count_activations(&presets::cnn_spinal(8))?),
        "model",
        "params",
        "reported %",
        "measured %"
    );
    let subset = opts.train_subset.is_some_and(|n| n < 60_000);
    let mut models = vec![
        ("cnn", presets::cnn_baseline(), presets::MNIST_FLOOR_BASELINE),
        ("cnn-spinal-8", presets::cnn_spinal(8), presets::MNIST_FLOOR_SPINAL),
    ];
    if opts.wide_head {
        models.push(("cnn-spinal-10", presets::cnn_spinal(10), presets::MNIST_FLOOR_SPINAL));
    }
    for (name, model, floor) in models {
        log(&format!("training {name}"));
        let outcome = run_experiment(&mnist_config(name, model, opts), |r| {
            log(&format!("  seed {} epoch {} accuracy {:.4}", r.seed, r.epoch, r.eval_metric))
        })?;
        persist(&outcome, &opts.out_dir)?;
        let acc = outcome.best_at(opts.epochs);
        let final_acc: Vec<f64> = outcome
            .runs
            .iter()
            .filter_map(|r| r.records.last().map(|m| m.eval_metric))
            .collect();
        let reported = presets::MNIST_ACCURACY.iter().find(|(n, _)| *n == name).map(|r| r.1);
        writeln!(
            table,
            "{:<14} {:>10} {:>12} {:>12.2}",
            name,
            outcome.total_params,
            reported.map_or("-".into(), |r| format!("{r:.2}")),
            100.0 * mean(&final_acc)
        )
        .unwrap();
        let floor = if subset { presets::MNIST_FLOOR_SUBSET } else { floor };
        let worst = final_acc.iter().copied().fold(f64::INFINITY, f64::min);
        report.criteria.push(Criterion {
            name: format!("{name} accuracy after {} epochs", opts.epochs),
            passed: worst >= floor,
            detail: format!(
                "{:.2}% (best-so-far {:.2}%) vs floor {:.1}%{}",
                100.0 * worst,
                100.0 * mean(&acc),
                100.0 * floor,
                if subset { ", training subset" } else { "" }
            ),
        });
        report.outcomes.push(outcome);
    }
    report.table = table;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_counts_hold() {
        assert!(regression_counts().unwrap().iter().all(CountCheck::ok));
        assert!(mnist_counts().unwrap().iter().all(CountCheck::ok));
    }

    #[test]
    fn count_mismatch_wins() {
        let report = Report {
            counts: vec![CountCheck { label: "x", expected: 1, measured: 2 }],
            criteria: vec![Criterion { name: "c".into(), passed: false, detail: String::new() }],
            ..Report::default()
        };
        assert!(matches!(report.verdict(), Err(BenchError::CountMismatch(1))));
        assert!(report.render().contains("MISMATCH"));
    }

    #[test]
    fn short_regression_run() {
        let opts = RegressionOptions {
            seeds: vec![1],
            epochs: 3,
            samples: 32,
            targets: vec![TargetFn::Sum],
            ..Default::default()
        };
        let report = reproduce_regression(&opts, |_| {}).unwrap();
        assert_eq!(report.outcomes.len(), 2);
        assert_eq!(report.criteria.len(), 3);
        assert!(report.render().contains("sum"));
    }
}
