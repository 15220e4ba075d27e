use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use spinal_bench::config::DATA_DIR_ENV;
use spinal_bench::equivalence::{self, EquivalenceConfig};
use spinal_bench::reproduce::{self, MnistOptions, RegressionOptions, Report};
use spinal_bench::run::{run_experiment, write_file};
use spinal_bench::{BenchError, ExperimentConfig, Result};
use spinalnet::costing::cost_report;
use spinalnet::layers::Activation;
use spinalnet::ModelSpec;

#[derive(Parser)]
#[command(name = "spinal-bench", version, about = "Train, cost and compare spinal and baseline networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print parameter, multiplication and activation counts as JSON.
    Cost {
        /// Experiment config (TOML) or a bare model spec file.
        path: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train the configured model for every seed.
    Train {
        config: PathBuf,
        /// Metrics CSV path, overriding the config.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Summary JSON path, overriding the config.
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Check the spinal construction against random one-hidden-layer networks.
    Equivalence {
        #[arg(long)]
        hidden: usize,
        #[arg(long)]
        input: usize,
        #[arg(long, default_value = "tanh")]
        act: Activation,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        outputs: usize,
        /// Hidden units handled by each pair of sub-layers.
        #[arg(long, default_value_t = 2)]
        block: usize,
        /// Random inputs per trial.
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a reference comparison and check it against the published figures.
    Reproduce {
        table: Table,
        #[arg(long, env = DATA_DIR_ENV)]
        data_dir: Option<PathBuf>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Train on the first N MNIST training images.
        #[arg(long)]
        train_subset: Option<usize>,
        /// Also train the 10-unit spinal head.
        #[arg(long)]
        wide_head: bool,
        /// Check structural counts only.
        #[arg(long)]
        counts_only: bool,
        /// Directory for per-run CSV and summary files.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Table {
    /// Regression: two-hidden-layer network vs spinal network.
    T1,
    /// MNIST: CNN with dense head vs spinal head.
    #[value(name = "t2-mnist")]
    T2Mnist,
}

fn read_model(path: &Path) -> Result<ModelSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
    match toml::from_str::<ExperimentConfig>(&text) {
        Ok(config) => Ok(config.model),
        Err(toml_err) => text.parse::<ModelSpec>().map_err(|spec_err| {
            BenchError::Invalid(format!(
                "{}: neither an experiment config ({toml_err}) nor a model spec ({spec_err})",
                path.display()
            ))
        }),
    }
}

fn emit(path: Option<&Path>, contents: &[u8], fallback: &mut dyn Write) -> Result<()> {
    match path {
        Some(p) => write_file(p, contents),
        None => fallback.write_all(contents).map_err(|e| BenchError::io("<stdout>", e)),
    }
}

fn cmd_cost(path: &Path, output: Option<&Path>) -> Result<()> {
    let model = read_model(path)?;
    let mut json = serde_json::to_vec_pretty(&cost_report(&model)?)?;
    json.push(b'\n');
    emit(output, &json, &mut std::io::stdout())
}

fn cmd_train(path: &Path, csv: Option<PathBuf>, summary: Option<PathBuf>, quiet: bool) -> Result<()> {
    let mut config = ExperimentConfig::load(path)?;
    config.output.csv = csv.or(config.output.csv);
    config.output.summary = summary.or(config.output.summary);
    let outcome = run_experiment(&config, |r| {
        if !quiet {
            eprintln!(
                "seed {} epoch {:>4} loss {:.6} metric {:.6} best {:.6}",
                r.seed, r.epoch, r.train_loss, r.eval_metric, r.best_so_far
            );
        }
    })?;
    let mut csv_bytes = Vec::new();
    outcome.write_csv(&mut csv_bytes)?;
    emit(config.output.csv.as_deref(), &csv_bytes, &mut std::io::stdout())?;
    let mut json = serde_json::to_vec_pretty(&outcome.summary())?;
    json.push(b'\n');
    emit(config.output.summary.as_deref(), &json, &mut std::io::stderr())
}

fn cmd_equivalence(config: EquivalenceConfig) -> Result<()> {
    let report = equivalence::run(&config)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if report.passed() {
        Ok(())
    } else {
        Err(BenchError::Failed(report.failures))
    }
}

fn finish(report: &Report) -> Result<()> {
    print!("{}", report.render());
    report.verdict()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Cost { path, output } => cmd_cost(&path, output.as_deref()),
        Command::Train { config, csv, summary, quiet } => cmd_train(&config, csv, summary, quiet),
        Command::Equivalence { hidden, input, act, trials, outputs, block, samples, seed } => {
            cmd_equivalence(EquivalenceConfig {
                hidden,
                inputs: input,
                outputs,
                act,
                block_width: block,
                trials,
                samples,
                scale: 1.0,
                seed,
            })
        }
        Command::Reproduce { table, data_dir, seeds, epochs, train_subset, wide_head, counts_only, out_dir } => {
            let log = |line: &str| eprintln!("{line}");
            match (table, counts_only) {
                (Table::T1, true) => reproduce::regression_counts().map(|counts| Report { counts, ..Report::default() }),
                (Table::T2Mnist, true) => reproduce::mnist_counts().map(|counts| Report { counts, ..Report::default() }),
                (Table::T1, false) => {
                    let mut opts = RegressionOptions { out_dir, ..RegressionOptions::default() };
                    opts.seeds = seeds.unwrap_or(opts.seeds);
                    opts.epochs = epochs.unwrap_or(opts.epochs);
                    reproduce::reproduce_regression(&opts, log)
                }
                (Table::T2Mnist, false) => {
                    let mut opts = MnistOptions { data_dir, train_subset, wide_head, out_dir, ..MnistOptions::default() };
                    opts.seeds = seeds.unwrap_or(opts.seeds);
                    opts.epochs = epochs.unwrap_or(opts.epochs);
                    reproduce::reproduce_mnist(&opts, log)
                }
            }
            .and_then(|report| finish(&report))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
