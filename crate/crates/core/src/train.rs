//! Losses, optimizers and the training loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{batches, BatchTargets, Dataset, Targets};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::Model;
use crate::seed::{self, Stream};
use crate::tensor::Tensor;

/// Mean squared error over all elements.
pub fn mse_loss<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    let diff = pred.sub(&target)?;
    Ok(diff.mul(&diff)?.mean())
}

/// Mean negative log-likelihood of class ids under row-wise log-probabilities.
pub fn nll_loss<'t>(log_probs: Var<'t>, class_ids: &[usize]) -> Result<Var<'t>> {
    log_probs.nll(class_ids)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerKind::Sgd { lr, momentum }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Optimizer with per-parameter moment buffers. Parameters must be passed in
/// the same order at every step.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the parameters' gradient slots, then clears them.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::contract(
                "optimizer step",
                format!("parameter {i} (shape {:?}) has no gradient", params[i].shape()),
            ));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(b, p)| b.len() != p.numel())
        {
            return Err(Error::contract("optimizer step", "parameter set changed between steps"));
        }
        self.step += 1;
        let t = self.step as i32;
        for (i, p) in params.iter_mut().enumerate() {
            let (data, grad) = p.data_and_grad_mut();
            let grad = grad.expect("checked above");
            match self.kind {
                OptimizerKind::Sgd { lr, momentum } => {
                    if momentum == 0.0 {
                        data.iter_mut().zip(grad.iter()).for_each(|(w, g)| *w -= lr * g);
                    } else {
                        let buf = &mut self.first[i];
                        for ((w, g), b) in data.iter_mut().zip(grad.iter()).zip(buf.iter_mut()) {
                            *b = momentum * *b + g;
                            *w -= lr * *b;
                        }
                    }
                }
                OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (((w, g), m), v) in data.iter_mut().zip(grad.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Metric: test MSE, lower is better.
    Regression,
    /// Metric: test accuracy in `[0, 1]`, higher is better.
    Classification,
}

impl Task {
    pub fn of(dataset: &Dataset) -> Task {
        match dataset.targets {
            Targets::Classes { .. } => Task::Classification,
            Targets::Values(_) => Task::Regression,
        }
    }

    pub fn better(self, candidate: f64, incumbent: f64) -> bool {
        match self {
            Task::Regression => candidate < incumbent,
            Task::Classification => candidate > incumbent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_metric: f64,
    /// Running minimum MSE or running maximum accuracy.
    pub best_so_far: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle: bool,
    pub seed: u64,
}

fn batch_loss<'t>(model: &Model, tape: &'t Tape, inputs: &Tensor, targets: &BatchTargets, rng: &mut impl rand::Rng) -> Result<Var<'t>> {
    let out = model.forward(tape.leaf(inputs), rng)?;
    match targets {
        BatchTargets::Values(t) => mse_loss(out, tape.constant(t.clone())),
        BatchTargets::Classes(ids) => nll_loss(out, ids),
    }
}

/// Test MSE (regression) or accuracy (classification) in eval mode.
pub fn evaluate(model: &mut Model, dataset: &Dataset, batch_size: usize) -> Result<f64> {
    model.set_mode(Mode::Eval);
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut total = 0.0;
    for batch in batches::<rand::rngs::mock::StepRng>(dataset, batch_size, None)? {
        let tape = Tape::new();
        let out = model.forward(tape.leaf(&batch.inputs), &mut rng)?.value();
        match &batch.targets {
            BatchTargets::Values(t) => {
                total += out
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(p, y)| (p - y) * (p - y))
                    .sum::<f64>()
                    / t.shape()[1..].iter().product::<usize>() as f64;
            }
            BatchTargets::Classes(ids) => {
                let c = out.shape()[1];
                for (row, &id) in out.data().chunks_exact(c).zip(ids) {
                    let argmax = row
                        .iter()
                        .enumerate()
                        .fold(0, |best, (j, v)| if *v > row[best] { j } else { best });
                    total += f64::from(u8::from(argmax == id));
                }
            }
        }
    }
    model.set_mode(Mode::Train);
    Ok(total / dataset.len() as f64)
}

/// Trains `model` and evaluates it on `test` after every epoch.
///
/// Shuffling and dropout draw from their own streams of `config.seed`; weight
/// initialization is the caller's business.
pub fn fit(
    model: &mut Model,
    train: &Dataset,
    test: &Dataset,
    optimizer: &mut Optimizer,
    config: &FitConfig,
) -> Result<Vec<MetricsRecord>> {
    let task = Task::of(train);
    if Task::of(test) != task {
        return Err(Error::Config("train and test targets differ in kind".into()));
    }
    let mut shuffle_rng = seed::rng(config.seed, Stream::Shuffle);
    let mut dropout_rng = seed::rng(config.seed, Stream::Dropout);
    let eval_batch = 1000;
    let started = Instant::now();
    let mut best: Option<f64> = None;
    let mut records = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        model.set_mode(Mode::Train);
        let mut loss_sum = 0.0;
        let shuffle = config.shuffle.then_some(&mut shuffle_rng);
        for (b, batch) in batches(train, config.batch_size, shuffle)?.enumerate() {
            let tape = Tape::new();
            let loss = batch_loss(model, &tape, &batch.inputs, &batch.targets, &mut dropout_rng)?;
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(Error::NonFinite { epoch, batch: b, value });
            }
            let grads = tape.backward(loss)?;
            drop(tape);
            let mut params = model.params_mut();
            for p in params.iter_mut() {
                grads.accumulate_into(p)?;
            }
            optimizer.step(&mut params)?;
            loss_sum += value * batch.inputs.shape()[0] as f64;
        }
        let metric = evaluate(model, test, eval_batch)?;
        let best_now = match best {
            Some(b) if !task.better(metric, b) => b,
            _ => metric,
        };
        best = Some(best_now);
        records.push(MetricsRecord {
            seed: config.seed,
            epoch,
            train_loss: loss_sum / train.len() as f64,
            eval_metric: metric,
            best_so_far: best_now,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }
    model.set_mode(Mode::Train);
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_regression, RegressionSpec, TargetFn};

    fn param(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap().with_requires_grad(true)
    }

    #[test]
    fn mse_values() {
        let tape = Tape::new();
        let p = tape.leaf(&param(&[1.0, 2.0]));
        assert_eq!(mse_loss(p, p).unwrap().value().item(), 0.0);
        let a = tape.constant(Tensor::new(&[1], vec![0.0]).unwrap());
        let b = tape.constant(Tensor::new(&[1], vec![2.0]).unwrap());
        assert_eq!(mse_loss(a, b).unwrap().value().item(), 4.0);
    }

    #[test]
    fn zero_gradient_leaves_params_but_counts_step() {
        for kind in [OptimizerKind::adam(0.1), OptimizerKind::sgd(0.1, 0.9)] {
            let mut w = param(&[1.0, -2.0]);
            w.accumulate_grad(&[0.0, 0.0]).unwrap();
            let mut opt = Optimizer::new(kind);
            opt.step(&mut [&mut w]).unwrap();
            assert_eq!(w.data(), &[1.0, -2.0]);
            assert_eq!(opt.steps(), 1);
            assert!(w.grad().is_none());
        }
    }

    #[test]
    fn sgd_step_definition() {
        let mut w = param(&[0.5]);
        w.accumulate_grad(&[2.0]).unwrap();
        Optimizer::new(OptimizerKind::sgd(0.1, 0.0))
            .step(&mut [&mut w])
            .unwrap();
        assert!((w.data()[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut w = param(&[0.5]);
        let err = Optimizer::new(OptimizerKind::adam(0.01)).step(&mut [&mut w]);
        assert!(matches!(err, Err(Error::Contract { .. })));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut w = param(&[1.0]);
        let mut opt = Optimizer::new(OptimizerKind::adam(0.01));
        for _ in 0..500 {
            let tape = Tape::new();
            let v = tape.leaf(&w);
            let loss = v.mul(&v).unwrap().sum();
            let g = tape.backward(loss).unwrap();
            g.accumulate_into(&mut w).unwrap();
            opt.step(&mut [&mut w]).unwrap();
        }
        assert!(w.data()[0].abs() < 0.05, "w = {}", w.data()[0]);
    }

    #[test]
    fn sgd_changes_only_params_with_gradient() {
        let mut a = param(&[1.0, 1.0]);
        let mut b = param(&[1.0]);
        a.accumulate_grad(&[0.0, 3.0]).unwrap();
        b.accumulate_grad(&[0.0]).unwrap();
        Optimizer::new(OptimizerKind::sgd(0.5, 0.0))
            .step(&mut [&mut a, &mut b])
            .unwrap();
        assert_eq!(a.data(), &[1.0, -0.5]);
        assert_eq!(b.data(), &[1.0]);
    }

    fn linear_setup() -> (Model, Dataset, Dataset) {
        let mut spec = RegressionSpec::new(TargetFn::Sum);
        spec.noise_sigma = 0.0;
        spec.train_samples = 256;
        spec.test_samples = 128;
        let (train, test) = gen_regression(&spec, 1).unwrap();
        let model = Model::new(
            "input 8\nlinear in=8 out=1".parse().unwrap(),
            &mut seed::rng(1, Stream::Init),
        )
        .unwrap();
        (model, train, test)
    }

    #[test]
    fn zero_epochs_is_a_noop() {
        let (mut model, train, test) = linear_setup();
        let before: Vec<Tensor> = model.params().into_iter().cloned().collect();
        let cfg = FitConfig { epochs: 0, batch_size: 256, shuffle: false, seed: 0 };
        let out = fit(&mut model, &train, &test, &mut Optimizer::new(OptimizerKind::adam(0.01)), &cfg).unwrap();
        assert!(out.is_empty());
        let after: Vec<Tensor> = model.params().into_iter().cloned().collect();
        assert_eq!(before, after);
    }

    #[test]
    fn linear_model_learns_sum() {
        let (mut model, train, test) = linear_setup();
        let cfg = FitConfig { epochs: 200, batch_size: 256, shuffle: false, seed: 0 };
        let out = fit(&mut model, &train, &test, &mut Optimizer::new(OptimizerKind::adam(0.05)), &cfg).unwrap();
        let last = out.last().unwrap();
        assert!(last.best_so_far < 1e-4, "mse {}", last.best_so_far);
        assert!(out.windows(2).all(|w| w[1].best_so_far <= w[0].best_so_far));
    }

    #[test]
    fn full_batch_loss_decreases_with_small_lr() {
        let (mut model, train, _) = linear_setup();
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.01, 0.0));
        let mut rng = seed::rng(0, Stream::Dropout);
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let (x, y) = train.gather(&(0..train.len()).collect::<Vec<_>>()).unwrap();
            let tape = Tape::new();
            let loss = batch_loss(&model, &tape, &x, &y, &mut rng).unwrap();
            let v = loss.value().item();
            assert!(v <= last + 1e-15);
            last = v;
            let g = tape.backward(loss).unwrap();
            let mut ps = model.params_mut();
            for p in ps.iter_mut() {
                g.accumulate_into(p).unwrap();
            }
            opt.step(&mut ps).unwrap();
        }
    }

    #[test]
    fn nan_aborts_with_location() {
        let (mut model, mut train, test) = linear_setup();
        let mut data = train.inputs.data().to_vec();
        data[8 * 40] = f64::NAN;
        train.inputs = Tensor::new(train.inputs.shape(), data).unwrap();
        let cfg = FitConfig { epochs: 3, batch_size: 32, shuffle: false, seed: 0 };
        let err = fit(&mut model, &train, &test, &mut Optimizer::new(OptimizerKind::adam(0.01)), &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFinite { epoch: 1, batch: 1, .. }), "{err}");
    }
}
