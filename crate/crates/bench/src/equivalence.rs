//! Empirical check that the spinal construction reproduces random
//! single-hidden-layer networks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use spinalnet::layers::{Activation, Mode};
use spinalnet::spinal::{build_equivalent_spinal, ShallowNet};
use spinalnet::{Tape, Tensor};

use crate::error::Result;

/// Largest forward discrepancy accepted as equivalent.
pub const TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceConfig {
    pub hidden: usize,
    pub inputs: usize,
    pub outputs: usize,
    pub act: Activation,
    pub block_width: usize,
    pub trials: usize,
    pub samples: usize,
    /// Half-width of the uniform range for weights and inputs.
    pub scale: f64,
    pub seed: u64,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        EquivalenceConfig {
            hidden: 4,
            inputs: 10,
            outputs: 1,
            act: Activation::Tanh,
            block_width: 2,
            trials: 100,
            samples: 100,
            scale: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub config: EquivalenceConfig,
    pub max_discrepancy: f64,
    /// Trials whose discrepancy exceeded [`TOLERANCE`].
    pub failures: usize,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

pub fn max_discrepancy(net: &ShallowNet, x: &Tensor, block_width: usize) -> Result<f64> {
    let mut layer = build_equivalent_spinal(net, block_width)?;
    layer.mode = Mode::Eval;
    let tape = Tape::new();
    let y = layer.forward(tape.leaf(x), &mut ChaCha8Rng::seed_from_u64(0))?.value();
    let o = net.outputs();
    let worst = x
        .data()
        .chunks(net.inputs())
        .zip(y.data().chunks(o))
        .flat_map(|(xi, yi)| net.forward_one(xi).into_iter().zip(yi).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    Ok(worst)
}

pub fn run(config: &EquivalenceConfig) -> Result<EquivalenceReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for _ in 0..config.trials {
        let mut net = ShallowNet::random(config.inputs, config.hidden, config.outputs, config.act, &mut rng);
        for t in [&mut net.w, &mut net.b, &mut net.v, &mut net.c] {
            t.data_mut().iter_mut().for_each(|v| *v *= config.scale);
        }
        let x = Tensor::uniform(&[config.samples, config.inputs], config.scale, &mut rng);
        let d = max_discrepancy(&net, &x, config.block_width)?;
        if !(d < TOLERANCE) {
            failures += 1;
        }
        worst = worst.max(d);
    }
    Ok(EquivalenceReport {
        config: config.clone(),
        max_discrepancy: worst,
        failures,
    })
}
