//! Structural cost accounting for a [`ModelSpec`].
//!
//! Counts are per sample and depend only on the spec. A multiplication is one
//! weight·input product; bias additions are free. Activation units are
//! nonlinear hidden units of the fully-connected part (linear and spinal
//! layers) plus, for standalone activation layers, the elements they touch.

use serde::Serialize;

use crate::error::Result;
use crate::model::{LayerSpec, ModelSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub index: usize,
    pub kind: String,
    pub params: u64,
    pub mults: u64,
    pub activations: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub per_layer: Vec<LayerCost>,
    pub total_params: u64,
    pub total_mults: u64,
    /// Multiplications inside linear and spinal layers only.
    pub fc_mults: u64,
    /// Nonlinear hidden units inside linear and spinal layers only.
    pub fc_activations: u64,
}

fn is_fc(layer: &LayerSpec) -> bool {
    matches!(layer, LayerSpec::Linear { .. } | LayerSpec::Spinal(_))
}

fn layer_cost(index: usize, layer: &LayerSpec, input: &[usize], output: &[usize]) -> LayerCost {
    let (params, mults, activations) = match layer {
        LayerSpec::Linear { inputs, outputs, act } => {
            let w = inputs * outputs;
            let acts = if act.is_nonlinear() { *outputs } else { 0 };
            (w + outputs, w, acts)
        }
        LayerSpec::Conv2d { in_ch, out_ch, kernel } => {
            let w = out_ch * in_ch * kernel * kernel;
            let positions = output[1] * output[2];
            (w + out_ch, w * positions, 0)
        }
        LayerSpec::Spinal(cfg) => (cfg.param_count(), cfg.mult_count(), cfg.nonlinear_units()),
        LayerSpec::Activation(a) if a.is_nonlinear() => (0, 0, input.iter().product()),
        _ => (0, 0, 0),
    };
    LayerCost {
        index,
        kind: layer.kind().to_string(),
        params: params as u64,
        mults: mults as u64,
        activations: activations as u64,
    }
}

pub fn cost_report(model: &ModelSpec) -> Result<CostReport> {
    let shapes = model.shapes()?;
    let mut report = CostReport {
        per_layer: Vec::with_capacity(model.layers.len()),
        total_params: 0,
        total_mults: 0,
        fc_mults: 0,
        fc_activations: 0,
    };
    let mut input = model.input_shape.as_slice();
    for (i, (layer, output)) in model.layers.iter().zip(&shapes).enumerate() {
        let cost = layer_cost(i, layer, input, output);
        report.total_params += cost.params;
        report.total_mults += cost.mults;
        if is_fc(layer) {
            report.fc_mults += cost.mults;
            report.fc_activations += cost.activations;
        }
        report.per_layer.push(cost);
        input = output;
    }
    Ok(report)
}

pub fn count_params(model: &ModelSpec) -> Result<u64> {
    Ok(cost_report(model)?.total_params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MultCount {
    pub total: u64,
    pub fc: u64,
}

pub fn count_mults(model: &ModelSpec) -> Result<MultCount> {
    let r = cost_report(model)?;
    Ok(MultCount {
        total: r.total_mults,
        fc: r.fc_mults,
    })
}

pub fn count_activations(model: &ModelSpec) -> Result<u64> {
    Ok(cost_report(model)?.fc_activations)
}

/// `1 - candidate/baseline`, as a fraction.
pub fn reduction(baseline: u64, candidate: u64) -> f64 {
    1.0 - candidate as f64 / baseline as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(text: &str) -> ModelSpec {
        text.parse().unwrap()
    }

    #[test]
    fn empty_model_costs_nothing() {
        let r = cost_report(&spec("input 8")).unwrap();
        assert_eq!((r.total_params, r.total_mults, r.fc_activations), (0, 0, 0));
        assert!(r.per_layer.is_empty());
    }

    #[test]
    fn no_hidden_layers_no_activations() {
        let m = spec("input 8\nlinear in=8 out=1 act=identity");
        assert_eq!(count_activations(&m).unwrap(), 0);
        assert_eq!(count_params(&m).unwrap(), 9);
        assert_eq!(count_mults(&m).unwrap(), MultCount { total: 8, fc: 8 });
    }

    #[test]
    fn conv_counts_spatial_positions() {
        let m = spec("input 1x28x28\nconv2d in=1 out=10 k=5");
        let r = cost_report(&m).unwrap();
        assert_eq!(r.total_params, 260);
        assert_eq!(r.total_mults, 250 * 24 * 24);
        assert_eq!(r.fc_mults, 0);
    }

    #[test]
    fn totals_are_sums() {
        let m = spec(
            "input 1x12x12\nconv2d in=1 out=4 k=3\nmaxpool2d\nrelu\nflatten\nlinear in=100 out=7 act=tanh\nlinear in=7 out=3",
        );
        let r = cost_report(&m).unwrap();
        assert_eq!(r.total_params, r.per_layer.iter().map(|l| l.params).sum::<u64>());
        assert_eq!(r.total_mults, r.per_layer.iter().map(|l| l.mults).sum::<u64>());
        assert_eq!(r.fc_activations, 7);
        assert_eq!(r.per_layer[2].activations, 100);
    }
}
