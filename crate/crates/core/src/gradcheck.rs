//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward rules it is used to verify.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor for relative errors.
pub const REL_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_GUARD)
}

/// Compares autodiff gradients of the scalar `f(inputs)` against
/// `(f(x + h) - f(x - h)) / 2h`, element by element, for every input.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|t| t.clone().with_requires_grad(true))
        .collect();
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?.value();
        if out.numel() != 1 {
            return Err(Error::contract("gradcheck", "function must return a scalar"));
        }
        Ok(out.item())
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let zeros;
        let analytic = match grads.wrt(*var) {
            Some(g) => g,
            None => {
                zeros = vec![0.0; inputs[i].numel()];
                &zeros
            }
        };
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = relative_error(analytic[j], numeric);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.max_abs_error = report.max_abs_error.max((analytic[j] - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Like [`check`], but differentiates with respect to the parameters a module
/// registers itself. `params` must list the same tensors in the same order on
/// every call.
pub fn check_module<M, P, F>(module: &mut M, params: P, h: f64, loss: F) -> Result<GradCheck>
where
    P: Fn(&mut M) -> Vec<&mut Tensor>,
    F: for<'t> Fn(&M, &'t Tape) -> Result<Var<'t>>,
{
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let grads = tape.backward(loss(module, &tape)?)?;
        params(module)
            .iter()
            .map(|p| grads.get(p).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
            .collect()
    };
    let eval = |m: &M| -> Result<f64> {
        let tape = Tape::new();
        Ok(loss(m, &tape)?.value().item())
    };
    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        for (j, &a) in grad.iter().enumerate() {
            let orig = params(module)[pi].data()[j];
            params(module)[pi].data_mut()[j] = orig + h;
            let plus = eval(module)?;
            params(module)[pi].data_mut()[j] = orig - h;
            let minus = eval(module)?;
            params(module)[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}
