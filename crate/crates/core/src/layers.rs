//! Trainable building blocks: linear, conv2d, max-pooling, flatten and dropout.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn is_nonlinear(self) -> bool {
        !matches!(self, Activation::Identity)
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::Spec(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Uniform in ±1/sqrt(fan_in), for weights and biases alike.
pub(crate) fn init_param(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, bound, rng).with_requires_grad(true)
}

/// Shared `x·Wᵀ + b` used by linear layers and spinal sub-layers.
pub(crate) fn affine<'t>(x: Var<'t>, weight: &Tensor, bias: Option<&Tensor>) -> Result<Var<'t>> {
    let tape = x.tape();
    let y = x.matmul_nt(&tape.leaf(weight))?;
    match bias {
        Some(b) => y.add_bias(&tape.leaf(b)),
        None => Ok(y),
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl LinearLayer {
    pub fn new(inputs: usize, outputs: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        LinearLayer {
            weight: init_param(&[outputs, inputs], inputs, rng),
            bias: init_param(&[outputs], inputs, rng),
            activation,
        }
    }

    /// Builds a layer from explicit values; both become trainable.
    pub fn from_parts(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 2 || bias.shape() != [ws[0]] {
            return Err(Error::shape("linear", ws, bias.shape()));
        }
        Ok(LinearLayer {
            weight: weight.with_requires_grad(true),
            bias: bias.with_requires_grad(true),
            activation,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.inputs() {
            return Err(Error::shape("linear", &s, self.weight.shape()));
        }
        Ok(affine(x, &self.weight, Some(&self.bias))?.activation(self.activation))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv2dLayer {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut impl Rng) -> Result<Self> {
        if kernel == 0 || in_ch == 0 || out_ch == 0 {
            return Err(Error::Config(format!(
                "conv2d needs positive sizes, got in={in_ch} out={out_ch} k={kernel}"
            )));
        }
        let fan_in = in_ch * kernel * kernel;
        Ok(Conv2dLayer {
            weight: init_param(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
            bias: init_param(&[out_ch], fan_in, rng),
        })
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 4 || ws[2] != ws[3] || bias.shape() != [ws[0]] {
            return Err(Error::shape("conv2d", ws, bias.shape()));
        }
        Ok(Conv2dLayer {
            weight: weight.with_requires_grad(true),
            bias: bias.with_requires_grad(true),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let tape = x.tape();
        x.conv2d(&tape.leaf(&self.weight), &tape.leaf(&self.bias))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// 2×2 window, stride 2.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaxPool2dLayer;

impl MaxPool2dLayer {
    pub fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.maxpool2d()
    }
}

/// `[n×c×h×w] → [n×(c·h·w)]`, row-major.
pub fn flatten<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    if s.is_empty() {
        return Err(Error::shape("flatten", &s, &[]));
    }
    let features = s[1..].iter().product();
    x.reshape(&[s[0], features])
}

#[derive(Debug, Clone)]
pub struct DropoutLayer {
    rate: f64,
    pub mode: Mode,
}

impl DropoutLayer {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        Ok(DropoutLayer {
            rate,
            mode: Mode::Train,
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Inverted dropout: survivors are scaled by `1/(1-rate)` in train mode.
    pub fn forward<'t, R: Rng + ?Sized>(&self, x: Var<'t>, rng: &mut R) -> Result<Var<'t>> {
        dropout(x, self.rate, self.mode, rng)
    }
}

pub(crate) fn dropout<'t, R: Rng + ?Sized>(
    x: Var<'t>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var<'t>> {
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let shape = x.shape();
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - rate);
    let mask = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mask = x.tape().constant(Tensor::new(&shape, mask)?);
    x.mul(&mask)
}
