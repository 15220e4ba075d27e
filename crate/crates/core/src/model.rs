//! Declarative model descriptions and the networks built from them.
//!
//! A [`ModelSpec`] has a textual form, one layer per line (`;` also separates
//! layers, `#` starts a comment):
//!
//! ```text
//! input 1x28x28
//! conv2d in=1 out=10 k=5
//! maxpool2d
//! relu
//! conv2d in=10 out=20 k=5
//! dropout rate=0.5
//! maxpool2d
//! relu
//! flatten
//! spinal in=320 sublayers=6 width=8 segments=2 out=10 act=relu bias=true dropout=0
//! log_softmax
//! ```
//!
//! `linear in=N out=M act=A` declares a dense layer, a bare activation name
//! (`relu`, `tanh`, `identity`) an element-wise activation. The spinal `act`
//! key accepts a single activation or a comma-separated list with one entry
//! per sub-layer.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{self, Activation, Conv2dLayer, DropoutLayer, LinearLayer, MaxPool2dLayer, Mode};
use crate::spinal::{SpinalConfig, SpinalLayer};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Linear {
        inputs: usize,
        outputs: usize,
        act: Activation,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    },
    MaxPool2d,
    Flatten,
    Dropout {
        rate: f64,
    },
    Activation(Activation),
    Spinal(SpinalConfig),
    LogSoftmax,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool2d => "maxpool2d",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Activation(_) => "activation",
            LayerSpec::Spinal(_) => "spinal",
            LayerSpec::LogSoftmax => "log_softmax",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |what: String| {
            Err(Error::Spec(format!(
                "{} layer cannot take input {input:?}: {what}",
                self.kind()
            )))
        };
        match self {
            LayerSpec::Linear { inputs, outputs, .. } => {
                if input != [*inputs] {
                    return mismatch(format!("expected [{inputs}]"));
                }
                Ok(vec![*outputs])
            }
            LayerSpec::Conv2d { in_ch, out_ch, kernel } => {
                if input.len() != 3 || input[0] != *in_ch {
                    return mismatch(format!("expected {in_ch} channels"));
                }
                if input[1] < *kernel || input[2] < *kernel {
                    return mismatch(format!("smaller than kernel {kernel}"));
                }
                Ok(vec![*out_ch, input[1] - kernel + 1, input[2] - kernel + 1])
            }
            LayerSpec::MaxPool2d => {
                if input.len() != 3 || input[1] % 2 != 0 || input[2] % 2 != 0 {
                    return mismatch("expected c×h×w with even h and w".into());
                }
                Ok(vec![input[0], input[1] / 2, input[2] / 2])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Dropout { .. } | LayerSpec::Activation(_) => Ok(input.to_vec()),
            LayerSpec::Spinal(cfg) => {
                if input != [cfg.input_width] {
                    return mismatch(format!("expected [{}]", cfg.input_width));
                }
                Ok(vec![cfg.output_width])
            }
            LayerSpec::LogSoftmax => {
                if input.len() != 1 {
                    return mismatch("expected a feature vector".into());
                }
                Ok(input.to_vec())
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Linear { inputs, outputs, .. } if *inputs == 0 || *outputs == 0 => {
                Err(Error::Spec("linear widths must be positive".into()))
            }
            LayerSpec::Conv2d { in_ch, out_ch, kernel } if *in_ch == 0 || *out_ch == 0 || *kernel == 0 => {
                Err(Error::Spec("conv2d sizes must be positive".into()))
            }
            LayerSpec::Dropout { rate } if !(0.0..1.0).contains(rate) => {
                Err(Error::Spec(format!("dropout rate must be in [0, 1), got {rate}")))
            }
            LayerSpec::Spinal(cfg) => cfg.validate().map_err(|e| Error::Spec(e.to_string())),
            _ => Ok(()),
        }
    }
}

fn kv_args<'a>(kind: &str, parts: impl Iterator<Item = &'a str>) -> Result<BTreeMap<&'a str, &'a str>> {
    let mut map = BTreeMap::new();
    for p in parts {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| Error::Spec(format!("{kind}: expected key=value, got `{p}`")))?;
        if map.insert(k, v).is_some() {
            return Err(Error::Spec(format!("{kind}: duplicate key `{k}`")));
        }
    }
    Ok(map)
}

struct Args<'a> {
    kind: &'a str,
    map: BTreeMap<&'a str, &'a str>,
}

impl<'a> Args<'a> {
    fn take_raw(&mut self, key: &str) -> Option<&'a str> {
        self.map.remove(key)
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let raw = self
            .take_raw(key)
            .ok_or_else(|| Error::Spec(format!("{}: missing `{key}`", self.kind)))?;
        self.parse(key, raw)
    }

    fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.take_raw(key) {
            Some(raw) => self.parse(key, raw),
            None => Ok(default),
        }
    }

    fn parse<T: FromStr>(&self, key: &str, raw: &str) -> Result<T> {
        raw.parse()
            .map_err(|_| Error::Spec(format!("{}: bad value `{raw}` for `{key}`", self.kind)))
    }

    fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            Some(k) => Err(Error::Spec(format!("{}: unknown key `{k}`", self.kind))),
            None => Ok(()),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut words = line.split_whitespace();
        let kind = words
            .next()
            .ok_or_else(|| Error::Spec("empty layer description".into()))?;
        let mut args = Args {
            kind,
            map: kv_args(kind, words)?,
        };
        let spec = match kind {
            "linear" => LayerSpec::Linear {
                inputs: args.take("in")?,
                outputs: args.take("out")?,
                act: args.take_or("act", Activation::Identity)?,
            },
            "conv2d" => LayerSpec::Conv2d {
                in_ch: args.take("in")?,
                out_ch: args.take("out")?,
                kernel: args.take("k")?,
            },
            "maxpool2d" => LayerSpec::MaxPool2d,
            "flatten" => LayerSpec::Flatten,
            "dropout" => LayerSpec::Dropout {
                rate: args.take("rate")?,
            },
            "log_softmax" => LayerSpec::LogSoftmax,
            "spinal" => {
                let mut cfg = SpinalConfig::new(
                    args.take("in")?,
                    args.take("sublayers")?,
                    args.take("width")?,
                    args.take("segments")?,
                    args.take("out")?,
                );
                if let Some(raw) = args.take_raw("act") {
                    let acts = raw
                        .split(',')
                        .map(str::parse)
                        .collect::<Result<Vec<Activation>>>()?;
                    cfg.activations = match acts.as_slice() {
                        [single] => vec![*single; cfg.num_sublayers],
                        _ => acts,
                    };
                }
                cfg.output_bias = args.take_or("bias", true)?;
                cfg.dropout = args.take_or("dropout", 0.0)?;
                LayerSpec::Spinal(cfg)
            }
            act => match act.parse::<Activation>() {
                Ok(a) => LayerSpec::Activation(a),
                Err(_) => return Err(Error::Spec(format!("unknown layer kind `{kind}`"))),
            },
        };
        args.finish()?;
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Linear { inputs, outputs, act } => {
                write!(f, "linear in={inputs} out={outputs} act={act}")
            }
            LayerSpec::Conv2d { in_ch, out_ch, kernel } => {
                write!(f, "conv2d in={in_ch} out={out_ch} k={kernel}")
            }
            LayerSpec::MaxPool2d => f.write_str("maxpool2d"),
            LayerSpec::Flatten => f.write_str("flatten"),
            LayerSpec::Dropout { rate } => write!(f, "dropout rate={rate}"),
            LayerSpec::Activation(a) => write!(f, "{a}"),
            LayerSpec::LogSoftmax => f.write_str("log_softmax"),
            LayerSpec::Spinal(c) => {
                write!(
                    f,
                    "spinal in={} sublayers={} width={} segments={} out={} act=",
                    c.input_width, c.num_sublayers, c.sublayer_width, c.num_segments, c.output_width
                )?;
                let uniform = c.activations.windows(2).all(|w| w[0] == w[1]);
                if uniform {
                    write!(f, "{}", c.activations[0])?;
                } else {
                    let names: Vec<String> = c.activations.iter().map(ToString::to_string).collect();
                    f.write_str(&names.join(","))?;
                }
                write!(f, " bias={} dropout={}", c.output_bias, c.dropout)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    /// Shape of one sample, e.g. `[8]` or `[1, 28, 28]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        ModelSpec { input_shape, layers }
    }

    /// Per-sample shape after each layer, checking that neighbours fit.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Spec(format!("invalid input shape {:?}", self.input_shape)));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            cur = layer
                .output_shape(&cur)
                .map_err(|e| Error::Spec(format!("layer {i}: {e}")))?;
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().unwrap_or_else(|| self.input_shape.clone()))
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut lines = s
            .split(['\n', ';'])
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty());
        let head = lines
            .next()
            .ok_or_else(|| Error::Spec("missing `input` line".into()))?;
        let dims = head
            .strip_prefix("input")
            .map(str::trim)
            .ok_or_else(|| Error::Spec(format!("first line must be `input <shape>`, got `{head}`")))?;
        let input_shape = dims
            .split('x')
            .map(|d| {
                d.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Spec(format!("bad input shape `{dims}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let layers = lines.map(str::parse).collect::<Result<Vec<_>>>()?;
        let spec = ModelSpec { input_shape, layers };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.input_shape.iter().map(ToString::to_string).collect();
        write!(f, "input {}", dims.join("x"))?;
        for layer in &self.layers {
            write!(f, "\n{layer}")?;
        }
        Ok(())
    }
}

impl Serialize for ModelSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ModelSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Linear(LinearLayer),
    Conv2d(Conv2dLayer),
    MaxPool2d(MaxPool2dLayer),
    Flatten,
    Dropout(DropoutLayer),
    Activation(Activation),
    Spinal(SpinalLayer),
    LogSoftmax,
}

impl Layer {
    pub fn forward<'t, R: Rng + ?Sized>(&self, x: Var<'t>, rng: &mut R) -> Result<Var<'t>> {
        match self {
            Layer::Linear(l) => l.forward(x),
            Layer::Conv2d(l) => l.forward(x),
            Layer::MaxPool2d(l) => l.forward(x),
            Layer::Flatten => layers::flatten(x),
            Layer::Dropout(l) => l.forward(x, rng),
            Layer::Activation(a) => Ok(x.activation(*a)),
            Layer::Spinal(l) => l.forward(x, rng),
            Layer::LogSoftmax => x.log_softmax(),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Linear(l) => l.params(),
            Layer::Conv2d(l) => l.params(),
            Layer::Spinal(l) => l.params(),
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Linear(l) => l.params_mut(),
            Layer::Conv2d(l) => l.params_mut(),
            Layer::Spinal(l) => l.params_mut(),
            _ => Vec::new(),
        }
    }

    fn set_mode(&mut self, mode: Mode) {
        match self {
            Layer::Dropout(l) => l.mode = mode,
            Layer::Spinal(l) => l.mode = mode,
            _ => {}
        }
    }
}

/// A sequential network assembled from a [`ModelSpec`].
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
}

impl Model {
    pub fn new(spec: ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layers
            .iter()
            .map(|l| {
                Ok(match l {
                    LayerSpec::Linear { inputs, outputs, act } => {
                        Layer::Linear(LinearLayer::new(*inputs, *outputs, *act, rng))
                    }
                    LayerSpec::Conv2d { in_ch, out_ch, kernel } => {
                        Layer::Conv2d(Conv2dLayer::new(*in_ch, *out_ch, *kernel, rng)?)
                    }
                    LayerSpec::MaxPool2d => Layer::MaxPool2d(MaxPool2dLayer),
                    LayerSpec::Flatten => Layer::Flatten,
                    LayerSpec::Dropout { rate } => Layer::Dropout(DropoutLayer::new(*rate)?),
                    LayerSpec::Activation(a) => Layer::Activation(*a),
                    LayerSpec::Spinal(cfg) => Layer::Spinal(SpinalLayer::new(cfg.clone(), rng)?),
                    LayerSpec::LogSoftmax => Layer::LogSoftmax,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model { spec, layers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Runs a batch `[n × input_shape…]` through every layer.
    pub fn forward<'t, R: Rng + ?Sized>(&self, x: Var<'t>, rng: &mut R) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != self.spec.input_shape.len() + 1 || s[1..] != self.spec.input_shape[..] {
            return Err(Error::shape("model input", &s, &self.spec.input_shape));
        }
        self.layers.iter().try_fold(x, |h, layer| layer.forward(h, rng))
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.layers.iter_mut().for_each(|l| l.set_mode(mode));
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}
