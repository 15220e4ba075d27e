//! The spinal layer: a fully-connected block that takes its input gradually.
//!
//! The input vector is cut into `k` contiguous segments. A chain of `L` narrow
//! sub-layers (the intermediate row) consumes them round-robin: sub-layer `i`
//! sees segment `i mod k`, and every sub-layer after the first also sees the
//! previous sub-layer's activations. A linear output row reads the
//! concatenation of all sub-layer activations, so every sub-layer has a direct
//! path to the output.
//!
//! ```text
//!  seg0 ─► h0 ─┐
//!  seg1 ─► h1 ─┤  (h1 also reads h0)
//!  seg0 ─► h2 ─┤  (h2 also reads h1)
//!   ...        ├─► output = [h0 … h_{L-1}] · Wᵀ + b
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{self, affine, init_param, Activation, Mode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpinalConfig {
    pub input_width: usize,
    pub num_sublayers: usize,
    pub sublayer_width: usize,
    pub num_segments: usize,
    pub output_width: usize,
    /// One entry per sub-layer.
    pub activations: Vec<Activation>,
    pub output_bias: bool,
    /// Dropout on sub-layer outputs during training; 0 disables it.
    pub dropout: f64,
}

impl SpinalConfig {
    /// Relu sub-layers, output bias on, no dropout.
    pub fn new(
        input_width: usize,
        num_sublayers: usize,
        sublayer_width: usize,
        num_segments: usize,
        output_width: usize,
    ) -> Self {
        SpinalConfig {
            input_width,
            num_sublayers,
            sublayer_width,
            num_segments,
            output_width,
            activations: vec![Activation::Relu; num_sublayers],
            output_bias: true,
            dropout: 0.0,
        }
    }

    pub fn with_activation(mut self, act: Activation) -> Self {
        self.activations = vec![act; self.num_sublayers];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_width", self.input_width),
            ("num_sublayers", self.num_sublayers),
            ("sublayer_width", self.sublayer_width),
            ("num_segments", self.num_segments),
            ("output_width", self.output_width),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("spinal {name} must be positive")));
        }
        if self.num_segments > self.num_sublayers {
            return Err(Error::Config(format!(
                "spinal layer has {} segments but only {} sub-layers",
                self.num_segments, self.num_sublayers
            )));
        }
        if self.num_segments > self.input_width {
            return Err(Error::Config(format!(
                "cannot split {} inputs into {} segments",
                self.input_width, self.num_segments
            )));
        }
        if self.activations.len() != self.num_sublayers {
            return Err(Error::Config(format!(
                "{} activations given for {} sub-layers",
                self.activations.len(),
                self.num_sublayers
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// `(start, len)` of each input segment. The first `input_width mod k`
    /// segments are one feature wider.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        let k = self.num_segments;
        let (base, extra) = (self.input_width / k, self.input_width % k);
        let mut start = 0;
        (0..k)
            .map(|s| {
                let len = base + usize::from(s < extra);
                let seg = (start, len);
                start += len;
                seg
            })
            .collect()
    }

    pub fn segment_of(&self, sublayer: usize) -> usize {
        sublayer % self.num_segments
    }

    fn carry_width(&self, sublayer: usize) -> usize {
        if sublayer == 0 {
            0
        } else {
            self.sublayer_width
        }
    }

    /// Input width of sub-layer `i`: its segment plus the carried activations.
    pub fn sublayer_fan_in(&self, sublayer: usize) -> usize {
        self.segments()[self.segment_of(sublayer)].1 + self.carry_width(sublayer)
    }

    pub fn hidden_units(&self) -> usize {
        self.num_sublayers * self.sublayer_width
    }

    pub fn param_count(&self) -> usize {
        let m = self.sublayer_width;
        let sub: usize = (0..self.num_sublayers)
            .map(|i| m * self.sublayer_fan_in(i) + m)
            .sum();
        let out = self.output_width * self.hidden_units()
            + if self.output_bias { self.output_width } else { 0 };
        sub + out
    }

    /// Weight·input products per sample; bias additions are not counted.
    pub fn mult_count(&self) -> usize {
        let m = self.sublayer_width;
        let sub: usize = (0..self.num_sublayers)
            .map(|i| m * self.sublayer_fan_in(i))
            .sum();
        sub + self.output_width * self.hidden_units()
    }

    pub fn nonlinear_units(&self) -> usize {
        self.activations
            .iter()
            .filter(|a| a.is_nonlinear())
            .count()
            * self.sublayer_width
    }
}

#[derive(Debug, Clone)]
pub struct SpinalLayer {
    config: SpinalConfig,
    /// Sub-layer `i` has shape `[m × fan_in(i)]`; segment columns come first,
    /// carry columns last.
    pub sub_weights: Vec<Tensor>,
    pub sub_biases: Vec<Tensor>,
    pub out_weight: Tensor,
    pub out_bias: Option<Tensor>,
    pub mode: Mode,
}

impl SpinalLayer {
    pub fn new(config: SpinalConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let m = config.sublayer_width;
        let mut sub_weights = Vec::with_capacity(config.num_sublayers);
        let mut sub_biases = Vec::with_capacity(config.num_sublayers);
        for i in 0..config.num_sublayers {
            let fan_in = config.sublayer_fan_in(i);
            sub_weights.push(init_param(&[m, fan_in], fan_in, rng));
            sub_biases.push(init_param(&[m], fan_in, rng));
        }
        let hidden = config.hidden_units();
        let out_weight = init_param(&[config.output_width, hidden], hidden, rng);
        let out_bias = config
            .output_bias
            .then(|| init_param(&[config.output_width], hidden, rng));
        Ok(SpinalLayer {
            config,
            sub_weights,
            sub_biases,
            out_weight,
            out_bias,
            mode: Mode::Train,
        })
    }

    /// A layer with every parameter set to zero.
    pub fn zeros(config: SpinalConfig) -> Result<Self> {
        config.validate()?;
        let m = config.sublayer_width;
        let zero = |shape: &[usize]| Tensor::zeros(shape).with_requires_grad(true);
        Ok(SpinalLayer {
            sub_weights: (0..config.num_sublayers)
                .map(|i| zero(&[m, config.sublayer_fan_in(i)]))
                .collect(),
            sub_biases: (0..config.num_sublayers).map(|_| zero(&[m])).collect(),
            out_weight: zero(&[config.output_width, config.hidden_units()]),
            out_bias: config.output_bias.then(|| zero(&[config.output_width])),
            config,
            mode: Mode::Train,
        })
    }

    pub fn config(&self) -> &SpinalConfig {
        &self.config
    }

    pub fn forward<'t, R: Rng + ?Sized>(&self, x: Var<'t>, rng: &mut R) -> Result<Var<'t>> {
        let cfg = &self.config;
        let s = x.shape();
        if s.len() != 2 || s[1] != cfg.input_width {
            return Err(Error::shape("spinal", &s, &[cfg.input_width]));
        }
        let tape = x.tape();
        let segments = cfg.segments();
        let mut hidden: Vec<Var<'t>> = Vec::with_capacity(cfg.num_sublayers);
        for i in 0..cfg.num_sublayers {
            let (start, len) = segments[cfg.segment_of(i)];
            let seg = x.slice_last_dim(start, len)?;
            let input = match hidden.last() {
                Some(prev) => tape.concat_last_dim(&[seg, *prev])?,
                None => seg,
            };
            let h = affine(input, &self.sub_weights[i], Some(&self.sub_biases[i]))?
                .activation(cfg.activations[i]);
            hidden.push(layers::dropout(h, cfg.dropout, self.mode, rng)?);
        }
        let all = tape.concat_last_dim(&hidden)?;
        affine(all, &self.out_weight, self.out_bias.as_ref())
    }

    /// Zeroes the columns of every sub-layer that read the previous
    /// sub-layer's output.
    pub fn zero_carry_weights(&mut self) {
        let m = self.config.sublayer_width;
        for w in self.sub_weights.iter_mut().skip(1) {
            let fan_in = w.shape()[1];
            let seg = fan_in - m;
            for row in w.data_mut().chunks_exact_mut(fan_in) {
                row[seg..].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Zeroes the output-row columns that read sub-layer `i`.
    pub fn zero_output_block(&mut self, sublayer: usize) {
        let m = self.config.sublayer_width;
        let hidden = self.config.hidden_units();
        for row in self.out_weight.data_mut().chunks_exact_mut(hidden) {
            row[sublayer * m..(sublayer + 1) * m]
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = Vec::new();
        for (w, b) in self.sub_weights.iter().zip(&self.sub_biases) {
            p.push(w);
            p.push(b);
        }
        p.push(&self.out_weight);
        p.extend(self.out_bias.as_ref());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = Vec::new();
        for (w, b) in self.sub_weights.iter_mut().zip(self.sub_biases.iter_mut()) {
            p.push(w);
            p.push(b);
        }
        p.push(&mut self.out_weight);
        p.extend(self.out_bias.as_mut());
        p
    }
}

/// Frobenius norm of `∂loss/∂Wᵢ` for every sub-layer weight, with
/// `loss = mse(layer(x), target)`.
pub fn direct_gradient_probe(layer: &SpinalLayer, x: &Tensor, target: &Tensor) -> Result<Vec<f64>> {
    let mut probe = layer.clone();
    probe.mode = Mode::Eval;
    let tape = Tape::new();
    let pred = probe.forward(tape.leaf(x), &mut rand::rngs::mock::StepRng::new(0, 0))?;
    let diff = pred.sub(&tape.leaf(target))?;
    let loss = diff.mul(&diff)?.mean();
    let grads = tape.backward(loss)?;
    Ok(probe
        .sub_weights
        .iter()
        .map(|w| {
            grads
                .get(w)
                .map_or(0.0, |g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
        })
        .collect())
}

/// A network with one hidden layer: `V · act(W·x + b) + c`.
#[derive(Debug, Clone)]
pub struct ShallowNet {
    /// `[H × d]`
    pub w: Tensor,
    /// `[H]`
    pub b: Tensor,
    pub act: Activation,
    /// `[o × H]`
    pub v: Tensor,
    /// `[o]`
    pub c: Tensor,
}

impl ShallowNet {
    pub fn random(inputs: usize, hidden: usize, outputs: usize, act: Activation, rng: &mut impl Rng) -> Self {
        ShallowNet {
            w: Tensor::uniform(&[hidden, inputs], 1.0, rng),
            b: Tensor::uniform(&[hidden], 1.0, rng),
            act,
            v: Tensor::uniform(&[outputs, hidden], 1.0, rng),
            c: Tensor::uniform(&[outputs], 1.0, rng),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.v.shape()[0]
    }

    fn check(&self) -> Result<()> {
        let (h, d, o) = (self.hidden(), self.inputs(), self.outputs());
        let ok = self.w.shape() == [h, d]
            && self.b.shape() == [h]
            && self.v.shape() == [o, h]
            && self.c.shape() == [o];
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "inconsistent shallow net: W {:?}, b {:?}, V {:?}, c {:?}",
                self.w.shape(),
                self.b.shape(),
                self.v.shape(),
                self.c.shape()
            )))
        }
    }

    /// Plain-loop forward pass of one sample.
    pub fn forward_one(&self, x: &[f64]) -> Vec<f64> {
        let (h, d, o) = (self.hidden(), self.inputs(), self.outputs());
        let hidden: Vec<f64> = (0..h)
            .map(|j| {
                let mut s = self.b.data()[j];
                for i in 0..d {
                    s += self.w.data()[j * d + i] * x[i];
                }
                self.act.apply(s)
            })
            .collect();
        (0..o)
            .map(|r| {
                let mut s = self.c.data()[r];
                for j in 0..h {
                    s += self.v.data()[r * h + j] * hidden[j];
                }
                s
            })
            .collect()
    }
}

/// Builds a spinal layer whose forward pass equals `net`'s.
///
/// Hidden neurons are handled in blocks of `block_width`. Each block uses two
/// sub-layers: an identity sub-layer computing the block's partial sums over
/// the first input half, then an activation sub-layer adding the second
/// half's sums, the carried partial sums and the bias. Carries between blocks
/// and output weights of the identity sub-layers are zero.
pub fn build_equivalent_spinal(net: &ShallowNet, block_width: usize) -> Result<SpinalLayer> {
    net.check()?;
    let (h, d, o) = (net.hidden(), net.inputs(), net.outputs());
    if block_width == 0 || h % block_width != 0 {
        return Err(Error::Config(format!(
            "hidden width {h} is not divisible by block width {block_width}"
        )));
    }
    let m = block_width;
    let blocks = h / m;
    let mut config = SpinalConfig::new(d, 2 * blocks, m, 2, o);
    config.activations = (0..2 * blocks)
        .map(|i| if i % 2 == 0 { Activation::Identity } else { net.act })
        .collect();
    let mut layer = SpinalLayer::zeros(config)?;
    let segs = layer.config.segments();
    let (d1, d2) = (segs[0].1, segs[1].1);
    let w = net.w.data();

    for blk in 0..blocks {
        let (partial, full) = (2 * blk, 2 * blk + 1);

        // identity sub-layer: first-half sums, carry columns (if any) stay zero
        let fan = layer.config.sublayer_fan_in(partial);
        let wp = layer.sub_weights[partial].data_mut();
        for r in 0..m {
            let j = blk * m + r;
            wp[r * fan..r * fan + d1].copy_from_slice(&w[j * d..j * d + d1]);
        }

        // activation sub-layer: second-half sums plus identity carry
        let fan = layer.config.sublayer_fan_in(full);
        let wf = layer.sub_weights[full].data_mut();
        for r in 0..m {
            let j = blk * m + r;
            wf[r * fan..r * fan + d2].copy_from_slice(&w[j * d + d1..(j + 1) * d]);
            wf[r * fan + d2 + r] = 1.0;
        }
        layer.sub_biases[full]
            .data_mut()
            .copy_from_slice(&net.b.data()[blk * m..(blk + 1) * m]);

        let hidden = layer.config.hidden_units();
        let ow = layer.out_weight.data_mut();
        for out in 0..o {
            for r in 0..m {
                ow[out * hidden + full * m + r] = net.v.data()[out * h + blk * m + r];
            }
        }
    }
    layer
        .out_bias
        .as_mut()
        .expect("output bias enabled")
        .data_mut()
        .copy_from_slice(net.c.data());
    Ok(layer)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn eval(layer: &SpinalLayer, x: &Tensor) -> Tensor {
        let tape = Tape::new();
        let mut l = layer.clone();
        l.mode = Mode::Eval;
        l.forward(tape.leaf(x), &mut rng(0)).unwrap().value()
    }

    #[test]
    fn segments_partition_with_remainder_first() {
        let cfg = SpinalConfig::new(10, 3, 4, 3, 1);
        assert_eq!(cfg.segments(), vec![(0, 4), (4, 3), (7, 3)]);
        let cfg = SpinalConfig::new(320, 6, 8, 2, 10);
        assert_eq!(cfg.segments(), vec![(0, 160), (160, 160)]);
        assert_eq!(
            (0..6).map(|i| cfg.segment_of(i)).collect::<Vec<_>>(),
            vec![0, 1, 0, 1, 0, 1]
        );
    }

    #[test]
    fn config_validation() {
        assert!(SpinalConfig::new(8, 1, 4, 2, 1).validate().is_err());
        assert!(SpinalConfig::new(1, 4, 4, 2, 1).validate().is_err());
        assert!(SpinalConfig::new(8, 0, 4, 1, 1).validate().is_err());
        let mut c = SpinalConfig::new(8, 2, 4, 2, 1);
        c.activations.pop();
        assert!(c.validate().is_err());
        assert!(SpinalConfig::new(8, 6, 50, 2, 1).validate().is_ok());
    }

    #[test]
    fn census_matches_tensor_sizes() {
        let cfg = SpinalConfig::new(8, 6, 50, 2, 1);
        let layer = SpinalLayer::new(cfg.clone(), &mut rng(1)).unwrap();
        let n: usize = layer.params().iter().map(|t| t.numel()).sum();
        assert_eq!(n, cfg.param_count());
        assert_eq!(n, 14_301);
        assert_eq!(cfg.mult_count(), 14_000);
    }

    #[test]
    fn zero_weights_give_output_bias() {
        let cfg = SpinalConfig::new(6, 3, 2, 2, 2);
        let mut layer = SpinalLayer::zeros(cfg).unwrap();
        layer
            .out_bias
            .as_mut()
            .unwrap()
            .data_mut()
            .copy_from_slice(&[3.0, -1.5]);
        let x = Tensor::uniform(&[4, 6], 2.0, &mut rng(3));
        let y = eval(&layer, &x);
        for row in y.data().chunks(2) {
            assert_eq!(row, &[3.0, -1.5]);
        }
    }

    #[test]
    fn single_sublayer_is_linear_stack() {
        // L=1, k=1, identity: output = Wo·(W0·x + b0) + bo
        let cfg = SpinalConfig::new(5, 1, 3, 1, 2).with_activation(Activation::Identity);
        let layer = SpinalLayer::new(cfg, &mut rng(4)).unwrap();
        let x = Tensor::uniform(&[3, 5], 1.0, &mut rng(5));
        let hidden = layers::LinearLayer::from_parts(
            layer.sub_weights[0].clone(),
            layer.sub_biases[0].clone(),
            Activation::Identity,
        )
        .unwrap();
        let out = layers::LinearLayer::from_parts(
            layer.out_weight.clone(),
            layer.out_bias.clone().unwrap(),
            Activation::Identity,
        )
        .unwrap();
        let tape = Tape::new();
        let expect = out
            .forward(hidden.forward(tape.leaf(&x)).unwrap())
            .unwrap()
            .value();
        assert_eq!(eval(&layer, &x), expect);
    }

    #[test]
    fn equivalence_rejects_indivisible_width() {
        let net = ShallowNet::random(6, 3, 1, Activation::Tanh, &mut rng(6));
        assert!(matches!(build_equivalent_spinal(&net, 2), Err(Error::Config(_))));
    }

    #[test]
    fn equivalence_zero_net_is_constant() {
        let mut net = ShallowNet::random(10, 2, 1, Activation::Tanh, &mut rng(7));
        net.w = Tensor::zeros(&[2, 10]);
        net.v = Tensor::zeros(&[1, 2]);
        net.c = Tensor::new(&[1], vec![5.0]).unwrap();
        let layer = build_equivalent_spinal(&net, 2).unwrap();
        let x = Tensor::uniform(&[10, 10], 3.0, &mut rng(8));
        assert!(eval(&layer, &x).data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn probe_zero_paths() {
        let cfg = SpinalConfig::new(8, 4, 3, 2, 2);
        let mut layer = SpinalLayer::new(cfg, &mut rng(9)).unwrap();
        let x = Tensor::uniform(&[16, 8], 1.0, &mut rng(10));
        let t = Tensor::uniform(&[16, 2], 1.0, &mut rng(11));
        layer.zero_carry_weights();
        assert!(direct_gradient_probe(&layer, &x, &t).unwrap()[0] > 1e-12);
        layer.zero_output_block(0);
        assert_eq!(direct_gradient_probe(&layer, &x, &t).unwrap()[0], 0.0);
    }
}
