//! Reference architectures and the published figures they are compared with.

use spinalnet::data::TargetFn;
use spinalnet::ModelSpec;

/// Two relu hidden layers of 200 and 100 units.
pub const REGRESSION_BASELINE: &str = "input 8
linear in=8 out=200 act=relu
linear in=200 out=100 act=relu
linear in=100 out=1 act=identity";

/// Six sub-layers of 50 units, each fed half of the eight inputs.
pub const REGRESSION_SPINAL: &str = "input 8
spinal in=8 sublayers=6 width=50 segments=2 out=1";

const CNN_BODY: &str = "input 1x28x28
conv2d in=1 out=10 k=5
maxpool2d
relu
conv2d in=10 out=20 k=5
dropout rate=0.5
maxpool2d
relu
flatten";

pub fn regression_baseline() -> ModelSpec {
    REGRESSION_BASELINE.parse().expect("valid preset")
}

pub fn regression_spinal() -> ModelSpec {
    REGRESSION_SPINAL.parse().expect("valid preset")
}

/// The two-conv MNIST network with a 50-unit dense head.
pub fn cnn_baseline() -> ModelSpec {
    format!("{CNN_BODY}\nlinear in=320 out=50 act=relu\ndropout rate=0.5\nlinear in=50 out=10 act=identity\nlog_softmax")
        .parse()
        .expect("valid preset")
}

/// The same conv body with a six-sub-layer spinal head of `width` units each.
pub fn cnn_spinal(width: usize) -> ModelSpec {
    format!("{CNN_BODY}\nspinal in=320 sublayers=6 width={width} segments=2 out=10\nlog_softmax")
        .parse()
        .expect("valid preset")
}

/// Published structural counts. Each must be reproduced exactly.
pub struct CountReference {
    pub label: &'static str,
    pub expected: u64,
}

pub const REGRESSION_COUNTS: &[CountReference] = &[
    // "22.00k" parameters
    CountReference { label: "regression baseline params", expected: 22_001 },
    // "14.30k" parameters
    CountReference { label: "regression spinal params", expected: 14_301 },
    CountReference { label: "regression baseline mults", expected: 21_700 },
    CountReference { label: "regression spinal mults", expected: 14_000 },
    // 300 hidden neurons in both networks
    CountReference { label: "regression spinal hidden units", expected: 300 },
];

pub const MNIST_COUNTS: &[CountReference] = &[
    // "21.84k"
    CountReference { label: "cnn baseline params", expected: 21_840 },
    // "13.82k"
    CountReference { label: "cnn spinal-8 params", expected: 13_818 },
    // "16.05k"
    CountReference { label: "cnn spinal-10 params", expected: 16_050 },
    CountReference { label: "baseline head mults", expected: 16_500 },
    CountReference { label: "spinal-8 head mults", expected: 8_480 },
    CountReference { label: "baseline head activations", expected: 50 },
    CountReference { label: "spinal-8 head activations", expected: 48 },
];

/// Published best-so-far test MSE, in units of 1e-3, at 100 and 200 epochs.
pub struct MseReference {
    pub target: TargetFn,
    pub baseline: [f64; 2],
    pub spinal: [f64; 2],
}

pub const REGRESSION_MSE: &[MseReference] = &[
    MseReference { target: TargetFn::Sum, baseline: [1.178, 0.887], spinal: [1.007, 0.855] },
    MseReference { target: TargetFn::SinSum, baseline: [1.918, 1.086], spinal: [1.912, 1.219] },
    MseReference { target: TargetFn::Prod, baseline: [3.875, 3.875], spinal: [3.966, 2.217] },
    MseReference { target: TargetFn::SinProd, baseline: [3.403, 1.554], spinal: [0.910, 0.910] },
];

/// Published MNIST test accuracy after 8 epochs, percent.
pub const MNIST_ACCURACY: &[(&str, f64)] = &[("cnn", 98.17), ("cnn-spinal-8", 98.44), ("cnn-spinal-10", 98.48)];

/// Acceptance floors for 8-epoch MNIST accuracy (fractions).
pub const MNIST_FLOOR_BASELINE: f64 = 0.965;
pub const MNIST_FLOOR_SPINAL: f64 = 0.970;
/// Floor for both models when trained on a 10,000-sample subset.
pub const MNIST_FLOOR_SUBSET: f64 = 0.93;
