use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spinalnet::data::{gen_regression, Dataset, RegressionSpec, Split, TargetFn, Targets};
use spinalnet::seed::{self, Stream};
use spinalnet::train::{evaluate, fit, FitConfig, MetricsRecord, Optimizer, OptimizerKind};
use spinalnet::{Model, ModelSpec, Tensor};

fn strip_time(records: &[MetricsRecord]) -> Vec<MetricsRecord> {
    records.iter().cloned().map(|r| MetricsRecord { wall_time_s: 0.0, ..r }).collect()
}

fn run(spec: &str, train: &Dataset, test: &Dataset, kind: OptimizerKind, cfg: &FitConfig) -> (Model, Vec<MetricsRecord>) {
    let spec: ModelSpec = spec.parse().unwrap();
    let mut model = Model::new(spec, &mut seed::rng(cfg.seed, Stream::Init)).unwrap();
    let records = fit(&mut model, train, test, &mut Optimizer::new(kind), cfg).unwrap();
    (model, records)
}

fn tiny_images(n: usize, seed: u64) -> Dataset {
    // class = which quadrant holds the bright blob
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; n * 64];
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let c = rand::Rng::gen_range(&mut rng, 0..4usize);
        let (r0, c0) = ((c / 2) * 4, (c % 2) * 4);
        for r in 0..4 {
            for col in 0..4 {
                let noise: f64 = rand::Rng::gen_range(&mut rng, 0.0..0.3);
                data[i * 64 + (r0 + r) * 8 + c0 + col] = 0.7 + noise;
            }
        }
        ids.push(c);
    }
    Dataset::new(
        Tensor::new(&[n, 1, 8, 8], data).unwrap(),
        Targets::Classes { ids, num_classes: 4 },
        Split::Train,
    )
    .unwrap()
}

const TINY_CNN: &str = "input 1x8x8
    conv2d in=1 out=3 k=3
    maxpool2d
    relu
    dropout rate=0.3
    flatten
    spinal in=27 sublayers=4 width=4 segments=2 out=4
    log_softmax";

#[test]
fn same_seed_same_metrics() {
    let train = tiny_images(96, 1);
    let test = tiny_images(32, 2);
    let cfg = FitConfig { epochs: 3, batch_size: 16, shuffle: true, seed: 9 };
    let kind = OptimizerKind::sgd(0.05, 0.5);
    let (a_model, a) = run(TINY_CNN, &train, &test, kind, &cfg);
    let (b_model, b) = run(TINY_CNN, &train, &test, kind, &cfg);
    assert_eq!(strip_time(&a), strip_time(&b));
    assert_eq!(a_model.params().into_iter().cloned().collect::<Vec<_>>(), b_model.params().into_iter().cloned().collect::<Vec<_>>());

    let (_, c) = run(TINY_CNN, &train, &test, kind, &FitConfig { seed: 10, ..cfg });
    assert_ne!(strip_time(&a), strip_time(&c));
}

#[test]
fn classifier_learns_quadrants() {
    let train = tiny_images(256, 3);
    let test = tiny_images(128, 4);
    let cfg = FitConfig { epochs: 6, batch_size: 16, shuffle: true, seed: 1 };
    let (_, records) = run(TINY_CNN, &train, &test, OptimizerKind::adam(0.01), &cfg);
    let last = records.last().unwrap();
    assert!(last.best_so_far > 0.9, "{records:?}");
    assert!(records.windows(2).all(|w| w[1].best_so_far >= w[0].best_so_far));
    assert!(records.iter().all(|r| (0.0..=1.0).contains(&r.eval_metric)));
}

#[test]
fn spinal_regressor_fits_a_sum() {
    let mut spec = RegressionSpec::new(TargetFn::Sum);
    spec.noise_sigma = 0.0;
    spec.train_samples = 256;
    spec.test_samples = 256;
    let (train, test) = gen_regression(&spec, 5).unwrap();
    let cfg = FitConfig { epochs: 150, batch_size: 256, shuffle: false, seed: 5 };
    let (mut model, records) = run(
        "input 8\nspinal in=8 sublayers=4 width=10 segments=2 out=1",
        &train,
        &test,
        OptimizerKind::adam(0.01),
        &cfg,
    );
    let best = records.last().unwrap().best_so_far;
    assert!(best < 0.01, "best test MSE {best}");
    assert!(records.windows(2).all(|w| w[1].best_so_far <= w[0].best_so_far));
    assert!((evaluate(&mut model, &test, 64).unwrap() - records.last().unwrap().eval_metric).abs() < 1e-12);
}

#[test]
fn evaluation_is_independent_of_batch_size() {
    let train = tiny_images(50, 6);
    let spec: ModelSpec = TINY_CNN.parse().unwrap();
    let mut model = Model::new(spec, &mut seed::rng(0, Stream::Init)).unwrap();
    let a = evaluate(&mut model, &train, 7).unwrap();
    let b = evaluate(&mut model, &train, 1000).unwrap();
    assert_eq!(a, b);
}
