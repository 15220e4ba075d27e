use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spinalnet::costing::{cost_report, count_activations, count_mults, count_params, reduction};
use spinalnet::{Model, ModelSpec, SpinalConfig};

const MLP: &str = "input 8
    linear in=8 out=200 act=relu
    linear in=200 out=100 act=relu
    linear in=100 out=1 act=identity";

const MLP_SPINAL: &str = "input 8
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

fn cnn(head: &str) -> ModelSpec {
    format!("{CNN_BODY}\n{head}\nlog_softmax").parse().unwrap()
}

fn cnn_baseline() -> ModelSpec {
    cnn("linear in=320 out=50 act=relu\ndropout rate=0.5\nlinear in=50 out=10 act=identity")
}

fn cnn_spinal(width: usize) -> ModelSpec {
    cnn(&format!("spinal in=320 sublayers=6 width={width} segments=2 out=10"))
}

#[test]
fn regression_counts() {
    let base: ModelSpec = MLP.parse().unwrap();
    let spinal: ModelSpec = MLP_SPINAL.parse().unwrap();
    assert_eq!(count_params(&base).unwrap(), 22_001);
    assert_eq!(count_params(&spinal).unwrap(), 14_301);
    let (bm, sm) = (count_mults(&base).unwrap(), count_mults(&spinal).unwrap());
    assert_eq!((bm.total, bm.fc), (21_700, 21_700));
    assert_eq!((sm.total, sm.fc), (14_000, 14_000));
    assert!((reduction(bm.total, sm.total) - 0.354_838_7).abs() < 1e-6);
    assert_eq!(count_activations(&spinal).unwrap(), 300);
    assert_eq!(count_activations(&base).unwrap(), 300);
}

#[test]
fn cnn_counts() {
    assert_eq!(count_params(&cnn_baseline()).unwrap(), 21_840);
    assert_eq!(count_params(&cnn_spinal(8)).unwrap(), 13_818);
    assert_eq!(count_params(&cnn_spinal(10)).unwrap(), 16_050);

    let (b, s) = (count_mults(&cnn_baseline()).unwrap(), count_mults(&cnn_spinal(8)).unwrap());
    assert_eq!(b.fc, 16_500);
    assert_eq!(s.fc, 8_480);
    assert!((reduction(b.fc, s.fc) - 0.486_060_6).abs() < 1e-6);
    // the shared conv body contributes the same to both totals
    assert_eq!(b.total - b.fc, s.total - s.fc);
    assert_eq!(b.total - b.fc, 250 * 24 * 24 + 5000 * 8 * 8);

    assert_eq!(count_activations(&cnn_baseline()).unwrap(), 50);
    assert_eq!(count_activations(&cnn_spinal(8)).unwrap(), 48);
    assert!((reduction(50, 48) - 0.04).abs() < 1e-12);
}

#[test]
fn per_layer_breakdown() {
    let r = cost_report(&cnn_baseline()).unwrap();
    let params: Vec<u64> = r.per_layer.iter().map(|l| l.params).collect();
    assert_eq!(params, vec![260, 0, 0, 5020, 0, 0, 0, 0, 16_050, 0, 510, 0]);
    assert_eq!(r.per_layer[8].kind, "linear");
    assert_eq!(r.per_layer[3].mults, 5000 * 64);
}

#[test]
fn spinal_heads_are_cheaper() {
    let base = count_params(&cnn_baseline()).unwrap();
    assert!(count_params(&cnn_spinal(8)).unwrap() < base);
    assert!(count_params(&cnn_spinal(10)).unwrap() < base);
    let mlp = count_params(&MLP.parse().unwrap()).unwrap();
    assert!(count_params(&MLP_SPINAL.parse().unwrap()).unwrap() < mlp);
}

#[test]
fn census_matches_built_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for spec in [MLP.parse().unwrap(), MLP_SPINAL.parse().unwrap(), cnn_baseline(), cnn_spinal(8), cnn_spinal(10)] {
        let counted = count_params(&spec).unwrap();
        let mut model = Model::new(spec, &mut rng).unwrap();
        let leaves: usize = model.params_mut().iter().map(|p| p.numel()).sum();
        assert_eq!(leaves as u64, counted);
        assert_eq!(model.num_params() as u64, counted);
    }
}

#[test]
fn spinal_census_matches_costing() {
    for cfg in [SpinalConfig::new(8, 6, 50, 2, 1), SpinalConfig::new(320, 6, 8, 2, 10), SpinalConfig::new(320, 6, 10, 2, 10)] {
        let spec = ModelSpec {
            input_shape: vec![cfg.input_width],
            layers: vec![spinalnet::LayerSpec::Spinal(cfg.clone())],
        };
        let r = cost_report(&spec).unwrap();
        assert_eq!(r.total_params, cfg.param_count() as u64);
        assert_eq!(r.total_mults, cfg.mult_count() as u64);
    }
}

#[test]
fn unknown_layer_is_a_spec_error() {
    assert!("input 4\nbatchnorm".parse::<ModelSpec>().is_err());
}

proptest! {
    #[test]
    fn counts_ignore_seed(seed in any::<u64>()) {
        let spec = cnn_spinal(8);
        let model = Model::new(spec.clone(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(model.num_params() as u64, count_params(&spec).unwrap());
    }

    #[test]
    fn totals_are_per_layer_sums(widths in proptest::collection::vec(1usize..40, 1..5), m in 1usize..6) {
        let mut text = format!("input {}", widths[0]);
        for w in widths.windows(2) {
            text.push_str(&format!("\nlinear in={} out={} act=tanh", w[0], w[1]));
        }
        let last = *widths.last().unwrap();
        let k = last.min(2);
        text.push_str(&format!("\nspinal in={last} sublayers=3 width={m} segments={k} out=2"));
        let r = cost_report(&text.parse().unwrap()).unwrap();
        prop_assert_eq!(r.total_params, r.per_layer.iter().map(|l| l.params).sum::<u64>());
        prop_assert_eq!(r.total_mults, r.per_layer.iter().map(|l| l.mults).sum::<u64>());
        prop_assert_eq!(r.fc_mults, r.total_mults);
    }
}
