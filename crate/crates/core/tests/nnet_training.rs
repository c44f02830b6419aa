mod common;

use common::*;
use lossearch::data::{make_blobs, Samples};
use lossearch::losses::{FocalParams, LogitsBatch, LossSpec};
use lossearch::nnet::{HeadKind, ModelConfig, ModelState, TrainConfig};
use lossearch::piecewise::LossParams;
use lossearch::rng::{stream, Purpose};
use rand::Rng;

fn config(head: HeadKind) -> ModelConfig {
    ModelConfig {
        input_dim: 5,
        hidden_dims: vec![7, 6],
        feature_dim: 4,
        num_classes: 3,
        head,
    }
}

fn random_samples(seed: u64, n: usize, dim: usize, classes: usize) -> Samples {
    let mut r = rng(seed);
    let features = (0..n * dim).map(|_| r.random_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
    Samples::new(features, dim, labels).unwrap()
}

fn analytic_gradients(
    model: &ModelState,
    samples: &Samples,
    spec: &LossSpec,
    s: f64,
) -> Vec<Vec<f64>> {
    let logits = model.forward(samples.features(), s).unwrap();
    let batch = LogitsBatch::new(
        logits,
        samples.labels().to_vec(),
        model.config().num_classes,
    )
    .unwrap();
    let out = spec.compute(&batch, s).unwrap();
    model.gradients(samples.features(), &out.grad, s).unwrap().0
}

fn check_parameter_gradients(head: HeadKind, spec: LossSpec, seed: u64) {
    let s = 4.0;
    let model = ModelState::new(config(head), seed).unwrap();
    let samples = random_samples(seed + 100, 6, 5, 3);
    let grads = analytic_gradients(&model, &samples, &spec, s);

    let mut r = rng(seed + 200);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let t = r.random_range(0..model.params().len());
        let k = r.random_range(0..model.params()[t].data.len());
        let mut up = model.clone();
        up.params_mut()[t].data[k] += FD_STEP;
        let mut down = model.clone();
        down.params_mut()[t].data[k] -= FD_STEP;
        let numeric = (up.batch_loss(&samples, &spec, s).unwrap()
            - down.batch_loss(&samples, &spec, s).unwrap())
            / (2.0 * FD_STEP);
        worst = worst.max(max_relative_error(&[grads[t][k]], &[numeric], 1e-5));
    }
    assert!(worst < 1e-4, "{head:?}/{}: {worst:e}", spec.name());
}

#[test]
fn parameter_gradients_match_finite_differences() {
    for seed in 0..5 {
        check_parameter_gradients(
            HeadKind::Cosine,
            LossSpec::Unified(LossParams::identity(6).unwrap()),
            seed,
        );
        check_parameter_gradients(
            HeadKind::Cosine,
            LossSpec::Focal(FocalParams { alpha: 2.0 }),
            seed,
        );
        check_parameter_gradients(HeadKind::Linear, LossSpec::Softmax, seed);
    }
}

#[test]
fn one_epoch_lowers_training_loss() {
    let cfg = TrainConfig {
        learning_rate: 0.05,
        ..TrainConfig::default()
    };
    let spec = LossSpec::Softmax;
    let mut drops = Vec::new();
    for seed in 0..5 {
        let data = make_blobs(4, 100, 8, 0.3, seed).unwrap();
        let mc = ModelConfig {
            input_dim: 8,
            hidden_dims: vec![16],
            feature_dim: 8,
            num_classes: 4,
            head: HeadKind::Cosine,
        };
        let mut model = ModelState::new(mc, seed).unwrap();
        let before = model.batch_loss(&data.train, &spec, cfg.scale_s).unwrap();
        let mut r = stream(seed, Purpose::CandidateTraining, 0, 0);
        model.train_epoch(&data.train, &spec, &cfg, &mut r).unwrap();
        let after = model.batch_loss(&data.train, &spec, cfg.scale_s).unwrap();
        drops.push(before - after);
    }
    assert!(median(drops) > 0.0);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let data = make_blobs(3, 40, 5, 0.4, 7).unwrap();
    let mut model = ModelState::new(config(HeadKind::Cosine), 3).unwrap();
    let cfg = TrainConfig::default();
    let mut r = stream(3, Purpose::CandidateTraining, 0, 0);
    model
        .train_epoch(&data.train, &LossSpec::Softmax, &cfg, &mut r)
        .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.save(&path).unwrap();
    let loaded = ModelState::load(&path).unwrap();
    assert_eq!(loaded, model);
    assert_eq!(loaded.to_bytes(), model.to_bytes());
    assert_eq!(
        loaded.evaluate(&data.val).unwrap(),
        model.evaluate(&data.val).unwrap()
    );
    let a = model.forward(data.val.features(), 10.0).unwrap();
    let b = loaded.forward(data.val.features(), 10.0).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn untrained_model_on_random_labels_is_at_chance() {
    let c = 5;
    let n = 4000;
    let samples = random_samples(42, n, 5, c);
    let mc = ModelConfig {
        input_dim: 5,
        hidden_dims: vec![8],
        feature_dim: 6,
        num_classes: c,
        head: HeadKind::Cosine,
    };
    let model = ModelState::new(mc, 42).unwrap();
    let acc = model.evaluate(&samples).unwrap();
    let p = 1.0 / c as f64;
    let sd = (p * (1.0 - p) / n as f64).sqrt();
    assert!((acc - p).abs() <= 3.0 * sd, "accuracy {acc}");
}

#[test]
fn hand_built_separable_model_is_perfect() {
    let c = 4;
    let mc = ModelConfig {
        input_dim: c,
        hidden_dims: vec![],
        feature_dim: c,
        num_classes: c,
        head: HeadKind::Cosine,
    };
    let mut model = ModelState::new(mc, 0).unwrap();
    let eye: Vec<f64> = (0..c * c)
        .map(|k| if k / c == k % c { 1.0 } else { 0.0 })
        .collect();
    for t in model.params_mut() {
        t.data = match t.name.as_str() {
            "layer.0.weight" | "head.weight" => eye.clone(),
            _ => vec![0.0; t.data.len()],
        };
    }
    let features: Vec<f64> = (0..40)
        .flat_map(|i| (0..c).map(move |k| if k == i % c { 2.0 } else { 0.1 }))
        .collect();
    let labels = (0..40).map(|i| i % c).collect();
    let samples = Samples::new(features, c, labels).unwrap();
    assert_eq!(model.evaluate(&samples).unwrap(), 1.0);
}

#[test]
fn cosine_logits_are_bounded_by_scale() {
    let samples = random_samples(9, 200, 5, 3);
    for seed in 0..5 {
        let model = ModelState::new(config(HeadKind::Cosine), seed).unwrap();
        for s in [1.0, 10.0, 64.0] {
            let logits = model.forward(samples.features(), s).unwrap();
            assert!(logits.iter().all(|f| f.abs() <= s + 1e-9));
        }
    }
}
