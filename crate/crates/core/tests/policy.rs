use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;
use winlab::feature_layout::Observation;
use winlab::nn::{Mode, Tensor};
use winlab::policy::{describe, CheckpointMeta, PolicyNetwork, Preset, TABLE_EXACT_INPUT};
use winlab::{DatasetKind, LayoutMode};

fn random_obs(t: usize, f: usize, rng: &mut ChaCha8Rng) -> Observation {
    let rows = (0..t)
        .map(|_| Arc::from((0..f).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()))
        .collect();
    Observation::from_rows(rows).unwrap()
}

/// Independent closed form: Gaussian density of `u` plus the tanh change of variables.
fn oracle_log_prob(mean: &[f64], log_std: &[f64], raw: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..mean.len() {
        let sigma = log_std[i].exp();
        let density = (-(raw[i] - mean[i]).powi(2) / (2.0 * sigma * sigma)).exp()
            / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        let a = raw[i].tanh();
        total += density.ln() - (1.0 - a * a).ln();
    }
    total
}

#[test]
fn table_exact_layer_rows() {
    let rows = describe(Preset::TableExact, TABLE_EXACT_INPUT[1], TABLE_EXACT_INPUT[2]).unwrap();
    let expect: [(&str, &[usize], usize); 23] = [
        ("Conv2d-1", &[32, 12, 85], 2_080),
        ("BatchNorm2d-2", &[32, 12, 85], 64),
        ("ReLU-3", &[32, 12, 85], 0),
        ("MaxPool2d-4", &[32, 6, 42], 0),
        ("Conv2d-5", &[64, 12, 30], 32_832),
        ("BatchNorm2d-6", &[64, 12, 30], 128),
        ("ReLU-7", &[64, 12, 30], 0),
        ("MaxPool2d-8", &[64, 6, 15], 0),
        ("Conv2d-9", &[128, 4, 13], 73_856),
        ("BatchNorm2d-10", &[128, 4, 13], 256),
        ("ReLU-11", &[128, 4, 13], 0),
        ("Conv2d-12", &[256, 2, 11], 295_168),
        ("BatchNorm2d-13", &[256, 2, 11], 512),
        ("ReLU-14", &[256, 2, 11], 0),
        ("Flatten-15", &[5632], 0),
        ("Linear-16", &[1024], 5_768_192),
        ("ReLU-17", &[1024], 0),
        ("Dropout-18", &[1024], 0),
        ("Linear-19", &[512], 524_800),
        ("ReLU-20", &[512], 0),
        ("Dropout-21", &[512], 0),
        ("Linear-22", &[128], 65_664),
        ("ReLU-23", &[128], 0),
    ];
    assert_eq!(rows.len(), expect.len());
    for (row, (name, shape, params)) in rows.iter().zip(expect) {
        assert_eq!(row.name, name);
        assert_eq!(row.output_shape, shape, "{name}");
        assert_eq!(row.params, params, "{name}");
    }
    assert_eq!(rows.iter().map(|r| r.params).sum::<usize>(), 6_763_552);
}

#[test]
fn table_exact_rejects_other_inputs() {
    assert!(describe(Preset::TableExact, 10, 20).is_err());
}

#[test]
fn adaptive_builds_for_small_and_grid_inputs() {
    for (t, f) in [(10, 20), (10, 11), (60, 511), (60, 261), (30, 35), (1, 1)] {
        let rows = describe(Preset::Adaptive, t, f).unwrap();
        assert!(rows.iter().all(|r| r.output_shape.iter().all(|&d| d >= 1)), "{t}x{f}");
        assert_eq!(rows.last().unwrap().output_shape, vec![128]);
    }
}

#[test]
fn act_is_bounded_and_deterministic_mode_repeats() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut policy = PolicyNetwork::new([1, 10, 20], 3, Preset::Adaptive, 1).unwrap();
    let obs = random_obs(10, 20, &mut rng);
    let a = policy.act(&obs, &mut rng, true).unwrap();
    let b = policy.act(&obs, &mut rng, true).unwrap();
    assert_eq!(a, b);
    for _ in 0..20 {
        let out = policy.act(&obs, &mut rng, false).unwrap();
        assert!(out.action.iter().all(|x| (-1.0..=1.0).contains(x)));
        assert!(out.value.is_finite());
    }
}

#[test]
fn log_prob_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut policy = PolicyNetwork::new([1, 10, 20], 2, Preset::Adaptive, 2).unwrap();
    let obs = random_obs(10, 20, &mut rng);
    let (mean, _) = policy.predict(&obs).unwrap();
    for _ in 0..10 {
        let out = policy.act(&obs, &mut rng, false).unwrap();
        let want = oracle_log_prob(&mean, &policy.log_std(), &out.raw_action);
        assert!((out.log_prob - want).abs() <= 1e-9 * want.abs().max(1.0), "{} vs {want}", out.log_prob);
    }
}

#[test]
fn evaluate_agrees_with_act() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut policy = PolicyNetwork::new([1, 10, 20], 2, Preset::Adaptive, 3).unwrap();
    let observations: Vec<Observation> = (0..4).map(|_| random_obs(10, 20, &mut rng)).collect();
    let outs: Vec<_> = observations
        .iter()
        .map(|o| policy.act(o, &mut rng, false).unwrap())
        .collect();
    let refs: Vec<&Observation> = observations.iter().collect();
    let input = policy.batch_tensor(&refs).unwrap();
    let raw: Vec<f64> = outs.iter().flat_map(|o| o.raw_action.clone()).collect();
    let eval = policy.evaluate(&input, &raw, Mode::Eval).unwrap();
    for (i, o) in outs.iter().enumerate() {
        assert!((eval.log_probs[i] - o.log_prob).abs() < 1e-12);
        assert!((eval.values[i] - o.value).abs() < 1e-12);
    }
    let unit_entropy = 2.0 * 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    assert!(eval.entropies.iter().all(|h| (h - unit_entropy).abs() < 1e-12));
}

#[test]
fn dimension_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut policy = PolicyNetwork::new([1, 10, 20], 2, Preset::Adaptive, 3).unwrap();
    let wrong = random_obs(10, 21, &mut rng);
    assert!(matches!(policy.act(&wrong, &mut rng, true), Err(winlab::Error::Dimension(_))));
    let input = Tensor::zeros(vec![2, 1, 10, 20]);
    assert!(policy.evaluate(&input, &[0.0; 3], Mode::Eval).is_err());
}

/// Finite differences of `sum(c1·logp + c2·value + c3·entropy)` through the
/// heads and extractor, in the inference-time network.
#[test]
fn policy_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut policy = PolicyNetwork::new([1, 10, 20], 2, Preset::Adaptive, 9).unwrap();
    for p in policy.params_mut() {
        // move log_std off zero and make the actor head non-trivial
        if p.len() == 2 {
            p.value.data_mut().copy_from_slice(&[0.3, -0.4]);
        }
    }
    let observations: Vec<Observation> = (0..3).map(|_| random_obs(10, 20, &mut rng)).collect();
    let refs: Vec<&Observation> = observations.iter().collect();
    let input = policy.batch_tensor(&refs).unwrap();
    let raw: Vec<f64> = (0..6).map(|_| rng.random_range(-1.5..1.5)).collect();
    let c: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |p: &mut PolicyNetwork| {
        let e = p.evaluate(&input, &raw, Mode::Eval).unwrap();
        (0..3)
            .map(|i| c[i] * e.log_probs[i] + c[3 + i] * e.values[i] + c[6 + i] * e.entropies[i])
            .sum::<f64>()
    };
    let eval = policy.evaluate(&input, &raw, Mode::Frozen).unwrap();
    policy.zero_grad();
    policy.backward(&eval, &c[0..3], &c[3..6], &c[6..9]).unwrap();
    let grads: Vec<Vec<f64>> = policy.params().iter().map(|p| p.grad.clone()).collect();
    // a small step keeps the thousands of downstream ReLUs on one side of their kink
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for (pi, g) in grads.iter().enumerate() {
        for _ in 0..3 {
            let j = rng.random_range(0..g.len());
            let orig = policy.params()[pi].value.data()[j];
            policy.params_mut()[pi].value.data_mut()[j] = orig + eps;
            let lp = loss(&mut policy);
            policy.params_mut()[pi].value.data_mut()[j] = orig - eps;
            let lm = loss(&mut policy);
            policy.params_mut()[pi].value.data_mut()[j] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let rel = (g[j] - numeric).abs() / g[j].abs().max(numeric.abs()).max(1e-7);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn gradient_reaches_every_extractor_tensor() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut policy = PolicyNetwork::new([1, 10, 20], 2, Preset::Adaptive, 10).unwrap();
    let observations: Vec<Observation> = (0..16).map(|_| random_obs(10, 20, &mut rng)).collect();
    let refs: Vec<&Observation> = observations.iter().collect();
    let input = policy.batch_tensor(&refs).unwrap();
    let raw: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let eval = policy.evaluate(&input, &raw, Mode::Train).unwrap();
    policy.zero_grad();
    let ones = vec![1.0; 16];
    policy.backward(&eval, &ones, &ones, &ones).unwrap();
    for (i, p) in policy.params().iter().enumerate() {
        assert!(p.grad.iter().any(|&g| g != 0.0), "parameter tensor {i} got no gradient");
    }
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut policy = PolicyNetwork::new([1, 10, 21], 2, Preset::Adaptive, 12).unwrap();
    let obs = random_obs(10, 21, &mut rng);
    let before = policy.predict(&obs).unwrap();
    let meta = CheckpointMeta {
        layout: Some(LayoutMode::Company),
        kind: Some(DatasetKind::Sma),
    };
    let mut bytes = Vec::new();
    policy.save(&mut bytes, &meta).unwrap();
    let (mut back, back_meta) = PolicyNetwork::load(bytes.as_slice()).unwrap();
    assert_eq!(back_meta, meta);
    assert_eq!(back.state_digest(), policy.state_digest());
    assert_eq!(back.predict(&obs).unwrap(), before);
    let mut again = Vec::new();
    back.save(&mut again, &meta).unwrap();
    assert_eq!(again, bytes);
    bytes[0] = b'X';
    assert!(PolicyNetwork::load(bytes.as_slice()).is_err());
}
