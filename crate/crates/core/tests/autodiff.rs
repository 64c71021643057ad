use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use winlab::error::Error;
use winlab::nn::checkpoint::{Checkpoint, TensorRecord};
use winlab::nn::{LayerSpec, Mode, Network, Tensor};

fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn weighted_sum(out: &Tensor, coeffs: &[f64]) -> f64 {
    out.data().iter().zip(coeffs).map(|(a, b)| a * b).sum()
}

/// Checks analytic gradients of `sum(c * net(x))` against central differences,
/// both for the input and for a sample of parameter entries.
fn gradient_check(specs: Vec<LayerSpec>, input_shape: Vec<usize>, batch: usize, mode: Mode, samples: usize) {
    const EPS: f64 = 1e-4;
    const TOL: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut net = Network::new(specs, input_shape.clone(), 7).unwrap();
    let mut shape = vec![batch];
    shape.extend(&input_shape);
    let x = random_tensor(shape, &mut rng);

    net.reseed_dropout(5);
    let out = net.forward(&x, mode).unwrap();
    let coeffs: Vec<f64> = (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grad_out = Tensor::new(out.shape().to_vec(), coeffs.clone()).unwrap();
    net.zero_grad();
    let dx = net.backward(&grad_out).unwrap();

    let loss = |net: &mut Network, x: &Tensor| {
        net.reseed_dropout(5);
        weighted_sum(&net.forward(x, mode).unwrap(), &coeffs)
    };
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-7);

    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let i = rng.random_range(0..x.len());
        let mut xp = x.clone();
        xp.data_mut()[i] += EPS;
        let mut xm = x.clone();
        xm.data_mut()[i] -= EPS;
        let numeric = (loss(&mut net, &xp) - loss(&mut net, &xm)) / (2.0 * EPS);
        worst = worst.max(rel(dx.data()[i], numeric));
    }

    let analytic: Vec<Vec<f64>> = net.params().iter().map(|p| p.grad.clone()).collect();
    for (pi, grads) in analytic.iter().enumerate() {
        for _ in 0..samples {
            let j = rng.random_range(0..grads.len());
            let orig = net.params()[pi].value.data()[j];
            net.params_mut()[pi].value.data_mut()[j] = orig + EPS;
            let lp = loss(&mut net, &x);
            net.params_mut()[pi].value.data_mut()[j] = orig - EPS;
            let lm = loss(&mut net, &x);
            net.params_mut()[pi].value.data_mut()[j] = orig;
            let numeric = (lp - lm) / (2.0 * EPS);
            worst = worst.max(rel(grads[j], numeric));
        }
    }
    assert!(worst < TOL, "worst relative gradient error {worst}");
}

#[test]
fn gradcheck_conv_stack() {
    gradient_check(
        vec![
            LayerSpec::conv(2, 3, 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::conv(3, 2, 2, 2, 0),
            LayerSpec::Flatten,
            LayerSpec::linear(2 * 3 * 3, 4),
        ],
        vec![2, 6, 6],
        2,
        Mode::Train,
        12,
    );
}

#[test]
fn gradcheck_batchnorm_train_mode() {
    gradient_check(
        vec![
            LayerSpec::conv(1, 3, 2, 1, 0),
            LayerSpec::BatchNorm2d { channels: 3 },
            LayerSpec::Flatten,
            LayerSpec::linear(3 * 4 * 4, 3),
        ],
        vec![1, 5, 5],
        3,
        Mode::Train,
        12,
    );
}

#[test]
fn gradcheck_pool_and_dropout() {
    gradient_check(
        vec![
            LayerSpec::conv(1, 2, 3, 1, 1),
            LayerSpec::pool(2),
            LayerSpec::Flatten,
            LayerSpec::linear(2 * 3 * 4, 5),
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: 0.3 },
            LayerSpec::linear(5, 2),
        ],
        vec![1, 6, 8],
        2,
        Mode::Train,
        12,
    );
}

#[test]
fn gradcheck_strided_padded_rectangular() {
    gradient_check(
        vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 2,
                kernel: [3, 2],
                stride: [2, 1],
                padding: [2, 1],
            },
            LayerSpec::BatchNorm2d { channels: 2 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
        ],
        vec![1, 4, 5],
        2,
        Mode::Frozen,
        10,
    );
}

#[test]
fn identity_one_by_one_conv() {
    let mut net = Network::new(vec![LayerSpec::conv(1, 1, 1, 1, 0)], vec![1, 3, 4], 0).unwrap();
    {
        let mut params = net.params_mut();
        params[0].value.data_mut()[0] = 1.0;
        params[1].value.data_mut()[0] = 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(vec![2, 1, 3, 4], &mut rng);
    let y = net.forward(&x, Mode::Eval).unwrap();
    assert_eq!(y, x);
}

#[test]
fn ones_kernel_on_ones_input_gives_fours() {
    let mut net = Network::new(vec![LayerSpec::conv(1, 1, 2, 1, 0)], vec![1, 3, 3], 0).unwrap();
    {
        let mut params = net.params_mut();
        params[0].value.data_mut().fill(1.0);
        params[1].value.data_mut().fill(0.0);
    }
    let x = Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
    let y = net.forward(&x, Mode::Eval).unwrap();
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.data(), &[4.0; 4]);
}

#[test]
fn eval_mode_is_deterministic() {
    let specs = vec![
        LayerSpec::conv(1, 2, 2, 1, 0),
        LayerSpec::BatchNorm2d { channels: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dropout { rate: 0.5 },
        LayerSpec::linear(2 * 3 * 3, 3),
    ];
    let mut net = Network::new(specs, vec![1, 4, 4], 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(vec![2, 1, 4, 4], &mut rng);
    let a = net.forward(&x, Mode::Eval).unwrap();
    let b = net.forward(&x, Mode::Eval).unwrap();
    assert_eq!(a, b);
}

#[test]
fn dropout_rate_zero_is_identity_in_train_mode() {
    let mut net = Network::new(vec![LayerSpec::Dropout { rate: 0.0 }], vec![7], 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(vec![3, 7], &mut rng);
    assert_eq!(net.forward(&x, Mode::Train).unwrap(), x);
}

#[test]
fn zero_input_zero_bias_gives_zero_output() {
    let specs = vec![
        LayerSpec::conv(1, 2, 2, 1, 0),
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::linear(8, 3),
    ];
    let mut net = Network::new(specs, vec![1, 3, 3], 4).unwrap();
    let y = net.forward(&Tensor::zeros(vec![1, 1, 3, 3]), Mode::Eval).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn linear_weight_gradient_equals_input() {
    let mut net = Network::new(vec![LayerSpec::linear(3, 1)], vec![3], 0).unwrap();
    let x = Tensor::new(vec![1, 3], vec![0.5, -2.0, 3.0]).unwrap();
    net.forward(&x, Mode::Train).unwrap();
    net.zero_grad();
    net.backward(&Tensor::new(vec![1, 1], vec![1.0]).unwrap()).unwrap();
    assert_eq!(net.params()[0].grad, vec![0.5, -2.0, 3.0]);
    assert_eq!(net.params()[1].grad, vec![1.0]);
}

#[test]
fn relu_gradient_masks_negative_inputs() {
    let mut net = Network::new(vec![LayerSpec::Relu], vec![4], 0).unwrap();
    let x = Tensor::new(vec![1, 4], vec![-1.0, 2.0, -0.5, 3.0]).unwrap();
    net.forward(&x, Mode::Train).unwrap();
    let dx = net.backward(&Tensor::new(vec![1, 4], vec![1.0; 4]).unwrap()).unwrap();
    assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 1.0]);
}

#[test]
fn batchnorm_train_output_is_standardised() {
    let mut net = Network::new(vec![LayerSpec::BatchNorm2d { channels: 2 }], vec![2, 3, 3], 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut x = random_tensor(vec![4, 2, 3, 3], &mut rng);
    x.data_mut().iter_mut().for_each(|v| *v = *v * 5.0 + 3.0);
    let y = net.forward(&x, Mode::Train).unwrap();
    for c in 0..2 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|b| {
                let start = (b * 2 + c) * 9;
                y.data()[start..start + 9].to_vec()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-9, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-5, "var {var}");
    }
}

#[test]
fn backward_without_forward_is_state_error() {
    let mut net = Network::new(vec![LayerSpec::linear(2, 2)], vec![2], 0).unwrap();
    let err = net.backward(&Tensor::zeros(vec![1, 2])).unwrap_err();
    assert!(matches!(err, Error::Context { ref source, .. } if matches!(**source, Error::State(_))), "{err:?}");
}

#[test]
fn geometry_error_for_oversized_kernel() {
    let err = Network::new(vec![LayerSpec::conv(1, 1, 5, 1, 0)], vec![1, 3, 3], 0).unwrap_err();
    let mut e = &err;
    while let Error::Context { source, .. } = e {
        e = source;
    }
    assert!(matches!(e, Error::Geometry(_)), "{err:?}");
}

#[test]
fn dimension_error_on_wrong_input() {
    let mut net = Network::new(vec![LayerSpec::linear(3, 1)], vec![3], 0).unwrap();
    assert!(matches!(
        net.forward(&Tensor::zeros(vec![1, 4]), Mode::Eval),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let records = vec![
        TensorRecord { layer: 0, shape: vec![2, 2], values: vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300] },
        TensorRecord { layer: 3, shape: vec![1], values: vec![std::f64::consts::PI] },
    ];
    let ck = Checkpoint { header: serde_json::json!({"preset": "x"}), tensors: records };
    let bytes = ck.to_bytes();
    let back = Checkpoint::read(bytes.as_slice()).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.tensor_digest(), ck.tensor_digest());
    assert!(Checkpoint::read(&b"NOPE...."[..]).is_err());
}
