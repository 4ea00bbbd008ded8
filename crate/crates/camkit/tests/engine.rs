//! Engine-level integration tests: hand-computed forward fixtures,
//! finite-difference gradient checks, training behavior, shape algebra.

use camkit::dataset::LabeledDataset;
use camkit::nn::{
    dataset_accuracy, mnist_network, train, LayerKind, LayerParams, LayerSpec, Network, Optimizer,
    TrainConfig,
};
use camkit::rng::Rng;
use camkit::{Error, Tensor};

fn conv(name: &str, out_channels: usize, kernel: usize, padding: usize) -> LayerSpec {
    LayerSpec::new(
        name,
        LayerKind::Conv2d {
            out_channels,
            kernel: [kernel, kernel],
            stride: [1, 1],
            padding: [padding, padding],
        },
    )
}

/// conv -> relu -> pool -> conv -> relu -> gap -> dense -> softmax on 1x8x8:
/// one of every layer kind.
fn mixed_net(seed: u64) -> Network {
    Network::new(
        [1, 8, 8],
        (0..3).map(|c| c.to_string()).collect(),
        vec![
            conv("conv1", 3, 3, 1),
            LayerSpec::new("relu1", LayerKind::Relu),
            LayerSpec::new(
                "pool1",
                LayerKind::MaxPool {
                    window: [2, 2],
                    stride: [2, 2],
                },
            ),
            conv("conv2", 4, 3, 0),
            LayerSpec::new("relu2", LayerKind::Relu),
            LayerSpec::new("gap", LayerKind::GlobalAvgPool),
            LayerSpec::new("head", LayerKind::Dense { units: 3 }),
            LayerSpec::new("probs", LayerKind::Softmax),
        ],
        seed,
    )
    .unwrap()
}

fn random_image(shape: [usize; 3], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.next_f64()).collect()).unwrap()
}

#[test]
fn forward_zero_image_gives_uniform_probabilities() {
    // Biases initialize to zero, so a zero image through conv/relu/pool/gap
    // yields zero logits and a uniform softmax.
    let net = mixed_net(5);
    let trace = net.forward(&Tensor::zeros(vec![1, 8, 8])).unwrap();
    for layer in ["conv1", "relu1", "pool1", "conv2"] {
        let act = net.activation(&trace, layer).unwrap();
        assert!(act.data().iter().all(|&v| v == 0.0), "{layer}");
    }
    for &p in trace.probabilities().data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn forward_caches_expected_conv_shape() {
    let net = Network::new(
        [1, 8, 8],
        vec!["a".into(), "b".into(), "c".into(), "d".into()],
        vec![
            conv("conv", 4, 3, 0),
            LayerSpec::new("gap", LayerKind::GlobalAvgPool),
            LayerSpec::new("head", LayerKind::Dense { units: 4 }),
        ],
        1,
    )
    .unwrap();
    let trace = net.forward(&random_image([1, 8, 8], 2)).unwrap();
    assert_eq!(net.activation(&trace, "conv").unwrap().shape(), [4, 6, 6]);
}

/// Hand-computed arithmetic for a one-conv, one-dense net on a fixed 2x2
/// input. The conv output is
/// 0.1*1 - 0.2*1 + 0.3*0.5 + 0.4*2 + 0.25 = 1.1, and the logits are
/// [2*1.1 + 0.5, -1*1.1 + 0.5] = [2.7, -0.6].
#[test]
fn forward_matches_hand_computed_logits() {
    let mut net = Network::with_zero_params(
        [1, 2, 2],
        vec!["a".into(), "b".into()],
        vec![
            conv("conv", 1, 2, 0),
            LayerSpec::new("head", LayerKind::Dense { units: 2 }),
            LayerSpec::new("probs", LayerKind::Softmax),
        ],
    )
    .unwrap();
    net.set_conv_params(
        "conv",
        Tensor::new(vec![1, 1, 2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap(),
        Tensor::new(vec![1], vec![0.25]).unwrap(),
    )
    .unwrap();
    net.set_dense_params(
        "head",
        Tensor::new(vec![2, 1], vec![2.0, -1.0]).unwrap(),
        Tensor::new(vec![2], vec![0.5, 0.5]).unwrap(),
    )
    .unwrap();
    let image = Tensor::new(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let trace = net.forward(&image).unwrap();
    assert!((trace.logits().data()[0] - 2.7).abs() <= 1e-12);
    assert!((trace.logits().data()[1] - (-0.6)).abs() <= 1e-12);
    assert!((trace.probabilities().sum() - 1.0).abs() <= 1e-6);
}

#[test]
fn forward_rejects_bad_inputs() {
    let net = mixed_net(1);
    assert!(matches!(
        net.forward(&Tensor::zeros(vec![1, 7, 8])),
        Err(Error::Shape(_))
    ));
    let trace = net.forward(&Tensor::zeros(vec![1, 8, 8])).unwrap();
    assert!(matches!(
        net.grad_wrt_activation(&trace, 0, "nope"),
        Err(Error::Lookup(_))
    ));
    assert!(matches!(
        net.grad_wrt_activation(&trace, 0, "head"),
        Err(Error::Architecture(_))
    ));
    assert!(matches!(
        net.grad_wrt_activation(&trace, 99, "conv1"),
        Err(Error::Config(_))
    ));
}

#[test]
fn gap_head_gradient_is_weight_over_z() {
    let net = mixed_net(11);
    let trace = net.forward(&random_image([1, 8, 8], 3)).unwrap();
    // relu2 feeds gap with 2x2 spatial extent: the gradient of logit c at
    // every spatial position of channel k is w[c][k] / Z with Z = 4.
    let LayerParams::Dense { weights, .. } = &net.params()[net.layer_index("head").unwrap()]
    else {
        panic!("head is dense");
    };
    for class in 0..3 {
        let g = net.grad_wrt_activation(&trace, class, "relu2").unwrap();
        assert_eq!(g.shape(), [4, 2, 2]);
        for k in 0..4 {
            let want = weights.at2(class, k) / 4.0;
            for y in 0..2 {
                for x in 0..2 {
                    assert!(
                        (g.at3(k, y, x) - want).abs() <= 1e-10,
                        "class {class} ch {k}: {} vs {want}",
                        g.at3(k, y, x)
                    );
                }
            }
        }
    }
}

#[test]
fn zero_head_row_gives_zero_gradient() {
    let mut net = mixed_net(13);
    // Row 0 of the head all zeros, other rows arbitrary.
    let w = Tensor::new(
        vec![3, 4],
        vec![0.0, 0.0, 0.0, 0.0, 0.3, -0.2, 0.1, 0.4, -0.1, 0.2, -0.3, 0.5],
    )
    .unwrap();
    net.set_dense_params("head", w, Tensor::zeros(vec![3])).unwrap();
    let trace = net.forward(&random_image([1, 8, 8], 4)).unwrap();
    let g = net.grad_wrt_activation(&trace, 0, "conv1").unwrap();
    assert!(g.data().iter().all(|&v| v == 0.0));
}

fn with_flat(t: &Tensor, i: usize, v: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[i] = v;
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

/// Central finite differences on the network tail, replayed from a perturbed
/// cached activation. Independent of the backward kernels.
fn fd_gradient(net: &Network, image: &Tensor, class: usize, layer: &str, step: f64) -> Tensor {
    let idx = net.layer_index(layer).unwrap();
    let trace = net.forward(image).unwrap();
    let base = net.activation(&trace, layer).unwrap().clone();
    let mut grad = Tensor::zeros(base.shape().to_vec());
    let mut out = grad.data().to_vec();
    for i in 0..base.len() {
        let plus = with_flat(&base, i, base.data()[i] + step);
        let minus = with_flat(&base, i, base.data()[i] - step);
        let yp = net.forward_tail(idx, &plus).unwrap().data()[class];
        let ym = net.forward_tail(idx, &minus).unwrap().data()[class];
        out[i] = (yp - ym) / (2.0 * step);
    }
    grad = Tensor::new(base.shape().to_vec(), out).unwrap();
    grad
}

/// Finite differences are only meaningful where the network tail is smooth.
/// Positions whose estimate is not stable across two step sizes sit on a
/// relu/max-pool kink and are excluded; the vast majority must remain.
#[test]
fn gradients_match_finite_differences() {
    let step = 1e-4;
    for seed in 1..=5u64 {
        let net = mixed_net(seed);
        let image = random_image([1, 8, 8], seed * 100 + 7);
        let class = (seed % 3) as usize;
        let trace = net.forward(&image).unwrap();
        // Gradient targets of every inspectable kind. A relu directly before
        // a max-pool is excluded: its rectified zeros tie inside pool
        // windows, where the tail is genuinely non-differentiable.
        for layer in ["conv1", "pool1", "conv2", "relu2", "gap"] {
            let analytic = net.grad_wrt_activation(&trace, class, layer).unwrap();
            let fd1 = fd_gradient(&net, &image, class, layer, step);
            let fd2 = fd_gradient(&net, &image, class, layer, step / 2.0);
            let mut max_rel: f64 = 0.0;
            let mut checked = 0usize;
            for ((&a, &n), &n2) in analytic.data().iter().zip(fd1.data()).zip(fd2.data()) {
                if a.abs() < 1e-8 && n.abs() < 1e-8 {
                    checked += 1;
                    continue;
                }
                let stability = (n - n2).abs() / n.abs().max(n2.abs()).max(1e-8);
                if stability > 1e-4 {
                    continue; // kink straddled by the step
                }
                checked += 1;
                max_rel = max_rel.max((a - n).abs() / a.abs().max(n.abs()));
            }
            assert!(
                checked as f64 >= 0.95 * analytic.len() as f64,
                "seed {seed} layer {layer}: too many kink positions ({checked}/{})",
                analytic.len()
            );
            assert!(
                max_rel <= 1e-3,
                "seed {seed} layer {layer}: max relative error {max_rel}"
            );
        }
    }
}

fn toy_dataset() -> LabeledDataset {
    // Linearly separable two-class points encoded as 1x1x2 images.
    let mk = |a: f64, b: f64| Tensor::new(vec![1, 1, 2], vec![a, b]).unwrap();
    LabeledDataset {
        images: vec![mk(0.1, 0.9), mk(0.2, 0.8), mk(0.9, 0.1), mk(0.8, 0.2)],
        labels: vec![0, 0, 1, 1],
        class_labels: vec!["low".into(), "high".into()],
        ids: (0..4).map(|i| i.to_string()).collect(),
    }
}

fn toy_net(seed: u64) -> Network {
    Network::new(
        [1, 1, 2],
        vec!["low".into(), "high".into()],
        vec![
            LayerSpec::new("head", LayerKind::Dense { units: 2 }),
            LayerSpec::new("probs", LayerKind::Softmax),
        ],
        seed,
    )
    .unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut net = mixed_net(21);
    let before = net.clone();
    let data = LabeledDataset {
        images: vec![random_image([1, 8, 8], 1), random_image([1, 8, 8], 2)],
        labels: vec![0, 1],
        class_labels: (0..3).map(|c| c.to_string()).collect(),
        ids: vec!["0".into(), "1".into()],
    };
    train(
        &mut net,
        &data,
        &TrainConfig {
            epochs: 3,
            learning_rate: 0.0,
            batch_size: 2,
            seed: 9,
            optimizer: Optimizer::Sgd,
        },
    )
    .unwrap();
    assert_eq!(net, before);
}

#[test]
fn toy_problem_reaches_full_accuracy() {
    let mut net = toy_net(17);
    let data = toy_dataset();
    let history = train(
        &mut net,
        &data,
        &TrainConfig {
            epochs: 200,
            learning_rate: 0.5,
            batch_size: 4,
            seed: 3,
            optimizer: Optimizer::Sgd,
        },
    )
    .unwrap();
    assert!(
        history.iter().any(|e| e.accuracy == 1.0),
        "never reached 100% within 200 epochs: final {:?}",
        history.last()
    );
    assert_eq!(dataset_accuracy(&net, &data).unwrap(), 1.0);
}

#[test]
fn training_is_bitwise_deterministic() {
    let data = LabeledDataset {
        images: (0..8).map(|i| random_image([1, 8, 8], i)).collect(),
        labels: vec![0, 1, 2, 0, 1, 2, 0, 1],
        class_labels: (0..3).map(|c| c.to_string()).collect(),
        ids: (0..8).map(|i| i.to_string()).collect(),
    };
    let cfg = TrainConfig {
        epochs: 2,
        learning_rate: 0.05,
        batch_size: 3,
        seed: 77,
        optimizer: Optimizer::SgdMomentum { momentum: 0.9 },
    };
    let mut a = mixed_net(42);
    let mut b = mixed_net(42);
    let ha = train(&mut a, &data, &cfg).unwrap();
    let hb = train(&mut b, &data, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha, hb);

    // Identical forward outputs too.
    let img = random_image([1, 8, 8], 1234);
    assert_eq!(
        a.forward(&img).unwrap().logits(),
        b.forward(&img).unwrap().logits()
    );
}

#[test]
fn divergence_names_the_epoch() {
    let mut net = toy_net(5);
    // A step size huge enough to push parameters past the f32 range.
    let err = train(
        &mut net,
        &toy_dataset(),
        &TrainConfig {
            epochs: 5,
            learning_rate: 1e40,
            batch_size: 4,
            seed: 1,
            optimizer: Optimizer::Sgd,
        },
    )
    .unwrap_err();
    match err {
        Error::Numeric(msg) => assert!(msg.contains("epoch"), "{msg}"),
        other => panic!("expected NumericError, got {other:?}"),
    }
}

#[test]
fn train_rejects_empty_dataset_and_bad_labels() {
    let mut net = toy_net(1);
    let empty = LabeledDataset {
        images: vec![],
        labels: vec![],
        class_labels: vec![],
        ids: vec![],
    };
    assert!(matches!(
        train(&mut net, &empty, &TrainConfig::default()),
        Err(Error::Data(_))
    ));
    let mut bad = toy_dataset();
    bad.labels[0] = 9;
    assert!(matches!(
        train(&mut net, &bad, &TrainConfig::default()),
        Err(Error::Data(_))
    ));
}

/// Composing the per-layer shape rules reproduces the shapes the forward
/// pass actually produces.
#[test]
fn shape_algebra_matches_forward() {
    for seed in [1u64, 2, 3] {
        let net = mixed_net(seed);
        let image = random_image([1, 8, 8], seed);
        let trace = net.forward(&image).unwrap();
        let mut shape: Vec<usize> = vec![1, 8, 8];
        for spec in net.layers() {
            shape = spec.kind.output_shape(&shape).unwrap();
            assert_eq!(
                net.activation(&trace, &spec.name).unwrap().shape(),
                shape.as_slice(),
                "layer {}",
                spec.name
            );
        }
    }
    let big = mnist_network(1);
    assert_eq!(big.layer_output_shape("conv3").unwrap(), [64, 7, 7]);
    assert_eq!(big.last_conv_layer().unwrap(), "conv3");
}
