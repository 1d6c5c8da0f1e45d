use denseshift::nn::gradcheck::{check_gradients, jitter_params, random_architecture, random_batch};
use denseshift::nn::{build_network, softmax_cross_entropy, Layer, Linear, Mode, Network, Weights};
use denseshift::reparam::LatentInit;
use denseshift::Tensor;

#[test]
fn random_architectures_match_finite_differences() {
    for seed in 0..10 {
        let spec = random_architecture(seed);
        let mut net = build_network(&spec, LatentInit::default(), seed).unwrap();
        jitter_params(&mut net, 0.1, 200 + seed);
        let (x, labels) = random_batch(&spec, 4, 100 + seed);
        let report = check_gradients(&mut net, &x, &labels, 1e-4).unwrap();
        assert!(report.max_relative_error <= 1e-4, "seed {seed}: {report:?} for {spec:?}");
    }
}

#[test]
fn zero_loss_gradient_gives_zero_parameter_gradients() {
    let spec = random_architecture(3);
    let mut net = build_network(&spec, LatentInit::default(), 3).unwrap();
    let (x, _) = random_batch(&spec, 2, 7);
    let (_, cache) = net.forward(&x, Mode::Train).unwrap();
    let grads = net.backward(&cache, &Tensor::zeros(&[2, spec.classes])).unwrap();
    assert!(grads.params.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn single_linear_squared_loss_closed_form() {
    // L = ½‖xWᵀ − t‖²  ⇒  dL/dW = (pred − t)ᵀ x
    let w = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5]).unwrap();
    let layer = Layer::Linear(Linear {
        in_features: 3,
        out_features: 2,
        weights: Weights::Full(w),
        bias: None,
    });
    let net = Network::from_layers(vec![3], 2, vec![layer]).unwrap();
    let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, -1.0, 0.5, -0.5, 3.0]).unwrap();
    let t = [1.0, -1.0, 0.0, 2.0];
    let (pred, cache) = net.evaluate(&x, Mode::Train).unwrap();
    let resid: Vec<f64> = pred.data().iter().zip(t).map(|(p, t)| p - t).collect();
    let grads = net.backward(&cache, &Tensor::new(vec![2, 2], resid.clone()).unwrap()).unwrap();
    for o in 0..2 {
        for i in 0..3 {
            let expected: f64 = (0..2).map(|n| resid[n * 2 + o] * x.data()[n * 3 + i]).sum();
            assert!((grads.params[0].data()[o * 3 + i] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn cross_entropy_gradient_feeds_backward() {
    let spec = random_architecture(5);
    let mut net = build_network(&spec, LatentInit::default(), 5).unwrap();
    let (x, labels) = random_batch(&spec, 3, 1);
    let (logits, cache) = net.forward(&x, Mode::Train).unwrap();
    let (loss, g) = softmax_cross_entropy(&logits, &labels).unwrap();
    assert!(loss.is_finite());
    let grads = net.backward(&cache, &g).unwrap();
    assert_eq!(grads.params.len(), net.params().len());
    for (g, (p, _)) in grads.params.iter().zip(net.params()) {
        assert_eq!(g.shape(), p.shape());
    }
}
