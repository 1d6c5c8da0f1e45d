use denseshift::convert::{convert_network, randomize_shift_weights, verify_equivalence, ProbeInputs};
use denseshift::nn::{build_network, Layer, LayerSpec, Network, NetworkSpec, WeightProvider, Weights};
use denseshift::quantize::{QuantizerConfig, QuantizerKind};
use denseshift::reparam::LatentInit;

fn sign_shift(bits: u8, bias: i32) -> WeightProvider {
    WeightProvider::Quantizer(QuantizerConfig::new(QuantizerKind::SignShift, bits, bias))
}

fn two_layer_cnn(bits: u8, bias: i32) -> NetworkSpec {
    NetworkSpec {
        input: vec![2, 8, 8],
        classes: 5,
        layers: vec![
            LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 4,
                kernel: 3,
                stride: 1,
                padding: 1,
                bias: false,
                weights: sign_shift(bits, bias),
            },
            LayerSpec::BatchNorm { channels: 4 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2, stride: 2 },
            LayerSpec::Conv2d {
                in_channels: 4,
                out_channels: 3,
                kernel: 3,
                stride: 2,
                padding: 1,
                bias: true,
                weights: sign_shift(bits, bias),
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Linear {
                in_features: 12,
                out_features: 5,
                bias: true,
                weights: sign_shift(bits, bias),
            },
        ],
    }
}

fn shift_net(spec: &NetworkSpec, zeros: f64, seed: u64) -> Network {
    let mut net = build_network(spec, LatentInit::Kaiming, seed).unwrap();
    randomize_shift_weights(&mut net, zeros, seed + 1).unwrap();
    net
}

fn assert_structure(before: &Network, after: &Network) {
    let (wb, wa): (Vec<_>, Vec<_>) = (
        before.layers().iter().filter_map(Layer::weights).collect(),
        after.layers().iter().filter_map(Layer::weights).collect(),
    );
    assert_eq!(wb.len(), wa.len());
    for (b, a) in wb.iter().zip(&wa) {
        let (eb, ea) = (b.effective(), a.effective());
        if b.provider().is_quantized() {
            assert!(matches!(a, Weights::DenseShift(_)));
            assert!(ea.data().iter().all(|&v| v != 0.0));
            // fan-in at most doubles
            assert!(ea.shape()[1] <= 2 * eb.shape()[1]);
            let max_exp = |t: &denseshift::Tensor| t.data().iter().filter(|v| **v != 0.0).map(|v| v.abs().log2() as i32).max();
            if let (Some(x), Some(y)) = (max_exp(&eb), max_exp(&ea)) {
                assert!(y - x <= 1, "exponent grew from {x} to {y}");
            }
        }
    }
}

#[test]
fn two_layer_cnn_with_thirty_percent_zeros() {
    for seed in 0..5 {
        let net = shift_net(&two_layer_cnn(3, -2), 0.3, seed);
        let (converted, report) = convert_network(&net).unwrap();
        assert_structure(&net, &converted);
        assert!(report.layers.iter().all(|l| l.max_exponent_after - l.max_exponent_before.unwrap() <= 1));
        let eq = verify_equivalence(&net, &converted, 100, 1e-5, ProbeInputs::Real, seed).unwrap();
        assert!(eq.pass, "seed {seed}: {eq:?}");
    }
}

#[test]
fn single_layer_exact_on_integer_inputs() {
    let spec = NetworkSpec {
        input: vec![20],
        classes: 6,
        layers: vec![LayerSpec::Linear {
            in_features: 20,
            out_features: 6,
            bias: false,
            weights: sign_shift(3, 0),
        }],
    };
    for seed in 0..10 {
        let net = shift_net(&spec, 0.4, seed);
        let (converted, report) = convert_network(&net).unwrap();
        assert!(report.prepended_duplicate);
        let eq = verify_equivalence(&net, &converted, 100, 0.0, ProbeInputs::Integer, seed).unwrap();
        assert_eq!(eq.max_abs_diff, 0.0);
    }
}

#[test]
fn zero_free_network_is_structurally_unchanged() {
    let net = shift_net(&two_layer_cnn(3, 0), 0.0, 7);
    let (converted, report) = convert_network(&net).unwrap();
    assert!(!report.prepended_duplicate);
    assert_eq!(converted.spec().layers.len(), net.spec().layers.len());
    for (a, b) in net.layers().iter().zip(converted.layers()) {
        if let (Some(x), Some(y)) = (a.weights(), b.weights()) {
            assert_eq!(x.effective(), y.effective());
        }
    }
    assert_eq!(verify_equivalence(&net, &converted, 20, 0.0, ProbeInputs::Real, 1).unwrap().max_abs_diff, 0.0);
}

#[test]
fn all_zero_layer_converts() {
    let net = shift_net(&two_layer_cnn(2, -1), 1.0, 3);
    let (converted, _) = convert_network(&net).unwrap();
    assert_structure(&net, &converted);
    assert!(verify_equivalence(&net, &converted, 10, 1e-9, ProbeInputs::Real, 0).unwrap().pass);
}

#[test]
fn perturbed_weight_fails_equivalence() {
    let net = shift_net(&two_layer_cnn(3, -2), 0.3, 11);
    let (mut converted, _) = convert_network(&net).unwrap();
    let last = converted.layers().len() - 1;
    if let Layer::Linear(l) = &mut converted.layers_mut()[last] {
        let b = l.bias.as_mut().unwrap();
        b.data_mut()[0] += 0.5;
    }
    let eq = verify_equivalence(&net, &converted, 100, 1e-5, ProbeInputs::Real, 0).unwrap();
    assert!(!eq.pass);
    let same = verify_equivalence(&net, &net, 10, 0.0, ProbeInputs::Real, 0).unwrap();
    assert_eq!(same.max_abs_diff, 0.0);
}

#[test]
fn dense_shift_and_rounded_latents_convert() {
    let mut net = shift_net(&two_layer_cnn(3, 0), 0.2, 5);
    if let Some(Weights::Quantized { latent, .. }) = net.layers_mut()[0].weights_mut() {
        latent.data_mut()[0] = 3.0;
    }
    // the sign-shift quantizer rounds 3 to a level, so the network is still a shift network
    assert!(convert_network(&net).is_ok());
    let mut spec = two_layer_cnn(3, 0);
    if let LayerSpec::Linear { weights, .. } = &mut spec.layers[7] {
        *weights = WeightProvider::DenseShift { bits: 3, exponent_bias: 0 };
    }
    let net = build_network(&spec, LatentInit::Kaiming, 1).unwrap();
    let (converted, report) = convert_network(&net).unwrap();
    assert!(report.layers.iter().all(|l| l.in_after >= l.in_before));
    assert!(verify_equivalence(&net, &converted, 50, 1e-5, ProbeInputs::Real, 2).unwrap().pass);
}
