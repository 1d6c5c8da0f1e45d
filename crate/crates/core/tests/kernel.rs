use denseshift::kernel::{
    conv_forward_packed, dot_denseshift, dot_shift, pack_weights, ConvGeometry, FixedActivations, PackedNetwork, PackedWeightBlob,
};
use denseshift::nn::{build_network, Conv2d, Layer, Network, Weights};
use denseshift::reparam::{scale_gates, LatentInit, ShiftCode};
use denseshift::Tensor;
use denseshift::nn::presets::{lenet, PresetOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_codes(rng: &mut ChaCha8Rng, n: usize, top: u8) -> Vec<ShiftCode> {
    (0..n).map(|_| ShiftCode::new(rng.random(), rng.random_range(0..=top))).collect()
}

fn real_dot(x: &[i8], w: &[f64]) -> f64 {
    x.iter().zip(w).map(|(&a, &b)| f64::from(a) * b).sum()
}

#[test]
fn dot_denseshift_matches_real_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..10_000 {
        let bits = rng.random_range(2..=4u8);
        let len = rng.random_range(0..300);
        let codes = random_codes(&mut rng, len, scale_gates(bits) as u8);
        let x: Vec<i8> = (0..len).map(|_| rng.random()).collect();
        let blob = PackedWeightBlob::pack(&codes, bits, 0).unwrap();
        let decoded: Vec<f64> = codes.iter().map(|c| c.value(0)).collect();
        let got = dot_denseshift(&FixedActivations::new(x.clone(), 0), &blob).unwrap();
        assert_eq!(got as f64, real_dot(&x, &decoded), "case {case}");
    }
}

#[test]
fn dot_shift_matches_real_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..10_000 {
        let bits = rng.random_range(2..=4u8);
        let len = rng.random_range(0..300);
        let top = scale_gates(bits) as u8 - 1;
        let zero_p = rng.random_range(0.0..1.0);
        let codes: Vec<Option<ShiftCode>> = random_codes(&mut rng, len, top)
            .into_iter()
            .map(|c| (!rng.random_bool(zero_p)).then_some(c))
            .collect();
        let x: Vec<i8> = (0..len).map(|_| rng.random()).collect();
        let blob = PackedWeightBlob::pack_with_zeros(&codes, bits, 0).unwrap();
        let decoded: Vec<f64> = codes.iter().map(|c| c.map_or(0.0, |c| c.value(0))).collect();
        let got = dot_shift(&FixedActivations::new(x.clone(), 0), &blob).unwrap();
        assert_eq!(got as f64, real_dot(&x, &decoded), "case {case}");
    }
}

#[test]
fn kernels_agree_without_zero_codes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let bits = rng.random_range(2..=4u8);
        let len = rng.random_range(1..2000);
        let codes = random_codes(&mut rng, len, scale_gates(bits) as u8 - 1);
        let x = FixedActivations::new((0..len).map(|_| rng.random()).collect(), 0);
        let dense = PackedWeightBlob::pack(&codes, bits, 0).unwrap();
        let wrapped: Vec<Option<ShiftCode>> = codes.iter().copied().map(Some).collect();
        let shift = PackedWeightBlob::pack_with_zeros(&wrapped, bits, 0).unwrap();
        assert_eq!(dot_denseshift(&x, &dense).unwrap(), dot_shift(&x, &shift).unwrap());
    }
}

#[test]
fn extreme_lengths_do_not_overflow() {
    let len = 1 << 17;
    let codes = vec![ShiftCode::new(true, 7); len];
    let blob = PackedWeightBlob::pack(&codes, 4, 0).unwrap();
    let x = FixedActivations::new(vec![-128; len], 0);
    assert_eq!(dot_denseshift(&x, &blob).unwrap(), 128 * 128 * len as i64);
}

#[test]
fn conv_forward_packed_matches_engine_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..10_000 {
        let bits = rng.random_range(2..=4u8);
        let bias = rng.random_range(-3..=1);
        let g = ConvGeometry {
            in_channels: rng.random_range(1..=3),
            out_channels: rng.random_range(2..=3),
            kernel: rng.random_range(1..=3),
            stride: rng.random_range(1..=2),
            padding: rng.random_range(0..=1),
        };
        let hw = rng.random_range(g.kernel..=6);
        let n = rng.random_range(1..=2);
        let shape = [n, g.in_channels, hw, hw];
        let len = g.out_channels * g.in_channels * g.kernel * g.kernel;
        let codes = random_codes(&mut rng, len, scale_gates(bits) as u8);
        let blob = PackedWeightBlob::pack(&codes, bits, bias).unwrap();
        let x: Vec<i8> = (0..shape.iter().product()).map(|_| rng.random()).collect();

        let got = conv_forward_packed(&FixedActivations::new(x.clone(), 0), &shape, &blob, &g).unwrap();

        let w = Tensor::new(
            vec![g.out_channels, g.in_channels, g.kernel, g.kernel],
            codes.iter().map(|c| c.value(bias)).collect(),
        )
        .unwrap();
        let conv = Layer::Conv2d(Conv2d {
            in_channels: g.in_channels,
            out_channels: g.out_channels,
            kernel: g.kernel,
            stride: g.stride,
            padding: g.padding,
            weights: Weights::Full(w),
            bias: None,
        });
        let xf = Tensor::new(shape.to_vec(), x.iter().map(|&v| f64::from(v)).collect()).unwrap();
        let out = (hw + 2 * g.padding - g.kernel) / g.stride + 1;
        let features = g.out_channels * out * out;
        let net = Network::from_layers(shape[1..].to_vec(), features, vec![conv, Layer::Flatten]).unwrap();
        let want = net.infer(&xf).unwrap();
        assert_eq!(got.shape, [n, g.out_channels, out, out], "case {case}");
        let unit = 2f64.powi(bias);
        for (a, b) in got.data.iter().zip(want.data()) {
            assert_eq!(*a as f64 * unit, *b, "case {case}");
        }
    }
}

#[test]
fn packed_network_agrees_with_float_evaluation() {
    let spec = lenet(PresetOptions::default(), 10);
    let net = build_network(&spec, LatentInit::Kaiming, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn(&[200, 1, 28, 28], |_| rng.random_range(-1.0..2.5));
    let float = denseshift::nn::argmax_rows(&net.infer(&x).unwrap());
    let packed = denseshift::nn::argmax_rows(&PackedNetwork::new(&net).unwrap().infer(&x).unwrap());
    let agree = float.iter().zip(&packed).filter(|(a, b)| a == b).count();
    assert!(agree as f64 / 200.0 >= 0.9, "{agree}/200");
}

#[test]
fn packed_weights_round_trip_through_bytes() {
    let spec = lenet(PresetOptions::default(), 10);
    let net = build_network(&spec, LatentInit::Kaiming, 11).unwrap();
    for layer in net.layers() {
        if let Some(w) = layer.weights() {
            if let Some(blob) = pack_weights(w).unwrap() {
                let bytes = blob.to_bytes();
                let (back, used) = PackedWeightBlob::from_bytes(&bytes).unwrap();
                assert_eq!(used, bytes.len());
                assert_eq!(back.decode_values(), w.effective().data());
            }
        }
    }
}
