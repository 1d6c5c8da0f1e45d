//! Central finite-difference check of the analytic backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::layers::Mode;
use super::loss::softmax_cross_entropy;
use super::network::Network;
use super::spec::{LayerSpec, NetworkSpec, WeightProvider};
use crate::error::Result;
use crate::tensor::Tensor;

/// Gradient magnitudes below this are compared absolutely rather than
/// relatively; central differences at `h = 1e-4` carry roughly `1e-12`
/// of rounding noise.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

fn loss(net: &Network, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let (logits, _) = net.evaluate(x, Mode::Train)?;
    Ok(softmax_cross_entropy(&logits, labels)?.0)
}

/// Compares every parameter gradient and the input gradient of the
/// training-mode cross-entropy loss against central differences with step `h`.
pub fn check_gradients(net: &mut Network, x: &Tensor, labels: &[usize], h: f64) -> Result<GradCheckReport> {
    let (logits, cache) = net.evaluate(x, Mode::Train)?;
    let (_, grad) = softmax_cross_entropy(&logits, labels)?;
    let grads = net.backward(&cache, &grad)?;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let n_params = net.params().len();
    for p in 0..n_params {
        let len = net.params()[p].0.len();
        for e in 0..len {
            let orig = net.params()[p].0.data()[e];
            net.params_mut()[p].0.data_mut()[e] = orig + h;
            let plus = loss(net, x, labels)?;
            net.params_mut()[p].0.data_mut()[e] = orig - h;
            let minus = loss(net, x, labels)?;
            net.params_mut()[p].0.data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(grads.params[p].data()[e], numeric));
            checked += 1;
        }
    }
    for e in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[e] += h;
        let mut xm = x.clone();
        xm.data_mut()[e] -= h;
        let numeric = (loss(net, &xp, labels)? - loss(net, &xm, labels)?) / (2.0 * h);
        worst = worst.max(relative_error(grads.input.data()[e], numeric));
        checked += 1;
    }
    Ok(GradCheckReport {
        max_relative_error: worst,
        checked,
    })
}

/// A small full-precision architecture drawn from the seed, covering
/// conv (stride/padding), batch norm, relu, max/avg pooling, duplicate,
/// flatten and linear layers.
pub fn random_architecture(seed: u64) -> NetworkSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cin = rng.random_range(1..=3);
    let size = rng.random_range(5..=8);
    let classes = 3;
    let mut layers = Vec::new();
    let mut c = cin;
    let mut hw = size;
    let convs = rng.random_range(1..=2);
    for _ in 0..convs {
        let padding = rng.random_range(0..=1);
        let kernel = rng.random_range(1..=3).min(hw + 2 * padding);
        let stride = rng.random_range(1..=2);
        let out = rng.random_range(2..=4);
        layers.push(LayerSpec::Conv2d {
            in_channels: c,
            out_channels: out,
            kernel,
            stride,
            padding,
            bias: rng.random_bool(0.5),
            weights: WeightProvider::FullPrecision,
        });
        hw = (hw + 2 * padding - kernel) / stride + 1;
        c = out;
        if rng.random_bool(0.5) {
            layers.push(LayerSpec::BatchNorm { channels: c });
        }
        layers.push(LayerSpec::Relu);
        if hw >= 2 && rng.random_bool(0.6) {
            if rng.random_bool(0.5) {
                layers.push(LayerSpec::MaxPool { size: 2, stride: 2 });
            } else {
                layers.push(LayerSpec::AvgPool { size: 2, stride: 2 });
            }
            hw = (hw - 2) / 2 + 1;
        }
        if rng.random_bool(0.3) {
            layers.push(LayerSpec::Duplicate { channels: vec![0] });
            c += 1;
        }
    }
    layers.push(LayerSpec::Flatten);
    let mut features = c * hw * hw;
    if rng.random_bool(0.5) {
        let hidden = rng.random_range(3..=6);
        layers.push(LayerSpec::Linear {
            in_features: features,
            out_features: hidden,
            bias: true,
            weights: WeightProvider::FullPrecision,
        });
        if rng.random_bool(0.5) {
            layers.push(LayerSpec::BatchNorm { channels: hidden });
        }
        layers.push(LayerSpec::Relu);
        features = hidden;
    }
    layers.push(LayerSpec::Linear {
        in_features: features,
        out_features: classes,
        bias: true,
        weights: WeightProvider::FullPrecision,
    });
    NetworkSpec {
        input: vec![cin, size, size],
        classes,
        layers,
    }
}

/// Adds `N(0, sigma²)` noise to every parameter. Freshly initialized
/// biases are exactly zero, which can park a relu on its kink.
pub fn jitter_params(net: &mut Network, sigma: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (t, _) in net.params_mut() {
        for v in t.data_mut() {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Random standard-normal batch and labels for a spec.
pub fn random_batch(spec: &NetworkSpec, batch: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![batch];
    shape.extend_from_slice(&spec.input);
    let x = Tensor::from_fn(&shape, |_| rng.sample(StandardNormal));
    let labels = (0..batch).map(|_| rng.random_range(0..spec.classes)).collect();
    (x, labels)
}
