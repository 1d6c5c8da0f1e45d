//! Rewrites a shift network (weights in `{0} ∪ {±2^p}`) into an equivalent
//! zero-free DenseShift network.
//!
//! For a layer with zero weights, every input channel that has a zero in
//! any of its weights is duplicated. Over the original/duplicate pair a zero
//! weight becomes `(+c, −c)` and a nonzero weight `s·2^p` becomes
//! `(s·2^(p+1), −s·2^p)`; both pairs sum to the original, so feeding equal
//! values to both copies reproduces the original output. `c` is the
//! smallest level `2^b` of the layer, so an `n`-bit sign-shift layer with
//! exponents `b..b+T−1` converts into an `n`-bit DenseShift layer with
//! exponents `b..b+T`.
//!
//! The duplicated channels are produced by copying rows of the nearest
//! upstream conv/linear layer (through batch norm, relu and pooling, which
//! act per channel). A flatten in between widens the duplication to whole
//! channels. When no producer exists, a `duplicate` layer is prepended to
//! the network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Layer, Network, Weights};
use crate::quantize::QuantizerKind;
use crate::reparam::{power_of_two_exponent, scale_gates, LatentWeights, ShiftCode};
use crate::tensor::Tensor;

/// Effective weights checked to be zero or signed powers of two.
pub fn check_shift_weights(w: &Tensor) -> Result<()> {
    match w
        .data()
        .iter()
        .enumerate()
        .find(|(_, &v)| v != 0.0 && power_of_two_exponent(v).is_none())
    {
        Some((index, &value)) => Err(Error::NotShiftWeight { index, value }),
        None => Ok(()),
    }
}

/// Input channels (axis 1) with at least one zero weight.
fn channels_with_zeros(w: &Tensor) -> Vec<usize> {
    let (o, c) = (w.shape()[0], w.shape()[1]);
    let per = w.len() / (o * c).max(1);
    (0..c)
        .filter(|&ch| (0..o).any(|r| w.data()[(r * c + ch) * per..(r * c + ch + 1) * per].contains(&0.0)))
        .collect()
}

/// Appends one input channel per entry of `dup` and splits the weights
/// over each original/duplicate pair.
fn split_channels(w: &Tensor, dup: &[usize], c: f64) -> Result<Tensor> {
    let (o, cin) = (w.shape()[0], w.shape()[1]);
    let per = w.len() / (o * cin).max(1);
    let cout = cin + dup.len();
    let mut out = vec![0.0; o * cout * per];
    for r in 0..o {
        let src = &w.data()[r * cin * per..(r + 1) * cin * per];
        let dst = &mut out[r * cout * per..(r + 1) * cout * per];
        dst[..cin * per].copy_from_slice(src);
        for (k, &ch) in dup.iter().enumerate() {
            for e in 0..per {
                let v = src[ch * per + e];
                let (keep, copy) = if v == 0.0 { (c, -c) } else { (2.0 * v, -v) };
                dst[ch * per + e] = keep;
                dst[(cin + k) * per + e] = copy;
            }
        }
    }
    let mut shape = w.shape().to_vec();
    shape[1] = cout;
    Tensor::new(shape, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvertedLayer {
    pub weights: Tensor,
    /// Input channels whose copies were appended, in order.
    pub duplicated: Vec<usize>,
}

/// Zero-free rewrite of one weight tensor (`(out, in, …)`), using `c` for
/// zero entries.
pub fn convert_layer(w: &Tensor, c: f64) -> Result<ConvertedLayer> {
    if w.shape().len() < 2 {
        return Err(Error::ShapeMismatch(format!("weights {:?} need (out, in, ...)", w.shape())));
    }
    check_shift_weights(w)?;
    let duplicated = channels_with_zeros(w);
    Ok(ConvertedLayer {
        weights: split_channels(w, &duplicated, c)?,
        duplicated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerConversion {
    /// Index of the layer in the converted network.
    pub layer: usize,
    pub in_before: usize,
    pub in_after: usize,
    pub zeros_before: usize,
    /// Largest weight exponent before and after conversion.
    pub max_exponent_before: Option<i32>,
    pub max_exponent_after: i32,
    pub bits: u8,
    pub exponent_bias: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub layers: Vec<LayerConversion>,
    pub prepended_duplicate: bool,
}

fn weighted_fan(layer: &Layer) -> usize {
    match layer {
        Layer::Conv2d(c) => c.in_channels,
        Layer::Linear(l) => l.in_features,
        _ => 0,
    }
}

fn base_exponent(weights: &Weights) -> (u8, i32) {
    match weights {
        Weights::DenseShift(l) => (l.bits(), l.exponent_bias()),
        Weights::Quantized { config, .. } => (config.bits, config.exponent_bias),
        Weights::Full(_) => unreachable!("only quantized layers are converted"),
    }
}

/// Widens a feature-level duplication list across a flatten so that whole
/// channels are duplicated. Returns `(consumer list, upstream channel list)`.
fn plan(layers: &[Layer], shapes: &[Vec<usize>], consumer: usize, dup: Vec<usize>) -> (Vec<usize>, Vec<usize>) {
    for idx in (0..consumer).rev() {
        match &layers[idx] {
            Layer::Flatten => {
                let plane: usize = shapes[idx][1..].iter().product();
                let mut channels: Vec<usize> = dup.iter().map(|f| f / plane).collect();
                channels.dedup();
                let features = channels.iter().flat_map(|&c| c * plane..(c + 1) * plane).collect();
                return (features, channels);
            }
            Layer::Conv2d(_) | Layer::Linear(_) | Layer::Duplicate { .. } => break,
            _ => {}
        }
    }
    (dup.clone(), dup)
}

/// Makes the tensor entering layer `consumer` carry copies of channels
/// `dup` appended after its existing channels. Returns whether a layer was
/// inserted at the front.
fn propagate(layers: &mut Vec<Layer>, shapes: &[Vec<usize>], consumer: usize, dup: &[usize]) -> Result<bool> {
    for idx in (0..consumer).rev() {
        match &mut layers[idx] {
            Layer::Relu | Layer::MaxPool { .. } | Layer::AvgPool { .. } | Layer::Flatten => {}
            Layer::BatchNorm(bn) => bn.append_channels(dup)?,
            Layer::Conv2d(c) => {
                c.weights.append_rows(dup)?;
                if let Some(b) = &mut c.bias {
                    *b = crate::reparam::append_rows(b, dup)?;
                }
                c.out_channels += dup.len();
                return Ok(false);
            }
            Layer::Linear(l) => {
                l.weights.append_rows(dup)?;
                if let Some(b) = &mut l.bias {
                    *b = crate::reparam::append_rows(b, dup)?;
                }
                l.out_features += dup.len();
                return Ok(false);
            }
            Layer::Duplicate { channels } => {
                let input_c = shapes[idx][0];
                let mapped: Vec<usize> = dup
                    .iter()
                    .map(|&d| if d < input_c { d } else { channels[d - input_c] })
                    .collect();
                channels.extend(mapped);
                return Ok(false);
            }
        }
    }
    layers.insert(0, Layer::Duplicate { channels: dup.to_vec() });
    Ok(true)
}

/// Converts every quantized layer of `net` into a zero-free DenseShift layer.
pub fn convert_network(net: &Network) -> Result<(Network, ConversionReport)> {
    let mut layers = net.layers().to_vec();
    let input = net.input_shape().to_vec();
    let targets: Vec<usize> = net.quantized_layers();
    for &i in &targets {
        let w = layers[i].weights().expect("quantized layer").effective();
        check_shift_weights(&w).map_err(|e| match e {
            Error::NotShiftWeight { index, value } => Error::Config(format!(
                "layer {i} is not a shift layer: weight {value} at index {index}"
            )),
            other => other,
        })?;
    }
    let mut offset = 0;
    let mut reports: Vec<LayerConversion> = Vec::new();
    let mut prepended = false;
    for &orig in targets.iter().rev() {
        let i = orig + offset;
        let shapes = Network::from_layers(input.clone(), net.classes(), layers.clone())?.spec().shapes()?;
        let weights = layers[i].weights().expect("quantized layer");
        let (bits, bias) = base_exponent(weights);
        let w = weights.effective();
        let zeros_before = w.data().iter().filter(|&&v| v == 0.0).count();
        let max_exponent_before = w.data().iter().filter_map(|&v| power_of_two_exponent(v)).max();
        let in_before = weighted_fan(&layers[i]);
        let (dup, upstream) = plan(&layers, &shapes, i, channels_with_zeros(&w));
        let converted = split_channels(&w, &dup, 2f64.powi(bias))?;

        let exps: Vec<i32> = converted
            .data()
            .iter()
            .map(|&v| power_of_two_exponent(v).expect("split keeps powers of two"))
            .collect();
        let lo = exps.iter().copied().min().unwrap_or(bias).min(bias);
        let hi = exps.iter().copied().max().unwrap_or(bias);
        let new_bits = (bits..=4)
            .find(|&n| scale_gates(n) as i32 >= hi - lo)
            .ok_or_else(|| Error::Config(format!("layer {i}: exponent span {lo}..{hi} exceeds a 4-bit code")))?;
        let codes: Vec<ShiftCode> = converted
            .data()
            .iter()
            .zip(&exps)
            .map(|(&v, &e)| ShiftCode::new(v < 0.0, (e - lo) as u8))
            .collect();
        let latents = LatentWeights::from_codes(converted.shape(), new_bits, lo, &codes)?;
        match &mut layers[i] {
            Layer::Conv2d(c) => {
                c.in_channels += dup.len();
                c.weights = Weights::DenseShift(latents);
            }
            Layer::Linear(l) => {
                l.in_features += dup.len();
                l.weights = Weights::DenseShift(latents);
            }
            _ => unreachable!("quantized layers are conv or linear"),
        }
        let mut layer_now = i;
        if !upstream.is_empty() && propagate(&mut layers, &shapes, i, &upstream)? {
            offset += 1;
            prepended = true;
            layer_now += 1;
            for r in &mut reports {
                r.layer += 1;
            }
        }
        reports.push(LayerConversion {
            layer: layer_now,
            in_before,
            in_after: in_before + dup.len(),
            zeros_before,
            max_exponent_before,
            max_exponent_after: hi,
            bits: new_bits,
            exponent_bias: lo,
        });
    }
    reports.reverse();
    let out = Network::from_layers(input, net.classes(), layers)?;
    Ok((
        out,
        ConversionReport {
            layers: reports,
            prepended_duplicate: prepended,
        },
    ))
}

/// Overwrites the latents of every sign-shift layer with random levels, a
/// `zero_fraction` share of them exactly zero. Used to build shift
/// networks with a controlled amount of sparsity.
pub fn randomize_shift_weights(net: &mut Network, zero_fraction: f64, seed: u64) -> Result<()> {
    if !(0.0..=1.0).contains(&zero_fraction) {
        return Err(Error::Config(format!("zero_fraction must lie in [0, 1], got {zero_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in net.layers_mut() {
        if let Some(Weights::Quantized { latent, config }) = layer.weights_mut() {
            if config.kind != QuantizerKind::SignShift {
                continue;
            }
            let (lo, hi) = config.exponent_range();
            for v in latent.data_mut() {
                *v = if rng.random_bool(zero_fraction) {
                    0.0
                } else {
                    let mag = 2f64.powi(rng.random_range(lo..=hi));
                    if rng.random() { -mag } else { mag }
                };
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub n_inputs: usize,
    pub tol: f64,
    pub max_abs_diff: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeInputs {
    /// Standard normal reals.
    #[default]
    Real,
    /// Integers in `[−8, 8]`.
    Integer,
}

/// Evaluates both networks (evaluation mode) on the same random inputs.
pub fn verify_equivalence(a: &Network, b: &Network, n_inputs: usize, tol: f64, inputs: ProbeInputs, seed: u64) -> Result<EquivalenceReport> {
    if a.input_shape() != b.input_shape() || a.classes() != b.classes() {
        return Err(Error::ShapeMismatch(format!(
            "networks take {:?}→{} and {:?}→{}",
            a.input_shape(),
            a.classes(),
            b.input_shape(),
            b.classes()
        )));
    }
    if n_inputs == 0 {
        return Err(Error::Config("verify_equivalence needs at least one input".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![n_inputs];
    shape.extend_from_slice(a.input_shape());
    let x = Tensor::from_fn(&shape, |_| match inputs {
        ProbeInputs::Real => rng.sample(StandardNormal),
        ProbeInputs::Integer => f64::from(rng.random_range(-8i32..=8)),
    });
    let max_abs_diff = a.infer(&x)?.max_abs_diff(&b.infer(&x)?)?;
    Ok(EquivalenceReport {
        n_inputs,
        tol,
        max_abs_diff,
        pass: max_abs_diff <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_free_layer_unchanged() {
        let w = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 4.0]).unwrap();
        let c = convert_layer(&w, 1.0).unwrap();
        assert_eq!(c.weights, w);
        assert!(c.duplicated.is_empty());
    }

    #[test]
    fn split_pairs_sum_to_original() {
        // column 0 holds a zero, so it is duplicated: 2 → (4, −2), 0 → (1, −1)
        let w = Tensor::new(vec![2, 1], vec![2.0, 0.0]).unwrap();
        let c = convert_layer(&w, 1.0).unwrap();
        assert_eq!(c.duplicated, vec![0]);
        assert_eq!(c.weights.shape(), &[2, 2]);
        assert_eq!(c.weights.data(), &[4.0, -2.0, 1.0, -1.0]);
    }

    #[test]
    fn conv_channels_split_per_kernel_position() {
        let w = Tensor::new(vec![1, 2, 1, 2], vec![0.0, -1.0, 2.0, 4.0]).unwrap();
        let c = convert_layer(&w, 0.5).unwrap();
        assert_eq!(c.duplicated, vec![0]);
        assert_eq!(c.weights.data(), &[0.5, -2.0, 2.0, 4.0, -0.5, 1.0]);
    }

    #[test]
    fn non_shift_weight_rejected() {
        let w = Tensor::new(vec![1, 2], vec![3.0, 1.0]).unwrap();
        assert!(matches!(convert_layer(&w, 1.0), Err(Error::NotShiftWeight { index: 0, .. })));
    }
}
