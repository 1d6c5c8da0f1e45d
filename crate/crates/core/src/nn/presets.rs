use serde::{Deserialize, Serialize};

use super::spec::{LayerSpec, NetworkSpec, WeightProvider};
use crate::error::{Error, Result};
use crate::quantize::{QuantizerConfig, QuantizerKind};
use crate::reparam::scale_gates;

/// Weight provider family applied to every quantizable layer of a preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightChoice {
    FullPrecision,
    #[default]
    DenseShift,
    SymmetricPot,
    SignShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PresetOptions {
    pub weights: WeightChoice,
    pub bits: u8,
    /// Quantize the final classifier layer as well.
    pub quantize_classifier: bool,
    /// Quantize the first convolution (kept full precision by default).
    pub quantize_first: bool,
}

impl Default for PresetOptions {
    fn default() -> Self {
        Self {
            weights: WeightChoice::DenseShift,
            bits: 3,
            quantize_classifier: true,
            quantize_first: false,
        }
    }
}

/// Exponent of the Kaiming standard deviation, `round(log2(sqrt(2/fan_in)))`.
fn kaiming_exponent(fan_in: usize) -> i32 {
    (2.0 / fan_in as f64).sqrt().log2().round() as i32
}

/// Provider for a layer with the given fan-in. Exponent biases place the
/// level set around the Kaiming scale: DenseShift puts its `S = 1` level
/// there, the quantizers center their range on it.
pub fn provider_for(choice: WeightChoice, bits: u8, fan_in: usize) -> WeightProvider {
    let e = kaiming_exponent(fan_in);
    let t = scale_gates(bits) as i32;
    match choice {
        WeightChoice::FullPrecision => WeightProvider::FullPrecision,
        WeightChoice::DenseShift => WeightProvider::DenseShift {
            bits,
            exponent_bias: e - 1,
        },
        WeightChoice::SymmetricPot => {
            WeightProvider::Quantizer(QuantizerConfig::new(QuantizerKind::SymmetricPot, bits, e - (t + 1) / 2))
        }
        WeightChoice::SignShift => WeightProvider::Quantizer(QuantizerConfig::new(QuantizerKind::SignShift, bits, e - (t + 1) / 2)),
    }
}

struct Builder {
    opts: PresetOptions,
    layers: Vec<LayerSpec>,
}

impl Builder {
    fn provider(&self, fan_in: usize, quantize: bool) -> WeightProvider {
        if quantize {
            provider_for(self.opts.weights, self.opts.bits, fan_in)
        } else {
            WeightProvider::FullPrecision
        }
    }

    fn conv_bn_relu(&mut self, cin: usize, cout: usize, kernel: usize, padding: usize, quantize: bool) {
        let weights = self.provider(cin * kernel * kernel, quantize);
        self.layers.extend([
            LayerSpec::Conv2d {
                in_channels: cin,
                out_channels: cout,
                kernel,
                stride: 1,
                padding,
                bias: false,
                weights,
            },
            LayerSpec::BatchNorm { channels: cout },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2, stride: 2 },
        ]);
    }

    fn linear(&mut self, fin: usize, fout: usize, quantize: bool, hidden: bool) {
        let weights = self.provider(fin, quantize);
        self.layers.push(LayerSpec::Linear {
            in_features: fin,
            out_features: fout,
            bias: !hidden,
            weights,
        });
        if hidden {
            self.layers.extend([LayerSpec::BatchNorm { channels: fout }, LayerSpec::Relu]);
        }
    }
}

/// LeNet-style MNIST network: two 5×5 convolutions, three linear layers.
pub fn lenet(opts: PresetOptions, classes: usize) -> NetworkSpec {
    let mut b = Builder { opts, layers: Vec::new() };
    b.conv_bn_relu(1, 6, 5, 0, opts.quantize_first);
    b.conv_bn_relu(6, 16, 5, 0, true);
    b.layers.push(LayerSpec::Flatten);
    b.linear(256, 120, true, true);
    b.linear(120, 84, true, true);
    b.linear(84, classes, opts.quantize_classifier, false);
    NetworkSpec {
        input: vec![1, 28, 28],
        classes,
        layers: b.layers,
    }
}

/// Two 3×3 convolutions and one linear classifier for 32×32 RGB input.
pub fn small_cnn(opts: PresetOptions, classes: usize, width: usize) -> NetworkSpec {
    let mut b = Builder { opts, layers: Vec::new() };
    b.conv_bn_relu(3, width, 3, 1, opts.quantize_first);
    b.conv_bn_relu(width, 2 * width, 3, 1, true);
    b.layers.push(LayerSpec::Flatten);
    b.linear(2 * width * 64, classes, opts.quantize_classifier, false);
    NetworkSpec {
        input: vec![3, 32, 32],
        classes,
        layers: b.layers,
    }
}

/// One hidden layer over flat feature vectors.
pub fn mlp(opts: PresetOptions, features: usize, hidden: usize, classes: usize) -> NetworkSpec {
    let mut b = Builder { opts, layers: Vec::new() };
    b.linear(features, hidden, opts.quantize_first, true);
    b.linear(hidden, classes, opts.quantize_classifier, false);
    NetworkSpec {
        input: vec![features],
        classes,
        layers: b.layers,
    }
}

pub fn by_name(name: &str, opts: PresetOptions, classes: usize) -> Result<NetworkSpec> {
    match name {
        "lenet" => Ok(lenet(opts, classes)),
        "small_cnn" => Ok(small_cnn(opts, classes, 16)),
        other => Err(Error::Config(format!("unknown preset {other:?} (expected lenet or small_cnn)"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for weights in [
            WeightChoice::FullPrecision,
            WeightChoice::DenseShift,
            WeightChoice::SymmetricPot,
            WeightChoice::SignShift,
        ] {
            let opts = PresetOptions {
                weights,
                ..PresetOptions::default()
            };
            lenet(opts, 10).validate().unwrap();
            small_cnn(opts, 10, 8).validate().unwrap();
            mlp(opts, 4, 8, 3).validate().unwrap();
        }
    }

    #[test]
    fn first_conv_stays_full_precision() {
        let spec = lenet(PresetOptions::default(), 10);
        assert_eq!(spec.layers[0].weights(), Some(&WeightProvider::FullPrecision));
        assert_eq!(spec.quantized_layers().len(), 4);
        let exempt = lenet(
            PresetOptions {
                quantize_classifier: false,
                ..PresetOptions::default()
            },
            10,
        );
        assert_eq!(exempt.quantized_layers().len(), 3);
    }

    #[test]
    fn dense_shift_bias_tracks_fan_in() {
        // sqrt(2/200) = 0.1 → exponent −3, S = 1 level at 2^−3
        assert_eq!(
            provider_for(WeightChoice::DenseShift, 3, 200),
            WeightProvider::DenseShift {
                bits: 3,
                exponent_bias: -4
            }
        );
    }
}
