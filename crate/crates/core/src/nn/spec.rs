use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantize::QuantizerConfig;
use crate::reparam::check_bits;

/// Where a weighted layer gets the weights that multiply its input.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WeightProvider {
    #[default]
    FullPrecision,
    DenseShift {
        bits: u8,
        #[serde(default)]
        exponent_bias: i32,
    },
    Quantizer(QuantizerConfig),
}

impl WeightProvider {
    pub fn is_quantized(&self) -> bool {
        !matches!(self, WeightProvider::FullPrecision)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            WeightProvider::FullPrecision => Ok(()),
            WeightProvider::DenseShift { bits, .. } => check_bits(*bits),
            WeightProvider::Quantizer(cfg) => cfg.validate(),
        }
    }
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "yes")]
        bias: bool,
        #[serde(default)]
        weights: WeightProvider,
    },
    Linear {
        in_features: usize,
        out_features: usize,
        #[serde(default = "yes")]
        bias: bool,
        #[serde(default)]
        weights: WeightProvider,
    },
    #[serde(rename = "batchnorm")]
    BatchNorm { channels: usize },
    Relu,
    #[serde(rename = "maxpool")]
    MaxPool { size: usize, stride: usize },
    #[serde(rename = "avgpool")]
    AvgPool { size: usize, stride: usize },
    Flatten,
    /// Appends copies of the listed channels after the existing ones.
    Duplicate { channels: Vec<usize> },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::AvgPool { .. } => "avgpool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Duplicate { .. } => "duplicate",
        }
    }

    pub fn weights(&self) -> Option<&WeightProvider> {
        match self {
            LayerSpec::Conv2d { weights, .. } | LayerSpec::Linear { weights, .. } => Some(weights),
            _ => None,
        }
    }

    pub fn weights_mut(&mut self) -> Option<&mut WeightProvider> {
        match self {
            LayerSpec::Conv2d { weights, .. } | LayerSpec::Linear { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let err = |message: String| Error::LayerShape {
            layer: index,
            message,
        };
        match self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                weights,
                ..
            } => {
                weights.validate().map_err(|e| err(e.to_string()))?;
                let [c, h, w] = input else {
                    return Err(err(format!("conv2d expects (C,H,W) input, got {input:?}")));
                };
                if c != in_channels {
                    return Err(err(format!("conv2d expects {in_channels} channels, got {c}")));
                }
                if *kernel == 0 || *stride == 0 || *out_channels == 0 {
                    return Err(err("kernel, stride and out_channels must be positive".into()));
                }
                let oh = conv_out(*h, *kernel, *stride, *padding).ok_or_else(|| err("kernel larger than padded input".into()))?;
                let ow = conv_out(*w, *kernel, *stride, *padding).ok_or_else(|| err("kernel larger than padded input".into()))?;
                Ok(vec![*out_channels, oh, ow])
            }
            LayerSpec::Linear {
                in_features,
                out_features,
                weights,
                ..
            } => {
                weights.validate().map_err(|e| err(e.to_string()))?;
                if input != [*in_features] {
                    return Err(err(format!("linear expects ({in_features},) input, got {input:?}")));
                }
                if *out_features == 0 {
                    return Err(err("out_features must be positive".into()));
                }
                Ok(vec![*out_features])
            }
            LayerSpec::BatchNorm { channels } => {
                if input.first() != Some(channels) || !(input.len() == 1 || input.len() == 3) {
                    return Err(err(format!("batchnorm over {channels} channels cannot take {input:?}")));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool { size, stride } | LayerSpec::AvgPool { size, stride } => {
                let [c, h, w] = input else {
                    return Err(err(format!("pooling expects (C,H,W) input, got {input:?}")));
                };
                if *size == 0 || *stride == 0 {
                    return Err(err("pool size and stride must be positive".into()));
                }
                let oh = conv_out(*h, *size, *stride, 0).ok_or_else(|| err("pool window larger than input".into()))?;
                let ow = conv_out(*w, *size, *stride, 0).ok_or_else(|| err("pool window larger than input".into()))?;
                Ok(vec![*c, oh, ow])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Duplicate { channels } => {
                let c = *input.first().ok_or_else(|| err("empty input shape".into()))?;
                if let Some(bad) = channels.iter().find(|&&ch| ch >= c) {
                    return Err(err(format!("channel {bad} out of range {c}")));
                }
                let mut out = input.to_vec();
                out[0] += channels.len();
                Ok(out)
            }
        }
    }
}

pub(crate) fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// Ordered layer list plus the per-sample input shape and class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Per-sample shapes: `shapes[0]` is the input, `shapes[i + 1]` the
    /// output of layer `i`.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input.is_empty() || self.input.contains(&0) {
            return Err(Error::Config(format!("invalid input shape {:?}", self.input)));
        }
        let mut shapes = vec![self.input.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.output_shape(i, shapes.last().expect("non-empty"))?;
            shapes.push(next);
        }
        let out = shapes.last().expect("non-empty");
        if out != &[self.classes] {
            return Err(Error::LayerShape {
                layer: self.layers.len().saturating_sub(1),
                message: format!("network ends in {out:?}, expected ({},)", self.classes),
            });
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("a classifier needs at least 2 classes".into()));
        }
        self.shapes().map(|_| ())
    }

    /// Indices of conv/linear layers.
    pub fn weighted_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.weights().is_some())
            .map(|(i, _)| i)
            .collect()
    }

    /// Indices of conv/linear layers whose weights are not full precision.
    pub fn quantized_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.weights().is_some_and(WeightProvider::is_quantized))
            .map(|(i, _)| i)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkSpec {
        NetworkSpec {
            input: vec![1, 6, 6],
            classes: 3,
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 2,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    bias: true,
                    weights: WeightProvider::FullPrecision,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    in_features: 18,
                    out_features: 3,
                    bias: true,
                    weights: WeightProvider::DenseShift {
                        bits: 3,
                        exponent_bias: -2,
                    },
                },
            ],
        }
    }

    #[test]
    fn infers_shapes() {
        let shapes = tiny().shapes().unwrap();
        assert_eq!(shapes[1], vec![2, 6, 6]);
        assert_eq!(shapes[3], vec![2, 3, 3]);
        assert_eq!(shapes[5], vec![3]);
        assert_eq!(tiny().quantized_layers(), vec![4]);
    }

    #[test]
    fn mismatch_names_layer() {
        let mut spec = tiny();
        spec.layers[4] = LayerSpec::Linear {
            in_features: 17,
            out_features: 3,
            bias: true,
            weights: WeightProvider::FullPrecision,
        };
        match spec.validate() {
            Err(Error::LayerShape { layer, .. }) => assert_eq!(layer, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_unsupported_bits() {
        let mut spec = tiny();
        if let Some(w) = spec.layers[4].weights_mut() {
            *w = WeightProvider::DenseShift {
                bits: 5,
                exponent_bias: 0,
            };
        }
        assert!(spec.validate().is_err());
    }
}
