//! Whole-network evaluation where quantized conv/linear layers run through
//! the packed fixed-point kernels on 8-bit activations.

use super::mac::{conv_forward_packed, mac_codes, ConvGeometry, FixedActivations};
use super::pack::PackedWeightBlob;
use crate::error::{Error, Result};
use crate::nn::{Layer, Mode, Network, Weights};
use crate::quantize::QuantizerKind;
use crate::reparam::{materialize_shift, ShiftCode};
use crate::tensor::Tensor;

/// Packs the discrete weights of a quantized layer. DenseShift and
/// symmetric-PoT layers give zero-free blobs, sign-shift layers zero-coded ones.
pub fn pack_weights(weights: &Weights) -> Result<Option<PackedWeightBlob>> {
    match weights {
        Weights::Full(_) => Ok(None),
        Weights::DenseShift(l) => {
            let codes = materialize_shift(l).codes;
            PackedWeightBlob::pack(&codes, l.bits(), l.exponent_bias()).map(Some)
        }
        Weights::Quantized { latent, config } => {
            let values = config.quantize(latent);
            let codes = values
                .data()
                .iter()
                .enumerate()
                .map(|(index, &v)| {
                    if v == 0.0 {
                        Ok(None)
                    } else {
                        ShiftCode::from_value(v, config.exponent_bias)
                            .map(Some)
                            .ok_or(Error::NotShiftWeight { index, value: v })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            match config.kind {
                QuantizerKind::SignShift => PackedWeightBlob::pack_with_zeros(&codes, config.bits, config.exponent_bias),
                QuantizerKind::SymmetricPot => {
                    let dense: Vec<ShiftCode> = codes.into_iter().flatten().collect();
                    PackedWeightBlob::pack(&dense, config.bits, config.exponent_bias)
                }
            }
            .map(Some)
        }
    }
}

/// A network with its quantized layers pre-packed for kernel evaluation.
pub struct PackedNetwork<'a> {
    net: &'a Network,
    blobs: Vec<Option<PackedWeightBlob>>,
}

impl<'a> PackedNetwork<'a> {
    pub fn new(net: &'a Network) -> Result<Self> {
        let blobs = net
            .layers()
            .iter()
            .map(|l| l.weights().map_or(Ok(None), pack_weights))
            .collect::<Result<_>>()?;
        Ok(Self { net, blobs })
    }

    /// Logits with every packed layer evaluated on per-sample 8-bit
    /// activations; other layers run in floating point (evaluation mode).
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != self.net.input_shape().len() + 1 || x.shape()[1..] != *self.net.input_shape() || x.rows() == 0 {
            return Err(Error::LayerShape {
                layer: 0,
                message: format!("expected (N, {:?}) input, got {:?}", self.net.input_shape(), x.shape()),
            });
        }
        let mut h = x.clone();
        for (i, (layer, blob)) in self.net.layers().iter().zip(&self.blobs).enumerate() {
            h = match (layer, blob) {
                (Layer::Conv2d(c), Some(blob)) => {
                    let g = ConvGeometry {
                        in_channels: c.in_channels,
                        out_channels: c.out_channels,
                        kernel: c.kernel,
                        stride: c.stride,
                        padding: c.padding,
                    };
                    per_sample(&h, c.bias.as_ref(), blob, |acts, shape| {
                        let y = conv_forward_packed(acts, shape, blob, &g)?;
                        Ok((y.shape, y.data))
                    })?
                }
                (Layer::Linear(l), Some(blob)) => {
                    if h.shape() != [h.rows(), l.in_features] {
                        return Err(Error::LayerShape {
                            layer: i,
                            message: format!("linear expects (N, {}), got {:?}", l.in_features, h.shape()),
                        });
                    }
                    let codes: Vec<u8> = (0..blob.len()).map(|j| blob.raw(j)).collect();
                    let zero = blob.zero_shift();
                    per_sample(&h, l.bias.as_ref(), blob, |acts, _| {
                        let out = codes
                            .chunks(l.in_features)
                            .map(|row| mac_codes(acts.values(), row, zero))
                            .collect();
                        Ok((vec![1, l.out_features], out))
                    })?
                }
                _ => {
                    layer
                        .forward(&h, Mode::Eval)
                        .map_err(|e| match e {
                            Error::ShapeMismatch(message) => Error::LayerShape { layer: i, message },
                            other => other,
                        })?
                        .0
                }
            };
        }
        Ok(h)
    }
}

/// Quantizes each sample's activations separately, runs `kernel`, and
/// rescales its integer output back to reals plus bias.
fn per_sample(
    h: &Tensor,
    bias: Option<&Tensor>,
    blob: &PackedWeightBlob,
    kernel: impl Fn(&FixedActivations, &[usize]) -> Result<(Vec<usize>, Vec<i64>)>,
) -> Result<Tensor> {
    let n = h.rows();
    let mut sample_shape = h.shape().to_vec();
    sample_shape[0] = 1;
    let mut out_shape = Vec::new();
    let mut data = Vec::new();
    for row in h.data().chunks(h.row_len()) {
        let acts = FixedActivations::quantize(row);
        let (shape, ints) = kernel(&acts, &sample_shape)?;
        let scale = 2f64.powi(blob.exponent_bias() + acts.exponent());
        let channels = shape[1];
        let plane = ints.len() / channels;
        data.extend(ints.iter().enumerate().map(|(j, &v)| {
            let b = bias.map_or(0.0, |b| b.data()[j / plane]);
            v as f64 * scale + b
        }));
        out_shape = shape;
    }
    out_shape[0] = n;
    Tensor::new(out_shape, data)
}
