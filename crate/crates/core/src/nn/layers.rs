use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::linalg::{gemm, Mat};
use super::spec::{LayerSpec, WeightProvider};
use crate::error::{Error, Result};
use crate::quantize::{ste_backward_quantizer, QuantizerConfig};
use crate::reparam::{append_rows, backward_latents, materialize_shift, LatentInit, LatentWeights, SteOptions};
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Role of a trainable tensor, used to decide where weight decay applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Latent,
    Bias,
    Norm,
}

/// Storage behind a conv/linear weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Weights {
    Full(Tensor),
    DenseShift(LatentWeights),
    Quantized { latent: Tensor, config: QuantizerConfig },
}

impl Weights {
    pub(crate) fn init(
        provider: &WeightProvider,
        shape: &[usize],
        fan_in: usize,
        latent_init: LatentInit,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let kaiming = |rng: &mut dyn rand::RngCore| -> Result<Tensor> {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).map_err(|e| Error::Config(e.to_string()))?;
            Ok(Tensor::from_fn(shape, |_| normal.sample(rng)))
        };
        Ok(match *provider {
            WeightProvider::FullPrecision => Weights::Full(kaiming(rng)?),
            WeightProvider::DenseShift { bits, exponent_bias } => {
                Weights::DenseShift(LatentWeights::init(shape, bits, exponent_bias, fan_in, latent_init, rng)?)
            }
            WeightProvider::Quantizer(config) => Weights::Quantized {
                latent: kaiming(rng)?,
                config,
            },
        })
    }

    pub fn provider(&self) -> WeightProvider {
        match self {
            Weights::Full(_) => WeightProvider::FullPrecision,
            Weights::DenseShift(l) => WeightProvider::DenseShift {
                bits: l.bits(),
                exponent_bias: l.exponent_bias(),
            },
            Weights::Quantized { config, .. } => WeightProvider::Quantizer(*config),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Weights::Full(t) => t.shape(),
            Weights::DenseShift(l) => l.shape(),
            Weights::Quantized { latent, .. } => latent.shape(),
        }
    }

    /// The tensor that multiplies the layer input.
    pub fn effective(&self) -> Tensor {
        match self {
            Weights::Full(t) => t.clone(),
            Weights::DenseShift(l) => materialize_shift(l).weights,
            Weights::Quantized { latent, config } => config.quantize(latent),
        }
    }

    fn backward(&self, grad: Tensor, ste: SteOptions) -> Result<Vec<Tensor>> {
        match self {
            Weights::Full(_) => Ok(vec![grad]),
            Weights::DenseShift(l) => Ok(backward_latents(&grad, l, ste)?.into_vec()),
            Weights::Quantized { latent, config } => Ok(vec![ste_backward_quantizer(&grad, latent, config)?]),
        }
    }

    fn params(&self) -> Vec<(&Tensor, ParamKind)> {
        match self {
            Weights::Full(t) => vec![(t, ParamKind::Weight)],
            Weights::DenseShift(l) => l.tensors().into_iter().map(|t| (t, ParamKind::Latent)).collect(),
            Weights::Quantized { latent, .. } => vec![(latent, ParamKind::Latent)],
        }
    }

    fn params_mut(&mut self) -> Vec<(&mut Tensor, ParamKind)> {
        match self {
            Weights::Full(t) => vec![(t, ParamKind::Weight)],
            Weights::DenseShift(l) => l.tensors_mut().into_iter().map(|t| (t, ParamKind::Latent)).collect(),
            Weights::Quantized { latent, .. } => vec![(latent, ParamKind::Latent)],
        }
    }

    pub(crate) fn append_rows(&mut self, rows: &[usize]) -> Result<()> {
        match self {
            Weights::Full(t) => *t = append_rows(t, rows)?,
            Weights::DenseShift(l) => l.append_rows(rows)?,
            Weights::Quantized { latent, .. } => *latent = append_rows(latent, rows)?,
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `(out, in, k, k)`
    pub weights: Weights,
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `(out, in)`
    pub weights: Weights,
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub(crate) fn append_channels(&mut self, channels: &[usize]) -> Result<()> {
        for t in [&mut self.gamma, &mut self.beta, &mut self.running_mean, &mut self.running_var] {
            *t = append_rows(t, channels)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Linear(Linear),
    BatchNorm(BatchNorm),
    Relu,
    MaxPool { size: usize, stride: usize },
    AvgPool { size: usize, stride: usize },
    Flatten,
    Duplicate { channels: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-layer intermediates kept by the forward pass for backward.
#[derive(Debug, Clone)]
pub(crate) enum LayerCache {
    Conv {
        input_shape: Vec<usize>,
        cols: Vec<f64>,
        weights: Tensor,
    },
    Linear {
        input: Tensor,
        weights: Tensor,
    },
    BatchNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_mean: Vec<f64>,
        batch_var: Vec<f64>,
        shape: Vec<usize>,
        mode: Mode,
    },
    Relu {
        mask: Vec<bool>,
    },
    MaxPool {
        input_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    AvgPool {
        input_shape: Vec<usize>,
    },
    Flatten {
        input_shape: Vec<usize>,
    },
    Duplicate {
        input_shape: Vec<usize>,
    },
}

impl Layer {
    pub(crate) fn init(spec: &LayerSpec, latent_init: LatentInit, rng: &mut impl Rng) -> Result<Self> {
        Ok(match spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                bias,
                weights,
            } => {
                let fan_in = in_channels * kernel * kernel;
                let shape = [*out_channels, *in_channels, *kernel, *kernel];
                Layer::Conv2d(Conv2d {
                    in_channels: *in_channels,
                    out_channels: *out_channels,
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                    weights: Weights::init(weights, &shape, fan_in, latent_init, rng)?,
                    bias: bias.then(|| Tensor::zeros(&[*out_channels])),
                })
            }
            LayerSpec::Linear {
                in_features,
                out_features,
                bias,
                weights,
            } => Layer::Linear(Linear {
                in_features: *in_features,
                out_features: *out_features,
                weights: Weights::init(weights, &[*out_features, *in_features], *in_features, latent_init, rng)?,
                bias: bias.then(|| Tensor::zeros(&[*out_features])),
            }),
            LayerSpec::BatchNorm { channels } => Layer::BatchNorm(BatchNorm::new(*channels)),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool { size, stride } => Layer::MaxPool {
                size: *size,
                stride: *stride,
            },
            LayerSpec::AvgPool { size, stride } => Layer::AvgPool {
                size: *size,
                stride: *stride,
            },
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Duplicate { channels } => Layer::Duplicate {
                channels: channels.clone(),
            },
        })
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv2d(c) => LayerSpec::Conv2d {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                stride: c.stride,
                padding: c.padding,
                bias: c.bias.is_some(),
                weights: c.weights.provider(),
            },
            Layer::Linear(l) => LayerSpec::Linear {
                in_features: l.in_features,
                out_features: l.out_features,
                bias: l.bias.is_some(),
                weights: l.weights.provider(),
            },
            Layer::BatchNorm(b) => LayerSpec::BatchNorm { channels: b.channels() },
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool { size, stride } => LayerSpec::MaxPool {
                size: *size,
                stride: *stride,
            },
            Layer::AvgPool { size, stride } => LayerSpec::AvgPool {
                size: *size,
                stride: *stride,
            },
            Layer::Flatten => LayerSpec::Flatten,
            Layer::Duplicate { channels } => LayerSpec::Duplicate {
                channels: channels.clone(),
            },
        }
    }

    pub fn weights(&self) -> Option<&Weights> {
        match self {
            Layer::Conv2d(c) => Some(&c.weights),
            Layer::Linear(l) => Some(&l.weights),
            _ => None,
        }
    }

    pub fn weights_mut(&mut self) -> Option<&mut Weights> {
        match self {
            Layer::Conv2d(c) => Some(&mut c.weights),
            Layer::Linear(l) => Some(&mut l.weights),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&Tensor> {
        match self {
            Layer::Conv2d(c) => c.bias.as_ref(),
            Layer::Linear(l) => l.bias.as_ref(),
            _ => None,
        }
    }

    pub(crate) fn params(&self) -> Vec<(&Tensor, ParamKind)> {
        match self {
            Layer::Conv2d(Conv2d { weights, bias, .. }) | Layer::Linear(Linear { weights, bias, .. }) => {
                let mut p = weights.params();
                p.extend(bias.iter().map(|b| (b, ParamKind::Bias)));
                p
            }
            Layer::BatchNorm(b) => vec![(&b.gamma, ParamKind::Norm), (&b.beta, ParamKind::Norm)],
            _ => Vec::new(),
        }
    }

    pub(crate) fn params_mut(&mut self) -> Vec<(&mut Tensor, ParamKind)> {
        match self {
            Layer::Conv2d(Conv2d { weights, bias, .. }) | Layer::Linear(Linear { weights, bias, .. }) => {
                let mut p = weights.params_mut();
                p.extend(bias.iter_mut().map(|b| (b, ParamKind::Bias)));
                p
            }
            Layer::BatchNorm(b) => vec![(&mut b.gamma, ParamKind::Norm), (&mut b.beta, ParamKind::Norm)],
            _ => Vec::new(),
        }
    }

    pub(crate) fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, LayerCache)> {
        match self {
            Layer::Conv2d(c) => c.forward(x),
            Layer::Linear(l) => l.forward(x),
            Layer::BatchNorm(b) => b.forward(x, mode),
            Layer::Relu => {
                let mask: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
                let y = x.map(|v| if v > 0.0 { v } else { 0.0 });
                Ok((y, LayerCache::Relu { mask }))
            }
            Layer::MaxPool { size, stride } => max_pool(x, *size, *stride),
            Layer::AvgPool { size, stride } => avg_pool(x, *size, *stride),
            Layer::Flatten => {
                let n = x.rows();
                let y = x.clone().reshape(&[n, x.row_len()])?;
                Ok((
                    y,
                    LayerCache::Flatten {
                        input_shape: x.shape().to_vec(),
                    },
                ))
            }
            Layer::Duplicate { channels } => Ok((
                duplicate_channels(x, channels)?,
                LayerCache::Duplicate {
                    input_shape: x.shape().to_vec(),
                },
            )),
        }
    }

    /// Returns the input gradient and one gradient per trainable tensor, in
    /// [`Layer::params`] order.
    pub(crate) fn backward(&self, cache: &LayerCache, gy: &Tensor, ste: SteOptions) -> Result<(Tensor, Vec<Tensor>)> {
        match (self, cache) {
            (Layer::Conv2d(c), LayerCache::Conv { input_shape, cols, weights }) => c.backward(input_shape, cols, weights, gy, ste),
            (Layer::Linear(l), LayerCache::Linear { input, weights }) => l.backward(input, weights, gy, ste),
            (Layer::BatchNorm(b), cache @ LayerCache::BatchNorm { .. }) => b.backward(cache, gy),
            (Layer::Relu, LayerCache::Relu { mask }) => {
                let mut g = gy.clone();
                for (v, &keep) in g.data_mut().iter_mut().zip(mask) {
                    if !keep {
                        *v = 0.0;
                    }
                }
                Ok((g, Vec::new()))
            }
            (Layer::MaxPool { .. }, LayerCache::MaxPool { input_shape, argmax }) => {
                let mut g = Tensor::zeros(input_shape);
                for (&src, &v) in argmax.iter().zip(gy.data()) {
                    g.data_mut()[src] += v;
                }
                Ok((g, Vec::new()))
            }
            (Layer::AvgPool { size, stride }, LayerCache::AvgPool { input_shape }) => {
                Ok((avg_pool_backward(input_shape, gy, *size, *stride), Vec::new()))
            }
            (Layer::Flatten, LayerCache::Flatten { input_shape }) => Ok((gy.clone().reshape(input_shape)?, Vec::new())),
            (Layer::Duplicate { channels }, LayerCache::Duplicate { input_shape }) => {
                Ok((duplicate_backward(input_shape, channels, gy), Vec::new()))
            }
            _ => Err(Error::StaleCache),
        }
    }
}

impl Conv2d {
    fn geometry(&self, x: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
        let [n, c, h, w] = x.shape() else {
            return Err(Error::ShapeMismatch(format!("conv2d input {:?}", x.shape())));
        };
        if *c != self.in_channels {
            return Err(Error::ShapeMismatch(format!("conv2d expects {} channels, got {c}", self.in_channels)));
        }
        let oh = super::spec::conv_out(*h, self.kernel, self.stride, self.padding)
            .ok_or_else(|| Error::ShapeMismatch("kernel larger than input".into()))?;
        let ow = super::spec::conv_out(*w, self.kernel, self.stride, self.padding)
            .ok_or_else(|| Error::ShapeMismatch("kernel larger than input".into()))?;
        Ok((*n, *h, *w, oh, ow))
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, LayerCache)> {
        let (n, h, w, oh, ow) = self.geometry(x)?;
        let weights = self.weights.effective();
        let k = self.in_channels * self.kernel * self.kernel;
        let p = oh * ow;
        let np = n * p;
        let cols = im2col(x.data(), n, self.in_channels, h, w, self.kernel, self.stride, self.padding, oh, ow);
        let mut out = vec![0.0; self.out_channels * np];
        gemm(Mat::new(weights.data(), self.out_channels, k), Mat::new(&cols, k, np), 0.0, &mut out);
        let mut y = vec![0.0; n * self.out_channels * p];
        for o in 0..self.out_channels {
            let b = self.bias.as_ref().map_or(0.0, |b| b.data()[o]);
            for s in 0..n {
                let src = &out[o * np + s * p..o * np + (s + 1) * p];
                let dst = &mut y[(s * self.out_channels + o) * p..(s * self.out_channels + o + 1) * p];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = v + b;
                }
            }
        }
        Ok((
            Tensor::new(vec![n, self.out_channels, oh, ow], y)?,
            LayerCache::Conv {
                input_shape: x.shape().to_vec(),
                cols,
                weights,
            },
        ))
    }

    fn backward(&self, input_shape: &[usize], cols: &[f64], weights: &Tensor, gy: &Tensor, ste: SteOptions) -> Result<(Tensor, Vec<Tensor>)> {
        let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
        let (oh, ow) = (gy.shape()[2], gy.shape()[3]);
        let p = oh * ow;
        let np = n * p;
        let k = c * self.kernel * self.kernel;
        let o_count = self.out_channels;
        let mut gmat = vec![0.0; o_count * np];
        for s in 0..n {
            for o in 0..o_count {
                gmat[o * np + s * p..o * np + (s + 1) * p].copy_from_slice(&gy.data()[(s * o_count + o) * p..(s * o_count + o + 1) * p]);
            }
        }
        let mut gw = vec![0.0; o_count * k];
        gemm(Mat::new(&gmat, o_count, np), Mat::new(cols, k, np).t(), 0.0, &mut gw);
        let mut dcols = vec![0.0; k * np];
        gemm(Mat::new(weights.data(), o_count, k).t(), Mat::new(&gmat, o_count, np), 0.0, &mut dcols);
        let gx = col2im(&dcols, n, c, h, w, self.kernel, self.stride, self.padding, oh, ow);

        let mut grads = self.weights.backward(Tensor::new(weights.shape().to_vec(), gw)?, ste)?;
        if self.bias.is_some() {
            let gb = (0..o_count).map(|o| gmat[o * np..(o + 1) * np].iter().sum()).collect();
            grads.push(Tensor::new(vec![o_count], gb)?);
        }
        Ok((Tensor::new(input_shape.to_vec(), gx)?, grads))
    }
}

/// Output positions `ox` whose input column `ox·stride + k − pad` lies in
/// `[0, size)`.
fn valid_range(size: usize, out: usize, k: usize, stride: usize, pad: usize) -> std::ops::Range<usize> {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if size + pad > k { ((size + pad - k - 1) / stride + 1).min(out) } else { 0 };
    lo..hi.max(lo)
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], n: usize, c: usize, h: usize, w: usize, kernel: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Vec<f64> {
    let p = oh * ow;
    let np = n * p;
    let mut cols = vec![0.0; c * kernel * kernel * np];
    for ch in 0..c {
        for ky in 0..kernel {
            let rows = valid_range(h, oh, ky, stride, pad);
            for kx in 0..kernel {
                let xs = valid_range(w, ow, kx, stride, pad);
                let row = (ch * kernel + ky) * kernel + kx;
                for s in 0..n {
                    let plane = &x[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                    let dst = &mut cols[row * np + s * p..row * np + (s + 1) * p];
                    for oy in rows.clone() {
                        let iy = oy * stride + ky - pad;
                        let d = &mut dst[oy * ow + xs.start..oy * ow + xs.end];
                        let x0 = iy * w + xs.start * stride + kx - pad;
                        if stride == 1 {
                            d.copy_from_slice(&plane[x0..x0 + d.len()]);
                        } else {
                            for (j, v) in d.iter_mut().enumerate() {
                                *v = plane[x0 + j * stride];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], n: usize, c: usize, h: usize, w: usize, kernel: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Vec<f64> {
    let p = oh * ow;
    let np = n * p;
    let mut x = vec![0.0; n * c * h * w];
    for ch in 0..c {
        for ky in 0..kernel {
            let rows = valid_range(h, oh, ky, stride, pad);
            for kx in 0..kernel {
                let xs = valid_range(w, ow, kx, stride, pad);
                let row = (ch * kernel + ky) * kernel + kx;
                for s in 0..n {
                    let plane = &mut x[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                    let src = &cols[row * np + s * p..row * np + (s + 1) * p];
                    for oy in rows.clone() {
                        let iy = oy * stride + ky - pad;
                        let g = &src[oy * ow + xs.start..oy * ow + xs.end];
                        let x0 = iy * w + xs.start * stride + kx - pad;
                        if stride == 1 {
                            for (d, v) in plane[x0..x0 + g.len()].iter_mut().zip(g) {
                                *d += v;
                            }
                        } else {
                            for (j, v) in g.iter().enumerate() {
                                plane[x0 + j * stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

impl Linear {
    fn forward(&self, x: &Tensor) -> Result<(Tensor, LayerCache)> {
        if x.shape().len() != 2 || x.shape()[1] != self.in_features {
            return Err(Error::ShapeMismatch(format!(
                "linear expects (N, {}), got {:?}",
                self.in_features,
                x.shape()
            )));
        }
        let n = x.rows();
        let weights = self.weights.effective();
        let mut y = vec![0.0; n * self.out_features];
        if let Some(b) = &self.bias {
            for row in y.chunks_mut(self.out_features) {
                row.copy_from_slice(b.data());
            }
        }
        gemm(
            Mat::new(x.data(), n, self.in_features),
            Mat::new(weights.data(), self.out_features, self.in_features).t(),
            1.0,
            &mut y,
        );
        Ok((
            Tensor::new(vec![n, self.out_features], y)?,
            LayerCache::Linear {
                input: x.clone(),
                weights,
            },
        ))
    }

    fn backward(&self, x: &Tensor, weights: &Tensor, gy: &Tensor, ste: SteOptions) -> Result<(Tensor, Vec<Tensor>)> {
        let n = x.rows();
        let (fi, fo) = (self.in_features, self.out_features);
        let mut gw = vec![0.0; fo * fi];
        gemm(Mat::new(gy.data(), n, fo).t(), Mat::new(x.data(), n, fi), 0.0, &mut gw);
        let mut gx = vec![0.0; n * fi];
        gemm(Mat::new(gy.data(), n, fo), Mat::new(weights.data(), fo, fi), 0.0, &mut gx);
        let mut grads = self.weights.backward(Tensor::new(vec![fo, fi], gw)?, ste)?;
        if self.bias.is_some() {
            let mut gb = vec![0.0; fo];
            for row in gy.data().chunks(fo) {
                for (acc, v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            grads.push(Tensor::new(vec![fo], gb)?);
        }
        Ok((Tensor::new(x.shape().to_vec(), gx)?, grads))
    }
}

/// `(batch, channels, spatial)` view of an `(N,C)` or `(N,C,H,W)` tensor.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        _ => Err(Error::ShapeMismatch(format!("batchnorm input {shape:?}"))),
    }
}

impl BatchNorm {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, LayerCache)> {
        let (n, c, s) = channel_layout(x.shape())?;
        if c != self.channels() {
            return Err(Error::ShapeMismatch(format!("batchnorm expects {} channels, got {c}", self.channels())));
        }
        let m = (n * s) as f64;
        let mut batch_mean = vec![0.0; c];
        let mut batch_var = vec![0.0; c];
        let (mean, var) = match mode {
            Mode::Train => {
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * s;
                        batch_mean[ch] += x.data()[off..off + s].iter().sum::<f64>();
                    }
                }
                batch_mean.iter_mut().for_each(|v| *v /= m);
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * s;
                        let mu = batch_mean[ch];
                        batch_var[ch] += x.data()[off..off + s].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                }
                batch_var.iter_mut().for_each(|v| *v /= m);
                (batch_mean.clone(), batch_var.clone())
            }
            Mode::Eval => (self.running_mean.data().to_vec(), self.running_var.data().to_vec()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * s;
                let (g, be) = (self.gamma.data()[ch], self.beta.data()[ch]);
                for i in off..off + s {
                    let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    y[i] = g * xh + be;
                }
            }
        }
        Ok((
            Tensor::new(x.shape().to_vec(), y)?,
            LayerCache::BatchNorm {
                xhat,
                inv_std,
                batch_mean,
                batch_var,
                shape: x.shape().to_vec(),
                mode,
            },
        ))
    }

    pub(crate) fn update_running(&mut self, cache: &LayerCache) {
        if let LayerCache::BatchNorm {
            batch_mean,
            batch_var,
            shape,
            mode: Mode::Train,
            ..
        } = cache
        {
            let (n, _, s) = channel_layout(shape).expect("validated in forward");
            let m = (n * s) as f64;
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for ch in 0..self.channels() {
                let rm = &mut self.running_mean.data_mut()[ch];
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * batch_mean[ch];
                let rv = &mut self.running_var.data_mut()[ch];
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * batch_var[ch] * unbias;
            }
        }
    }

    fn backward(&self, cache: &LayerCache, gy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let LayerCache::BatchNorm {
            xhat, inv_std, shape, mode, ..
        } = cache
        else {
            return Err(Error::StaleCache);
        };
        let (n, c, s) = channel_layout(shape)?;
        let m = (n * s) as f64;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * s;
                for i in off..off + s {
                    dgamma[ch] += gy.data()[i] * xhat[i];
                    dbeta[ch] += gy.data()[i];
                }
            }
        }
        let mut gx = vec![0.0; gy.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * s;
                let scale = self.gamma.data()[ch] * inv_std[ch];
                for i in off..off + s {
                    gx[i] = match mode {
                        Mode::Train => scale / m * (m * gy.data()[i] - dbeta[ch] - xhat[i] * dgamma[ch]),
                        Mode::Eval => scale * gy.data()[i],
                    };
                }
            }
        }
        Ok((
            Tensor::new(shape.clone(), gx)?,
            vec![Tensor::new(vec![c], dgamma)?, Tensor::new(vec![c], dbeta)?],
        ))
    }
}

fn pool_geometry(x: &Tensor, size: usize, stride: usize) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let [n, c, h, w] = x.shape() else {
        return Err(Error::ShapeMismatch(format!("pooling input {:?}", x.shape())));
    };
    let oh = super::spec::conv_out(*h, size, stride, 0).ok_or_else(|| Error::ShapeMismatch("pool window too large".into()))?;
    let ow = super::spec::conv_out(*w, size, stride, 0).ok_or_else(|| Error::ShapeMismatch("pool window too large".into()))?;
    Ok((*n, *c, *h, *w, oh, ow))
}

fn max_pool(x: &Tensor, size: usize, stride: usize) -> Result<(Tensor, LayerCache)> {
    let (n, c, h, w, oh, ow) = pool_geometry(x, size, stride)?;
    let mut y = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..size {
                    for kx in 0..size {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x.data()[idx] > x.data()[best] {
                            best = idx;
                        }
                    }
                }
                y.push(x.data()[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::new(vec![n, c, oh, ow], y)?,
        LayerCache::MaxPool {
            input_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

fn avg_pool(x: &Tensor, size: usize, stride: usize) -> Result<(Tensor, LayerCache)> {
    let (n, c, h, w, oh, ow) = pool_geometry(x, size, stride)?;
    let norm = 1.0 / (size * size) as f64;
    let mut y = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..size {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    acc += x.data()[row..row + size].iter().sum::<f64>();
                }
                y.push(acc * norm);
            }
        }
    }
    Ok((
        Tensor::new(vec![n, c, oh, ow], y)?,
        LayerCache::AvgPool {
            input_shape: x.shape().to_vec(),
        },
    ))
}

fn avg_pool_backward(input_shape: &[usize], gy: &Tensor, size: usize, stride: usize) -> Tensor {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (gy.shape()[2], gy.shape()[3]);
    let norm = 1.0 / (size * size) as f64;
    let mut g = Tensor::zeros(input_shape);
    let planes = input_shape[0] * input_shape[1];
    for plane in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let v = gy.data()[(plane * oh + oy) * ow + ox] * norm;
                for ky in 0..size {
                    let row = plane * h * w + (oy * stride + ky) * w + ox * stride;
                    g.data_mut()[row..row + size].iter_mut().for_each(|d| *d += v);
                }
            }
        }
    }
    g
}

fn duplicate_channels(x: &Tensor, channels: &[usize]) -> Result<Tensor> {
    let n = x.rows();
    let c = *x.shape().get(1).ok_or_else(|| Error::ShapeMismatch("duplicate needs a channel axis".into()))?;
    if let Some(bad) = channels.iter().find(|&&ch| ch >= c) {
        return Err(Error::ShapeMismatch(format!("channel {bad} out of range {c}")));
    }
    let s: usize = x.shape()[2..].iter().product();
    let out_c = c + channels.len();
    let mut y = Vec::with_capacity(n * out_c * s);
    for b in 0..n {
        let sample = &x.data()[b * c * s..(b + 1) * c * s];
        y.extend_from_slice(sample);
        for &ch in channels {
            y.extend_from_slice(&sample[ch * s..(ch + 1) * s]);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[1] = out_c;
    Tensor::new(shape, y)
}

fn duplicate_backward(input_shape: &[usize], channels: &[usize], gy: &Tensor) -> Tensor {
    let n = input_shape[0];
    let c = input_shape[1];
    let s: usize = input_shape[2..].iter().product();
    let out_c = c + channels.len();
    let mut g = Tensor::zeros(input_shape);
    for b in 0..n {
        let src = &gy.data()[b * out_c * s..(b + 1) * out_c * s];
        let dst = &mut g.data_mut()[b * c * s..(b + 1) * c * s];
        dst.copy_from_slice(&src[..c * s]);
        for (j, &ch) in channels.iter().enumerate() {
            let extra = &src[(c + j) * s..(c + j + 1) * s];
            for (d, v) in dst[ch * s..(ch + 1) * s].iter_mut().zip(extra) {
                *d += v;
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_identity_conv() {
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let conv = Conv2d {
            in_channels: 3,
            out_channels: 3,
            kernel: 1,
            stride: 1,
            padding: 0,
            weights: Weights::Full(w),
            bias: None,
        };
        let x = Tensor::from_fn(&[2, 3, 4, 5], |i| (i as f64 * 0.37).sin());
        let (y, _) = conv.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn linear_hand_arithmetic() {
        let lin = Linear {
            in_features: 2,
            out_features: 2,
            weights: Weights::Full(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()),
            bias: Some(Tensor::zeros(&[2])),
        };
        let (y, _) = lin.forward(&Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    #[test]
    fn padded_conv_matches_direct_sum() {
        let x = Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64 - 10.0);
        let w = Tensor::from_fn(&[1, 2, 3, 3], |i| (i % 5) as f64 - 2.0);
        let conv = Conv2d {
            in_channels: 2,
            out_channels: 1,
            kernel: 3,
            stride: 2,
            padding: 1,
            weights: Weights::Full(w.clone()),
            bias: None,
        };
        let (y, _) = conv.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        for oy in 0..2 {
            for ox in 0..2 {
                let mut acc = 0.0;
                for c in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                acc += x.data()[c * 16 + iy as usize * 4 + ix as usize] * w.data()[c * 9 + ky * 3 + kx];
                            }
                        }
                    }
                }
                assert_eq!(y.data()[oy * 2 + ox], acc);
            }
        }
    }

    #[test]
    fn duplicate_round_trip_gradient() {
        let x = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64);
        let y = duplicate_channels(&x, &[2, 0]).unwrap();
        assert_eq!(y.shape(), &[2, 5, 2, 2]);
        assert_eq!(&y.data()[12..16], &x.data()[8..12]);
        assert_eq!(&y.data()[16..20], &x.data()[0..4]);
        let g = duplicate_backward(x.shape(), &[2, 0], &Tensor::filled(y.shape(), 1.0));
        assert_eq!(&g.data()[..12], &[2.0, 2.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }
}
