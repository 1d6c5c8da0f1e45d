use rand::Rng;

use super::layers::{Layer, LayerCache, Mode, ParamKind};
use super::spec::{LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::reparam::{LatentInit, SteOptions};
use crate::tensor::Tensor;

/// A network with parameters. Any mutable access to parameters bumps the
/// generation so caches from earlier forward passes are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input: Vec<usize>,
    classes: usize,
    layers: Vec<Layer>,
    pub ste: SteOptions,
    generation: u64,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    layers: Vec<LayerCache>,
    batch: usize,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// One tensor per entry of [`Network::params`], same order and shapes.
    pub params: Vec<Tensor>,
    pub input: Tensor,
}

impl Network {
    pub fn init(spec: &NetworkSpec, latent_init: LatentInit, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layers
            .iter()
            .map(|l| Layer::init(l, latent_init, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            input: spec.input.clone(),
            classes: spec.classes,
            layers,
            ste: SteOptions::default(),
            generation: 0,
        })
    }

    pub fn from_layers(input: Vec<usize>, classes: usize, layers: Vec<Layer>) -> Result<Self> {
        let net = Self {
            input,
            classes,
            layers,
            ste: SteOptions::default(),
            generation: 0,
        };
        net.spec().validate()?;
        Ok(net)
    }

    pub fn spec(&self) -> NetworkSpec {
        NetworkSpec {
            input: self.input.clone(),
            classes: self.classes,
            layers: self.layers.iter().map(Layer::spec).collect(),
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut Vec<Layer> {
        self.generation += 1;
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    pub fn params(&self) -> Vec<(&Tensor, ParamKind)> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<(&mut Tensor, ParamKind)> {
        self.generation += 1;
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.input.len() + 1 || x.shape()[1..] != self.input[..] {
            return Err(Error::LayerShape {
                layer: 0,
                message: format!("expected (N, {:?}) input, got {:?}", self.input, x.shape()),
            });
        }
        if x.shape()[0] == 0 {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        Ok(())
    }

    /// Forward pass without touching batch-norm running statistics.
    pub fn evaluate(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, ForwardCache)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, cache) = layer.forward(&h, mode).map_err(|e| match e {
                Error::ShapeMismatch(message) => Error::LayerShape { layer: i, message },
                other => other,
            })?;
            caches.push(cache);
            h = y;
        }
        Ok((
            h,
            ForwardCache {
                generation: self.generation,
                layers: caches,
                batch: x.shape()[0],
            },
        ))
    }

    /// Forward pass; in training mode batch-norm running statistics are
    /// updated from the batch.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, ForwardCache)> {
        let (y, cache) = self.evaluate(x, mode)?;
        if mode == Mode::Train {
            for (layer, c) in self.layers.iter_mut().zip(&cache.layers) {
                if let Layer::BatchNorm(bn) = layer {
                    bn.update_running(c);
                }
            }
        }
        Ok((y, cache))
    }

    /// Logits in evaluation mode.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.evaluate(x, Mode::Eval).map(|(y, _)| y)
    }

    pub fn backward(&self, cache: &ForwardCache, grad: &Tensor) -> Result<Gradients> {
        if cache.generation != self.generation || cache.layers.len() != self.layers.len() {
            return Err(Error::StaleCache);
        }
        if grad.shape() != [cache.batch, self.classes] {
            return Err(Error::ShapeMismatch(format!(
                "loss gradient {:?}, expected [{}, {}]",
                grad.shape(),
                cache.batch,
                self.classes
            )));
        }
        let mut per_layer = Vec::with_capacity(self.layers.len());
        let mut g = grad.clone();
        for (layer, c) in self.layers.iter().zip(&cache.layers).rev() {
            let (gx, gp) = layer.backward(c, &g, self.ste)?;
            per_layer.push(gp);
            g = gx;
        }
        per_layer.reverse();
        Ok(Gradients {
            params: per_layer.into_iter().flatten().collect(),
            input: g,
        })
    }

    pub fn quantized_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.weights().is_some_and(|w| w.provider().is_quantized()))
            .map(|(i, _)| i)
            .collect()
    }

    /// Replaces the layers from `index` on (used to attach a fresh head).
    pub fn replace_tail(&mut self, index: usize, classes: usize, tail: Vec<Layer>) -> Result<()> {
        let mut layers = self.layers[..index.min(self.layers.len())].to_vec();
        layers.extend(tail);
        let candidate = Network::from_layers(self.input.clone(), classes, layers)?;
        self.layers = candidate.layers;
        self.classes = classes;
        self.generation += 1;
        Ok(())
    }

    /// Freshly initialized layers for `specs`, to pass to `replace_tail`.
    pub fn init_tail(specs: &[LayerSpec], latent_init: LatentInit, rng: &mut impl Rng) -> Result<Vec<Layer>> {
        specs.iter().map(|s| Layer::init(s, latent_init, rng)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::WeightProvider;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> NetworkSpec {
        NetworkSpec {
            input: vec![2],
            classes: 2,
            layers: vec![LayerSpec::Linear {
                in_features: 2,
                out_features: 2,
                bias: true,
                weights: WeightProvider::FullPrecision,
            }],
        }
    }

    #[test]
    fn stale_cache_rejected() {
        let mut net = Network::init(&spec(), LatentInit::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = Tensor::filled(&[3, 2], 1.0);
        let (_, cache) = net.forward(&x, Mode::Train).unwrap();
        net.params_mut()[0].0.data_mut()[0] += 1.0;
        assert!(matches!(net.backward(&cache, &Tensor::zeros(&[3, 2])), Err(Error::StaleCache)));
    }

    #[test]
    fn wrong_input_shape_names_layer() {
        let net = Network::init(&spec(), LatentInit::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(matches!(net.infer(&Tensor::zeros(&[3, 5])), Err(Error::LayerShape { layer: 0, .. })));
    }
}
