use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::Mode;
use super::loss::{argmax_rows, softmax_cross_entropy};
use super::network::Network;
use super::optim::{Schedule, Sgd};
use super::spec::NetworkSpec;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::reparam::LatentInit;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: Schedule,
    /// Whether weight decay also applies to latent parameters.
    pub decay_latents: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            base_lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            seed: 42,
            schedule: Schedule::Cosine,
            decay_latents: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be ≥ 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

/// Hooks called by [`Trainer::fit`]. `epoch` is 1-based in `on_epoch_end`;
/// `on_start` sees the network before any update.
pub trait Observer {
    fn on_start(&mut self, _net: &Network) -> Result<()> {
        Ok(())
    }
    fn on_step(&mut self, _step: u64, _net: &Network) -> Result<()> {
        Ok(())
    }
    fn on_epoch_end(&mut self, _stats: &EpochStats, _net: &Network) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl Observer for NoObserver {}

/// Seed streams: network init and data shuffling draw from separate
/// streams of the same run seed.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

pub fn build_network(spec: &NetworkSpec, latent_init: LatentInit, seed: u64) -> Result<Network> {
    Network::init(spec, latent_init, &mut init_rng(seed))
}

pub struct Trainer {
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn fit(&self, net: &mut Network, train: &Dataset, observer: &mut dyn Observer) -> Result<Vec<EpochStats>> {
        if train.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        if train.sample_shape() != net.input_shape() || train.classes() != net.classes() {
            return Err(Error::Data(format!(
                "dataset ({:?}, {} classes) does not fit network ({:?}, {} classes)",
                train.sample_shape(),
                train.classes(),
                net.input_shape(),
                net.classes()
            )));
        }
        let cfg = &self.config;
        let mut sgd = Sgd::new(net, cfg.momentum, cfg.weight_decay, cfg.decay_latents)?;
        let mut rng = shuffle_rng(cfg.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut step = 0u64;
        let mut history = Vec::with_capacity(cfg.epochs);
        observer.on_start(net)?;
        for epoch in 0..cfg.epochs {
            let lr = cfg.schedule.lr_at(cfg.base_lr, epoch, cfg.epochs)?;
            order.shuffle(&mut rng);
            let (mut loss_sum, mut correct) = (0.0, 0usize);
            for chunk in order.chunks(cfg.batch_size) {
                let batch = train.batch(chunk)?;
                let (logits, cache) = net.forward(&batch.images, Mode::Train)?;
                let (loss, grad) = softmax_cross_entropy(&logits, &batch.labels)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        what: "loss",
                        epoch: epoch + 1,
                        step,
                    });
                }
                let grads = net.backward(&cache, &grad)?;
                sgd.step(net, &grads.params, lr).map_err(|e| match e {
                    Error::NonFiniteGradient => Error::NonFinite {
                        what: "gradient",
                        epoch: epoch + 1,
                        step,
                    },
                    other => other,
                })?;
                step += 1;
                loss_sum += loss * chunk.len() as f64;
                correct += argmax_rows(&logits).iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
                observer.on_step(step, net)?;
            }
            let stats = EpochStats {
                epoch: epoch + 1,
                lr,
                mean_loss: loss_sum / train.len() as f64,
                train_accuracy: correct as f64 / train.len() as f64,
            };
            observer.on_epoch_end(&stats, net)?;
            history.push(stats);
        }
        Ok(history)
    }
}

/// Evaluation-mode predictions over a whole dataset.
pub fn predict(net: &Network, data: &Dataset, batch_size: usize) -> Result<Vec<usize>> {
    if data.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    if data.sample_shape() != net.input_shape() {
        return Err(Error::Data(format!(
            "dataset samples {:?} do not fit network input {:?}",
            data.sample_shape(),
            net.input_shape()
        )));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk)?;
        out.extend(argmax_rows(&net.infer(&batch.images)?));
    }
    Ok(out)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    predictions.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

pub fn evaluate_accuracy(net: &Network, data: &Dataset, batch_size: usize) -> Result<f64> {
    Ok(accuracy(&predict(net, data, batch_size)?, data.labels()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::nn::spec::{LayerSpec, WeightProvider};

    fn blob_spec(weights: WeightProvider) -> NetworkSpec {
        NetworkSpec {
            input: vec![4],
            classes: 3,
            layers: vec![
                LayerSpec::Linear {
                    in_features: 4,
                    out_features: 8,
                    bias: true,
                    weights: WeightProvider::FullPrecision,
                },
                LayerSpec::Relu,
                LayerSpec::Linear {
                    in_features: 8,
                    out_features: 3,
                    bias: true,
                    weights,
                },
            ],
        }
    }

    #[test]
    fn loss_decreases_on_separable_blobs() {
        let data = synthetic_blobs(3, 4, 40, 3).unwrap();
        let spec = NetworkSpec {
            input: vec![4],
            classes: 3,
            layers: vec![LayerSpec::Linear {
                in_features: 4,
                out_features: 3,
                bias: true,
                weights: WeightProvider::FullPrecision,
            }],
        };
        let mut net = build_network(&spec, LatentInit::default(), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            base_lr: 0.01,
            batch_size: 10,
            ..TrainConfig::default()
        };
        let hist = Trainer::new(cfg).unwrap().fit(&mut net, &data, &mut NoObserver).unwrap();
        for w in hist.windows(2) {
            assert!(w[1].mean_loss < w[0].mean_loss, "{hist:?}");
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let data = synthetic_blobs(3, 4, 20, 3).unwrap();
        let spec = blob_spec(WeightProvider::DenseShift {
            bits: 3,
            exponent_bias: -3,
        });
        let run = || {
            let mut net = build_network(&spec, LatentInit::default(), 9).unwrap();
            let cfg = TrainConfig {
                epochs: 3,
                batch_size: 16,
                base_lr: 0.1,
                seed: 9,
                ..TrainConfig::default()
            };
            Trainer::new(cfg).unwrap().fit(&mut net, &data, &mut NoObserver).unwrap();
            net
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_epochs_leaves_initialization() {
        let data = synthetic_blobs(3, 4, 5, 3).unwrap();
        let spec = blob_spec(WeightProvider::FullPrecision);
        let mut net = build_network(&spec, LatentInit::default(), 2).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(Trainer::new(cfg).unwrap().fit(&mut net, &data, &mut NoObserver).unwrap().is_empty());
        assert_eq!(net, build_network(&spec, LatentInit::default(), 2).unwrap());
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        };
        assert!(Trainer::new(cfg).is_err());
    }
}
