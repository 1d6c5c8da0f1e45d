//! A training run: builds the network from a `RunConfig`, trains it while
//! logging per-epoch metrics, filter cosines and latent traces to
//! `metrics.jsonl`, then writes the model and a summary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use denseshift::data::Dataset;
use denseshift::freeze::{filter_avg_cosine, record_trace, sample_indices, FilterSnapshot, TraceRecord};
use denseshift::nn::{build_network, evaluate_accuracy, EpochStats, Network, Observer, Trainer};
use serde::{Deserialize, Serialize};

use crate::config::{MetricsConfig, RunConfig, Splits};
use crate::error::{CliError, CliResult};
use crate::model_file::ModelFile;

pub const MODEL_FILE: &str = "model.dsnm";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";

const EVAL_BATCH: usize = 500;
const MAX_TRACED: usize = 64;

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MetricEvent {
    /// Run metadata; `bits` per tracked layer lets traces be replayed.
    Start { tracked_layers: Vec<usize>, scale_latents: usize, exponent_bias: Vec<i32> },
    Epoch {
        epoch: usize,
        lr: f64,
        loss: f64,
        train_accuracy: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_accuracy: Option<f64>,
    },
    Cosine { layer: usize, epoch: usize, cosine: f64 },
    Trace(TraceRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCosine {
    pub layer: usize,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: f64,
    /// Filter-averaged cosine to initialization after the last epoch.
    pub cosine: Vec<LayerCosine>,
    pub model_crc64: String,
}

impl RunSummary {
    pub fn line(&self) -> String {
        let cos: Vec<String> = self.cosine.iter().map(|c| format!("layer{}={:.4}", c.layer, c.cosine)).collect();
        format!(
            "epochs={} test_accuracy={:.4} final_loss={} cosine[{}] model_crc64={}",
            self.epochs,
            self.test_accuracy,
            self.final_loss.map_or("-".into(), |l| format!("{l:.4}")),
            cos.join(" "),
            self.model_crc64
        )
    }

    /// Mean of the final cosines over `layers`.
    pub fn mean_cosine(&self, layers: &[usize]) -> Option<f64> {
        let picked: Vec<f64> = self.cosine.iter().filter(|c| layers.contains(&c.layer)).map(|c| c.cosine).collect();
        (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
    }
}

pub struct RunOutput {
    pub summary: RunSummary,
    pub network: Network,
    pub history: Vec<EpochStats>,
    pub dir: PathBuf,
}

/// Quantized layers, or every weighted layer of a full-precision network.
pub fn tracked_layers(net: &Network) -> Vec<usize> {
    let q = net.quantized_layers();
    if !q.is_empty() {
        return q;
    }
    net.layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.weights().is_some())
        .map(|(i, _)| i)
        .collect()
}

pub(crate) struct MetricsLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsLog {
    pub(crate) fn create(path: &Path) -> CliResult<Self> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub(crate) fn write(&mut self, event: &MetricEvent) -> CliResult<()> {
        let line = serde_json::to_string(event).map_err(|e| CliError::Config(e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| CliError::io(&self.path, e))
    }

    fn flush(&mut self) -> CliResult<()> {
        self.out.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

/// Observer writing the run's metric events.
pub struct Recorder<'a> {
    log: MetricsLog,
    metrics: MetricsConfig,
    tracked: Vec<usize>,
    samples: Vec<(usize, usize)>,
    init: Vec<FilterSnapshot>,
    last: Vec<LayerCosine>,
    test: Option<&'a Dataset>,
    error: Option<CliError>,
}

impl<'a> Recorder<'a> {
    pub fn new(path: &Path, metrics: MetricsConfig, net: &Network, test: Option<&'a Dataset>) -> CliResult<Self> {
        let tracked = tracked_layers(net);
        let samples = if metrics.trace_every == 0 || tracked.is_empty() {
            Vec::new()
        } else {
            let per = (metrics.trace_samples.min(MAX_TRACED) / tracked.len()).max(1);
            tracked
                .iter()
                .flat_map(|&l| {
                    let len = net.layers()[l].weights().map_or(0, |w| w.shape().iter().product());
                    sample_indices(len, per).into_iter().map(move |i| (l, i))
                })
                .take(MAX_TRACED)
                .collect()
        };
        Ok(Self {
            log: MetricsLog::create(path)?,
            metrics,
            tracked,
            samples,
            init: Vec::new(),
            last: Vec::new(),
            test,
            error: None,
        })
    }

    fn snapshots(&self, net: &Network, epoch: usize) -> denseshift::Result<Vec<FilterSnapshot>> {
        self.tracked
            .iter()
            .map(|&l| FilterSnapshot::capture(net, l, epoch, self.metrics.snapshot_source))
            .collect()
    }

    fn keep<T>(&mut self, r: CliResult<T>) -> denseshift::Result<()> {
        if let Err(e) = r {
            let msg = e.to_string();
            self.error = Some(e);
            return Err(denseshift::Error::Config(msg));
        }
        Ok(())
    }

    pub fn finish(mut self) -> CliResult<Vec<LayerCosine>> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.log.flush()?;
        Ok(self.last)
    }
}

impl Observer for Recorder<'_> {
    fn on_start(&mut self, net: &Network) -> denseshift::Result<()> {
        self.init = self.snapshots(net, 0)?;
        self.last = self.tracked.iter().map(|&layer| LayerCosine { layer, cosine: 1.0 }).collect();
        let (scale_latents, exponent_bias) = trace_layout(net, &self.tracked);
        let r = self.log.write(&MetricEvent::Start {
            tracked_layers: self.tracked.clone(),
            scale_latents,
            exponent_bias,
        });
        self.keep(r)
    }

    fn on_step(&mut self, step: u64, net: &Network) -> denseshift::Result<()> {
        if self.samples.is_empty() || step % self.metrics.trace_every != 0 {
            return Ok(());
        }
        for record in record_trace(net, &self.samples, step)? {
            let r = self.log.write(&MetricEvent::Trace(record));
            self.keep(r)?;
        }
        Ok(())
    }

    fn on_epoch_end(&mut self, stats: &EpochStats, net: &Network) -> denseshift::Result<()> {
        let test_accuracy = match (self.metrics.eval_every_epoch, self.test) {
            (true, Some(t)) => Some(evaluate_accuracy(net, t, EVAL_BATCH)?),
            _ => None,
        };
        let r = self.log.write(&MetricEvent::Epoch {
            epoch: stats.epoch,
            lr: stats.lr,
            loss: stats.mean_loss,
            train_accuracy: stats.train_accuracy,
            test_accuracy,
        });
        self.keep(r)?;
        let current = self.snapshots(net, stats.epoch)?;
        let mut last = Vec::with_capacity(current.len());
        let init = std::mem::take(&mut self.init);
        for (init, cur) in init.iter().zip(&current) {
            let cosine = filter_avg_cosine(init, cur)?;
            let r = self.log.write(&MetricEvent::Cosine {
                layer: cur.layer,
                epoch: stats.epoch,
                cosine,
            });
            self.keep(r)?;
            last.push(LayerCosine { layer: cur.layer, cosine });
        }
        self.init = init;
        self.last = last;
        Ok(())
    }
}

/// Number of scale latents per traced element (the widest tracked layer)
/// and each tracked layer's exponent bias.
fn trace_layout(net: &Network, tracked: &[usize]) -> (usize, Vec<i32>) {
    let mut t = 0;
    let mut biases = Vec::new();
    for &l in tracked {
        match net.layers()[l].weights() {
            Some(denseshift::nn::Weights::DenseShift(lw)) => {
                t = t.max(lw.scale().len());
                biases.push(lw.exponent_bias());
            }
            Some(denseshift::nn::Weights::Quantized { config, .. }) => biases.push(config.exponent_bias),
            _ => biases.push(0),
        }
    }
    (t, biases)
}

/// Trains `net` on `splits` under `cfg`, writing every artifact to `dir`.
pub fn train_network(cfg: &RunConfig, mut net: Network, splits: &Splits, dir: &Path) -> CliResult<RunOutput> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let config_path = dir.join(CONFIG_FILE);
    std::fs::write(&config_path, cfg.to_toml()?).map_err(|e| CliError::io(&config_path, e))?;
    net.ste = cfg.ste;
    let mut recorder = Recorder::new(&dir.join(METRICS_FILE), cfg.metrics.clone(), &net, Some(&splits.test))?;
    let trainer = Trainer::new(cfg.train.clone())?;
    let fitted = trainer.fit(&mut net, &splits.train, &mut recorder);
    let cosine = match fitted {
        Ok(_) => recorder.finish()?,
        Err(e) => {
            // keep whatever was logged before the failure
            let _ = recorder.finish();
            return Err(e.into());
        }
    };
    let history = fitted.expect("checked above");
    let test_accuracy = evaluate_accuracy(&net, &splits.test, EVAL_BATCH)?;
    let model = ModelFile::new(net, splits.train.normalization().clone(), Some(cfg.data.clone()));
    let crc = model.save(&dir.join(MODEL_FILE))?;
    let summary = RunSummary {
        epochs: history.len(),
        final_loss: history.last().map(|s| s.mean_loss),
        train_accuracy: history.last().map(|s| s.train_accuracy),
        test_accuracy,
        cosine,
        model_crc64: format!("{crc:016x}"),
    };
    let summary_path = dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::write(&summary_path, text).map_err(|e| CliError::io(&summary_path, e))?;
    Ok(RunOutput {
        summary,
        network: model.network,
        history,
        dir: dir.to_path_buf(),
    })
}

/// Loads the configured data, builds the network and trains it.
pub fn run(cfg: &RunConfig) -> CliResult<RunOutput> {
    let splits = cfg.data.load()?;
    run_on(cfg, &splits)
}

/// As [`run`] on already loaded data.
pub fn run_on(cfg: &RunConfig, splits: &Splits) -> CliResult<RunOutput> {
    let spec = cfg.network_spec(splits.train.classes())?;
    let net = build_network(&spec, cfg.init, cfg.train.seed)?;
    train_network(cfg, net, splits, &cfg.output_dir)
}
