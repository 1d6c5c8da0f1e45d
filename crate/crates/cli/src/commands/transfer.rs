//! Pretrain a backbone on one class subset, attach a freshly initialized
//! head, and finetune end to end on a disjoint subset, once per head
//! initialization.

use denseshift::data::transfer_split;
use denseshift::freeze::{filter_avg_cosine, FilterSnapshot, SnapshotSource};
use denseshift::nn::{Layer, Network, TrainConfig};
use denseshift::reparam::LatentInit;
use denseshift::Error;
use serde::{Deserialize, Serialize};

use crate::commands::sweep::init_name;
use crate::commands::write_json;
use crate::config::{RunConfig, Splits};
use crate::error::{CliError, CliResult};
use crate::run::{run_on, train_network};

pub const TRANSFER_JSON: &str = "transfer.json";

#[derive(Debug, Clone)]
pub struct TransferOptions {
    pub pretrain_classes: Vec<usize>,
    pub finetune_classes: Vec<usize>,
    /// Finetuning schedule; `base.train` drives pretraining.
    pub finetune: TrainConfig,
    pub head_inits: Vec<LatentInit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneResult {
    pub head_init: String,
    pub test_accuracy: f64,
    pub non_finite: bool,
    pub losses: Vec<f64>,
    /// Filter cosine of each backbone layer between the pretrained and the
    /// finetuned weights.
    pub backbone_cosine: Vec<(usize, f64)>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub pretrain_accuracy: f64,
    pub head_start: usize,
    pub runs: Vec<FinetuneResult>,
}

/// Index of the first head layer: everything after the last flatten, or
/// the last weighted layer when there is no flatten.
pub fn head_start(net: &Network) -> usize {
    let layers = net.layers();
    layers
        .iter()
        .rposition(|l| matches!(l, Layer::Flatten))
        .map(|i| i + 1)
        .or_else(|| layers.iter().rposition(|l| l.weights().is_some()))
        .unwrap_or(0)
}

pub fn run(base: &RunConfig, opts: &TransferOptions) -> CliResult<TransferReport> {
    let splits = base.data.load()?;
    let (pre_train, fine_train) = transfer_split(&splits.train, &opts.pretrain_classes, &opts.finetune_classes)?;
    let (pre_test, fine_test) = transfer_split(&splits.test, &opts.pretrain_classes, &opts.finetune_classes)?;

    let mut pre_cfg = base.clone();
    pre_cfg.output_dir = base.output_dir.join("pretrain");
    pre_cfg.data.classes = opts.pretrain_classes.clone();
    let pre = run_on(
        &pre_cfg,
        &Splits {
            train: pre_train,
            test: pre_test,
        },
    )?;
    let backbone = pre.network;
    let start = head_start(&backbone);
    let head_specs: Vec<_> = {
        let mut spec = base.network_spec(opts.finetune_classes.len())?;
        spec.layers.split_off(start)
    };
    let fine = Splits {
        train: fine_train,
        test: fine_test,
    };
    let mut runs = Vec::new();
    for (k, init) in opts.head_inits.iter().enumerate() {
        let mut net = backbone.clone();
        let mut rng = denseshift::nn::train::init_rng(opts.finetune.seed.wrapping_add(1000 + k as u64));
        let head = Network::init_tail(&head_specs, *init, &mut rng)?;
        net.replace_tail(start, opts.finetune_classes.len(), head)?;
        let mut cfg = base.clone();
        cfg.train = opts.finetune.clone();
        cfg.data.classes = opts.finetune_classes.clone();
        cfg.output_dir = base.output_dir.join(format!("finetune-{}", init_name(init)));
        let before: Vec<FilterSnapshot> = backbone_layers(&backbone, start)
            .iter()
            .map(|&l| FilterSnapshot::capture(&backbone, l, 0, SnapshotSource::Effective))
            .collect::<denseshift::Result<_>>()?;
        let result = match train_network(&cfg, net, &fine, &cfg.output_dir) {
            Ok(out) => {
                let mut cos = Vec::new();
                for b in &before {
                    let after = FilterSnapshot::capture(&out.network, b.layer, 1, SnapshotSource::Effective)?;
                    cos.push((b.layer, filter_avg_cosine(b, &after)?));
                }
                FinetuneResult {
                    head_init: init_name(init),
                    test_accuracy: out.summary.test_accuracy,
                    non_finite: false,
                    losses: out.history.iter().map(|s| s.mean_loss).collect(),
                    backbone_cosine: cos,
                    error: None,
                }
            }
            Err(CliError::Core(e @ (Error::NonFinite { .. } | Error::NonFiniteGradient))) => FinetuneResult {
                head_init: init_name(init),
                test_accuracy: 1.0 / opts.finetune_classes.len() as f64,
                non_finite: true,
                losses: Vec::new(),
                backbone_cosine: Vec::new(),
                error: Some(e.to_string()),
            },
            Err(e) => return Err(e),
        };
        runs.push(result);
    }
    let report = TransferReport {
        pretrain_accuracy: pre.summary.test_accuracy,
        head_start: start,
        runs,
    };
    write_json(&base.output_dir.join(TRANSFER_JSON), &report)?;
    Ok(report)
}

fn backbone_layers(net: &Network, start: usize) -> Vec<usize> {
    net.quantized_layers().into_iter().filter(|&l| l < start).collect()
}
