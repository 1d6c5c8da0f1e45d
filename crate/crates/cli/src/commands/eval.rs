use std::path::{Path, PathBuf};

use denseshift::kernel::PackedNetwork;
use denseshift::nn::{accuracy, argmax_rows, predict};
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::error::{CliError, CliResult};
use crate::model_file::ModelFile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelChoice {
    /// Floating-point engine.
    #[default]
    Float,
    /// Packed shift codes on 8-bit activations.
    Packed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Test,
    Train,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub model: PathBuf,
    /// Replaces the data section stored in the model.
    pub data: Option<DataConfig>,
    pub data_dir: Option<PathBuf>,
    pub split: Split,
    pub kernel: KernelChoice,
    pub confusion: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub kernel: KernelChoice,
    pub accuracy: f64,
    /// `confusion[label][prediction]`
    pub confusion: Vec<Vec<usize>>,
}

const BATCH: usize = 500;

pub fn run(opts: &EvalOptions) -> CliResult<EvalReport> {
    let model = ModelFile::load(&opts.model)?;
    let mut data = opts
        .data
        .clone()
        .or_else(|| model.header.data.clone())
        .ok_or_else(|| CliError::Config("model records no dataset; pass one explicitly".into()))?;
    if let Some(dir) = &opts.data_dir {
        data.dir = dir.clone();
    }
    let splits = data.load()?;
    let set = match opts.split {
        Split::Test => splits.test,
        Split::Train => splits.train,
    };
    if set.is_empty() {
        return Err(CliError::Data("evaluation set is empty".into()));
    }
    let net = &model.network;
    if set.sample_shape() != net.input_shape() || set.classes() != net.classes() {
        return Err(CliError::Config(format!(
            "model takes {:?} with {} classes, data has {:?} with {}",
            net.input_shape(),
            net.classes(),
            set.sample_shape(),
            set.classes()
        )));
    }
    let set = set.with_normalization(model.header.normalization.clone())?;
    let predictions = predict_with(&model, &set, opts.kernel)?;
    let k = net.classes();
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &l) in predictions.iter().zip(set.labels()) {
        confusion[l][p] += 1;
    }
    if let Some(path) = &opts.confusion {
        write_confusion(path, &confusion)?;
    }
    Ok(EvalReport {
        samples: set.len(),
        kernel: opts.kernel,
        accuracy: accuracy(&predictions, set.labels()),
        confusion,
    })
}

/// Top-1 predictions through the chosen kernel.
pub fn predict_with(model: &ModelFile, set: &denseshift::data::Dataset, kernel: KernelChoice) -> CliResult<Vec<usize>> {
    let net = &model.network;
    Ok(match kernel {
        KernelChoice::Float => predict(net, set, BATCH)?,
        KernelChoice::Packed => {
            let packed = PackedNetwork::new(net)?;
            let order: Vec<usize> = (0..set.len()).collect();
            let mut out = Vec::with_capacity(set.len());
            for chunk in order.chunks(BATCH) {
                out.extend(argmax_rows(&packed.infer(&set.batch(chunk)?.images)?));
            }
            out
        }
    })
}

fn write_confusion(path: &Path, m: &[Vec<usize>]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut header = vec!["label".to_string()];
    header.extend((0..m.len()).map(|p| format!("pred_{p}")));
    let csv_err = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    w.write_record(&header).map_err(csv_err)?;
    for (label, row) in m.iter().enumerate() {
        let mut rec = vec![label.to_string()];
        rec.extend(row.iter().map(|c| c.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}
