//! Initialization × epoch-budget grid over one base configuration.

use std::path::PathBuf;

use denseshift::reparam::LatentInit;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::run::run_on;

pub const SWEEP_CSV: &str = "sweep.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub init: String,
    pub epochs: usize,
    pub test_accuracy: f64,
    pub final_loss: Option<f64>,
    pub model_crc64: String,
    pub run_dir: PathBuf,
}

pub fn init_name(init: &LatentInit) -> String {
    match init {
        LatentInit::Kaiming => "kaiming".into(),
        LatentInit::LowVariance { sigma } => format!("low_variance_{sigma}"),
    }
}

/// Trains one run per `(init, epochs)` pair under `base.output_dir/<init>-e<epochs>`
/// and writes `sweep.csv` next to them.
pub fn run(base: &RunConfig, inits: &[LatentInit], epochs: &[usize]) -> CliResult<Vec<SweepRow>> {
    if inits.is_empty() || epochs.is_empty() {
        return Err(CliError::Config("sweep needs at least one init and one epoch count".into()));
    }
    let splits = base.data.load()?;
    let mut rows = Vec::new();
    for init in inits {
        for &e in epochs {
            let mut cfg = base.clone();
            cfg.init = *init;
            cfg.train.epochs = e;
            cfg.output_dir = base.output_dir.join(format!("{}-e{e}", init_name(init)));
            cfg.validate()?;
            let out = run_on(&cfg, &splits)?;
            rows.push(SweepRow {
                init: init_name(init),
                epochs: e,
                test_accuracy: out.summary.test_accuracy,
                final_loss: out.summary.final_loss,
                model_crc64: out.summary.model_crc64,
                run_dir: cfg.output_dir,
            });
        }
    }
    let path = base.output_dir.join(SWEEP_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    for row in &rows {
        w.serialize(row).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(rows)
}
