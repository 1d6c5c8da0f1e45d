use std::path::PathBuf;

use denseshift::convert::{convert_network, verify_equivalence, ConversionReport, EquivalenceReport, ProbeInputs};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::model_file::ModelFile;

#[derive(Debug, Clone)]
pub struct ConvertOptions {
    pub input: PathBuf,
    pub output: PathBuf,
    pub n_inputs: usize,
    pub tol: f64,
    pub probe: ProbeInputs,
    pub seed: u64,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        Self {
            input: PathBuf::new(),
            output: PathBuf::new(),
            n_inputs: 100,
            tol: 1e-5,
            probe: ProbeInputs::Real,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvertReport {
    pub conversion: ConversionReport,
    pub equivalence: EquivalenceReport,
    pub model_crc64: String,
}

/// Writes the converted model even when the equivalence check fails, then
/// reports the failure as a numeric error.
pub fn run(opts: &ConvertOptions) -> CliResult<ConvertReport> {
    let mut model = ModelFile::load(&opts.input)?;
    if model.network.quantized_layers().is_empty() {
        return Err(CliError::Config(format!(
            "{} is not a shift network: it has no quantized layers",
            opts.input.display()
        )));
    }
    let (converted, conversion) = convert_network(&model.network)?;
    let equivalence = verify_equivalence(&model.network, &converted, opts.n_inputs, opts.tol, opts.probe, opts.seed)?;
    model.network = converted;
    model.header.conversion = Some(conversion.clone());
    model.header.equivalence = Some(equivalence.clone());
    let crc = model.save(&opts.output)?;
    if !equivalence.pass {
        return Err(CliError::Numeric(format!(
            "converted network differs by {} (> {})",
            equivalence.max_abs_diff, equivalence.tol
        )));
    }
    Ok(ConvertReport {
        conversion,
        equivalence,
        model_crc64: format!("{crc:016x}"),
    })
}
