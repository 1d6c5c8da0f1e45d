//! Consolidates a run's `metrics.jsonl` into plot-ready CSVs.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::run::{MetricEvent, METRICS_FILE};

pub const COSINE_CSV: &str = "cosine.csv";
pub const TRACE_CSV: &str = "trace.csv";
pub const LOSS_CSV: &str = "loss.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportReport {
    pub cosine_rows: usize,
    pub trace_rows: usize,
    pub loss_rows: usize,
    pub files: Vec<PathBuf>,
}

fn writer(path: &Path, header: &[String]) -> CliResult<csv::Writer<std::fs::File>> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    w.write_record(header).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(w)
}

/// Reads `run_dir/metrics.jsonl` and writes `cosine.csv`, `trace.csv` and
/// `loss.csv` into `out_dir` (default: the run directory).
pub fn run(run_dir: &Path, out_dir: Option<&Path>) -> CliResult<ExportReport> {
    let src = run_dir.join(METRICS_FILE);
    let file = std::fs::File::open(&src).map_err(|e| CliError::Data(format!("{}: {e}", src.display())))?;
    let out = out_dir.unwrap_or(run_dir);
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;

    let mut events = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(&src, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: MetricEvent =
            serde_json::from_str(&line).map_err(|e| CliError::Data(format!("{}:{}: {e}", src.display(), n + 1)))?;
        events.push(ev);
    }
    let (scale, bias_of) = events
        .iter()
        .find_map(|e| match e {
            MetricEvent::Start {
                tracked_layers,
                scale_latents,
                exponent_bias,
            } => Some((*scale_latents, tracked_layers.iter().copied().zip(exponent_bias.iter().copied()).collect::<HashMap<_, _>>())),
            _ => None,
        })
        .ok_or_else(|| CliError::Data(format!("{}: no start record", src.display())))?;

    let strings = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let paths = [out.join(COSINE_CSV), out.join(TRACE_CSV), out.join(LOSS_CSV)];
    let mut cos = writer(&paths[0], &strings(&["layer", "epoch", "cosine"]))?;
    let mut trace_header = strings(&["step", "layer", "index", "exponent_bias", "w_sign"]);
    trace_header.extend((1..=scale).map(|t| format!("w_{t}")));
    trace_header.push("w_shift".into());
    let mut trace = writer(&paths[1], &trace_header)?;
    let mut loss = writer(&paths[2], &strings(&["epoch", "lr", "loss", "train_accuracy", "test_accuracy"]))?;

    let mut counts = (0, 0, 0);
    fn fail(p: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
        move |e| CliError::Data(format!("{}: {e}", p.display()))
    }
    for ev in &events {
        match ev {
            MetricEvent::Start { .. } => {}
            MetricEvent::Cosine { layer, epoch, cosine } => {
                cos.write_record([layer.to_string(), epoch.to_string(), cosine.to_string()])
                    .map_err(fail(&paths[0]))?;
                counts.0 += 1;
            }
            MetricEvent::Trace(r) => {
                let bias = bias_of
                    .get(&r.layer)
                    .ok_or_else(|| CliError::Data(format!("{}: trace of untracked layer {}", src.display(), r.layer)))?;
                let mut rec = vec![
                    r.step.to_string(),
                    r.layer.to_string(),
                    r.index.to_string(),
                    bias.to_string(),
                    r.w_sign.to_string(),
                ];
                rec.extend((0..scale).map(|t| r.w_scale.get(t).map_or(String::new(), |v| v.to_string())));
                rec.push(r.w_shift.to_string());
                trace.write_record(&rec).map_err(fail(&paths[1]))?;
                counts.1 += 1;
            }
            MetricEvent::Epoch {
                epoch,
                lr,
                loss: l,
                train_accuracy,
                test_accuracy,
            } => {
                loss.write_record([
                    epoch.to_string(),
                    lr.to_string(),
                    l.to_string(),
                    train_accuracy.to_string(),
                    test_accuracy.map_or(String::new(), |a| a.to_string()),
                ])
                .map_err(fail(&paths[2]))?;
                counts.2 += 1;
            }
        }
    }
    for (w, p) in [(&mut cos, &paths[0]), (&mut trace, &paths[1]), (&mut loss, &paths[2])] {
        w.flush().map_err(|e| CliError::io(p, e))?;
    }
    Ok(ExportReport {
        cosine_rows: counts.0,
        trace_rows: counts.1,
        loss_rows: counts.2,
        files: paths.to_vec(),
    })
}
