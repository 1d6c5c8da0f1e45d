use denseshift::kernel::{bench, BenchReport};

use crate::error::CliResult;

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub bits: u8,
    pub length: usize,
    pub trials: usize,
    pub zero_fraction: Option<f64>,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            bits: 4,
            length: 4096,
            trials: 1000,
            zero_fraction: None,
            seed: 0,
        }
    }
}

pub fn run(opts: &BenchOptions) -> CliResult<BenchReport> {
    Ok(bench(opts.bits, opts.length, opts.trials, opts.zero_fraction, opts.seed)?)
}
