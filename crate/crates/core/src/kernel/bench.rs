//! Latency micro-benchmark of the two MAC kernels on identical activations.

use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mac::{dot_denseshift, dot_shift, FixedActivations};
use super::pack::PackedWeightBlob;
use crate::error::{Error, Result};
use crate::reparam::{check_bits, scale_gates, ShiftCode};

pub const MIN_TRIALS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Shift,
    #[serde(rename = "denseshift")]
    DenseShift,
}

/// Activations plus the same weights packed for both kernels. Zero
/// positions of the Shift blob hold an arbitrary nonzero code in the
/// DenseShift blob; elsewhere both carry the same code.
#[derive(Debug, Clone)]
pub struct BenchData {
    pub activations: FixedActivations,
    pub dense: PackedWeightBlob,
    pub shift: PackedWeightBlob,
    pub zero_fraction: f64,
}

impl BenchData {
    /// `zero_fraction` defaults to `1/(2^n − 1)`, the share of the zero
    /// value among the `2^n − 1` values of an `n`-bit shift code.
    pub fn generate(bits: u8, length: usize, zero_fraction: Option<f64>, seed: u64) -> Result<Self> {
        check_bits(bits)?;
        let zero_fraction = zero_fraction.unwrap_or(1.0 / f64::from((1u32 << bits) - 1));
        if !(0.0..=1.0).contains(&zero_fraction) {
            return Err(Error::Config(format!("zero_fraction must lie in [0, 1], got {zero_fraction}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..length).map(|_| rng.random::<i8>()).collect();
        // shifts the zero-coded blob can hold
        let top = scale_gates(bits) as u8 - 1;
        let mut dense_codes = Vec::with_capacity(length);
        let mut shift_codes = Vec::with_capacity(length);
        for _ in 0..length {
            let code = ShiftCode::new(rng.random(), rng.random_range(0..=top));
            dense_codes.push(code);
            shift_codes.push((!rng.random_bool(zero_fraction)).then_some(code));
        }
        Ok(Self {
            activations: FixedActivations::new(values, 0),
            dense: PackedWeightBlob::pack(&dense_codes, bits, 0)?,
            shift: PackedWeightBlob::pack_with_zeros(&shift_codes, bits, 0)?,
            zero_fraction,
        })
    }

    fn run(&self, kind: KernelKind) -> Result<i64> {
        match kind {
            KernelKind::Shift => dot_shift(black_box(&self.activations), black_box(&self.shift)),
            KernelKind::DenseShift => dot_denseshift(black_box(&self.activations), black_box(&self.dense)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelStats {
    pub mean_ns: f64,
    pub stddev_ns: f64,
    /// Wrapping sum of every timed result.
    pub checksum: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub bits: u8,
    pub length: usize,
    pub trials: usize,
    pub warmup: usize,
    pub zero_fraction: f64,
    pub shift: KernelStats,
    pub denseshift: KernelStats,
    /// Shift mean latency over DenseShift mean latency.
    pub ratio: f64,
}

fn stats(samples: &[f64], checksum: i64) -> KernelStats {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    KernelStats {
        mean_ns: mean,
        stddev_ns: var.sqrt(),
        checksum,
    }
}

/// Times both kernels `trials` times each after `warmup` untimed calls,
/// alternating which kernel goes first every trial.
pub fn bench_kernels(data: &BenchData, trials: usize, warmup: usize) -> Result<(KernelStats, KernelStats)> {
    if trials < MIN_TRIALS {
        return Err(Error::Config(format!("at least {MIN_TRIALS} trials required, got {trials}")));
    }
    if data.activations.is_empty() {
        return Err(Error::Config("bench length must be at least 1".into()));
    }
    for _ in 0..warmup {
        black_box(data.run(KernelKind::Shift)?);
        black_box(data.run(KernelKind::DenseShift)?);
    }
    let mut times = [Vec::with_capacity(trials), Vec::with_capacity(trials)];
    let mut sums = [0i64; 2];
    for t in 0..trials {
        let order = if t % 2 == 0 {
            [KernelKind::Shift, KernelKind::DenseShift]
        } else {
            [KernelKind::DenseShift, KernelKind::Shift]
        };
        for kind in order {
            let slot = usize::from(kind == KernelKind::DenseShift);
            let start = Instant::now();
            let r = black_box(data.run(kind)?);
            times[slot].push(start.elapsed().as_nanos() as f64);
            sums[slot] = sums[slot].wrapping_add(r);
        }
    }
    Ok((stats(&times[0], sums[0]), stats(&times[1], sums[1])))
}

pub fn bench(bits: u8, length: usize, trials: usize, zero_fraction: Option<f64>, seed: u64) -> Result<BenchReport> {
    if length == 0 {
        return Err(Error::Config("bench length must be at least 1".into()));
    }
    let data = BenchData::generate(bits, length, zero_fraction, seed)?;
    let warmup = (trials / 10).max(10);
    let (shift, denseshift) = bench_kernels(&data, trials, warmup)?;
    Ok(BenchReport {
        bits,
        length,
        trials,
        warmup,
        zero_fraction: data.zero_fraction,
        shift,
        denseshift,
        ratio: shift.mean_ns / denseshift.mean_ns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trial_floor() {
        assert!(bench(3, 64, 29, None, 0).is_err());
        assert!(bench(3, 64, 30, None, 0).is_ok());
        assert!(bench(3, 0, 30, None, 0).is_err());
    }

    #[test]
    fn no_zeros_means_equal_checksums() {
        let r = bench(3, 1000, 30, Some(0.0), 5).unwrap();
        assert_eq!(r.shift.checksum, r.denseshift.checksum);
        let r = bench(3, 1000, 30, Some(0.5), 5).unwrap();
        assert_ne!(r.shift.checksum, r.denseshift.checksum);
    }
}
