//! Weight-freezing diagnostics: filter-averaged cosine similarity between a
//! layer's initial and current weights, and per-step latent traces.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Network, Weights};
use crate::reparam::{element_shift, LatentWeights};
use crate::tensor::Tensor;

/// Which tensor a snapshot reads from a quantized layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotSource {
    /// The tensor that multiplies activations (discrete for quantized layers).
    #[default]
    Effective,
    /// The real-valued latent (`w_sign` for DenseShift layers).
    Latent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterSnapshot {
    pub layer: usize,
    pub epoch: usize,
    /// One flattened vector per output filter/row.
    pub filters: Vec<Vec<f64>>,
}

impl FilterSnapshot {
    pub fn from_tensor(layer: usize, epoch: usize, weights: &Tensor) -> Self {
        Self {
            layer,
            epoch,
            filters: weights.data().chunks(weights.row_len().max(1)).map(<[f64]>::to_vec).collect(),
        }
    }

    pub fn capture(net: &Network, layer: usize, epoch: usize, source: SnapshotSource) -> Result<Self> {
        let weights = net
            .layers()
            .get(layer)
            .and_then(|l| l.weights())
            .ok_or_else(|| Error::Config(format!("layer {layer} has no weights")))?;
        let tensor = match (source, weights) {
            (SnapshotSource::Effective, w) => w.effective(),
            (SnapshotSource::Latent, Weights::Full(t)) => t.clone(),
            (SnapshotSource::Latent, Weights::DenseShift(l)) => l.sign().clone(),
            (SnapshotSource::Latent, Weights::Quantized { latent, .. }) => latent.clone(),
        };
        Ok(Self::from_tensor(layer, epoch, &tensor))
    }
}

/// Mean over filters of `cos(init_f, cur_f)`; a filter with zero norm on
/// either side contributes 0.
pub fn filter_avg_cosine(init: &FilterSnapshot, cur: &FilterSnapshot) -> Result<f64> {
    if init.layer != cur.layer
        || init.filters.len() != cur.filters.len()
        || init.filters.iter().zip(&cur.filters).any(|(a, b)| a.len() != b.len())
    {
        return Err(Error::ShapeMismatch(format!(
            "snapshots of layer {} ({} filters) and layer {} ({} filters) differ in shape",
            init.layer,
            init.filters.len(),
            cur.layer,
            cur.filters.len()
        )));
    }
    if init.filters.is_empty() {
        return Err(Error::ShapeMismatch("snapshot has no filters".into()));
    }
    let sum: f64 = init
        .filters
        .iter()
        .zip(&cur.filters)
        .map(|(a, b)| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                (dot / (na * nb)).clamp(-1.0, 1.0)
            }
        })
        .sum();
    Ok(sum / init.filters.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub layer: usize,
    pub index: usize,
    pub w_sign: f64,
    /// `w_1..w_T`; empty for layers without scale latents.
    pub w_scale: Vec<f64>,
    pub w_shift: f64,
}

impl TraceRecord {
    /// Materialized weight recomputed from the recorded latents.
    pub fn replay(&self, exponent_bias: i32) -> f64 {
        let s = element_shift(self.w_scale.iter().copied());
        let magnitude = 2f64.powi(i32::from(s) + exponent_bias);
        if self.w_sign > 0.0 {
            magnitude
        } else {
            -magnitude
        }
    }
}

/// Evenly spaced element indices, at most `count` of them.
pub fn sample_indices(len: usize, count: usize) -> Vec<usize> {
    let count = count.min(len);
    (0..count).map(|i| i * len / count).collect()
}

/// One record per sampled `(layer, index)` pair. DenseShift layers record
/// their latents; other layers record the real latent as `w_sign`.
pub fn record_trace(net: &Network, samples: &[(usize, usize)], step: u64) -> Result<Vec<TraceRecord>> {
    samples
        .iter()
        .map(|&(layer, index)| {
            let weights = net
                .layers()
                .get(layer)
                .and_then(|l| l.weights())
                .ok_or_else(|| Error::Config(format!("layer {layer} has no weights")))?;
            let check = |len: usize| {
                if index < len {
                    Ok(())
                } else {
                    Err(Error::Config(format!("trace index {index} out of range {len} in layer {layer}")))
                }
            };
            let record = match weights {
                Weights::DenseShift(l) => {
                    check(l.len())?;
                    dense_shift_record(l, step, layer, index)
                }
                Weights::Full(t) => {
                    check(t.len())?;
                    scalar_record(step, layer, index, t.data()[index], t.data()[index])
                }
                Weights::Quantized { latent, config } => {
                    check(latent.len())?;
                    let v = latent.data()[index];
                    scalar_record(step, layer, index, v, config.quantize_value(v))
                }
            };
            Ok(record)
        })
        .collect()
}

fn dense_shift_record(l: &LatentWeights, step: u64, layer: usize, index: usize) -> TraceRecord {
    let latents = l.element(index);
    let record = TraceRecord {
        step,
        layer,
        index,
        w_sign: latents[0],
        w_scale: latents[1..].to_vec(),
        w_shift: 0.0,
    };
    TraceRecord {
        w_shift: record.replay(l.exponent_bias()),
        ..record
    }
}

fn scalar_record(step: u64, layer: usize, index: usize, latent: f64, effective: f64) -> TraceRecord {
    TraceRecord {
        step,
        layer,
        index,
        w_sign: latent,
        w_scale: Vec::new(),
        w_shift: effective,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn snap(filters: Vec<Vec<f64>>) -> FilterSnapshot {
        FilterSnapshot { layer: 0, epoch: 0, filters }
    }

    #[test]
    fn identical_and_negated() {
        let a = snap(vec![vec![1.0, 2.0], vec![-3.0, 0.5]]);
        assert!((filter_avg_cosine(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg = snap(a.filters.iter().map(|f| f.iter().map(|v| -v).collect()).collect());
        assert!((filter_avg_cosine(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_plus_orthogonal_is_half() {
        let a = snap(vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
        let b = snap(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!((filter_avg_cosine(&a, &b).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_filter_counts_as_zero() {
        let a = snap(vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
        let b = snap(vec![vec![1.0, 0.0], vec![0.0, 0.0]]);
        assert!((filter_avg_cosine(&a, &b).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = snap(vec![vec![1.0, 0.0]]);
        let b = snap(vec![vec![1.0, 0.0, 2.0]]);
        assert!(filter_avg_cosine(&a, &b).is_err());
    }

    #[test]
    fn sample_indices_spread() {
        assert_eq!(sample_indices(10, 3), vec![0, 3, 6]);
        assert_eq!(sample_indices(2, 64), vec![0, 1]);
        assert!(sample_indices(0, 4).is_empty());
    }

    proptest! {
        #[test]
        fn scale_invariant_and_bounded(
            data in prop::collection::vec(-5.0f64..5.0, 12),
            other in prop::collection::vec(-5.0f64..5.0, 12),
            c in 0.01f64..100.0,
        ) {
            let a = snap(data.chunks(4).map(<[f64]>::to_vec).collect());
            let b = snap(other.chunks(4).map(<[f64]>::to_vec).collect());
            let scaled = snap(b.filters.iter().map(|f| f.iter().map(|v| v * c).collect()).collect());
            let base = filter_avg_cosine(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&base));
            prop_assert!((filter_avg_cosine(&a, &scaled).unwrap() - base).abs() < 1e-9);
        }
    }
}
