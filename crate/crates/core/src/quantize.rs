//! Quantizer baselines: round-to-nearest power of two on a real latent,
//! trained with a straight-through estimator.
//!
//! `SymmetricPot` maps onto the same zero-free level set as an `n`-bit
//! DenseShift weight, `{±2^b … ±2^(b+T)}`. `SignShift` keeps zero and
//! therefore one fewer magnitude, `{0} ∪ {±2^b … ±2^(b+T−1)}`, which is the
//! level set the shift kernel's zero-coded blobs can store.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reparam::{check_bits, scale_gates};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerKind {
    SymmetricPot,
    SignShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    pub kind: QuantizerKind,
    pub bits: u8,
    #[serde(default)]
    pub exponent_bias: i32,
    /// Magnitudes at or below this map to zero (sign-shift only). Defaults to
    /// half of the smallest level.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_threshold: Option<f64>,
}

impl QuantizerConfig {
    pub fn new(kind: QuantizerKind, bits: u8, exponent_bias: i32) -> Self {
        Self {
            kind,
            bits,
            exponent_bias,
            zero_threshold: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if let Some(t) = self.zero_threshold {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("zero_threshold must be ≥ 0, got {t}")));
            }
        }
        Ok(())
    }

    /// Inclusive exponent range of the nonzero levels.
    pub fn exponent_range(&self) -> (i32, i32) {
        let top = scale_gates(self.bits) as i32;
        let top = match self.kind {
            QuantizerKind::SymmetricPot => top,
            QuantizerKind::SignShift => top - 1,
        };
        (self.exponent_bias, self.exponent_bias + top)
    }

    pub fn max_level(&self) -> f64 {
        2f64.powi(self.exponent_range().1)
    }

    pub fn zero_threshold(&self) -> f64 {
        self.zero_threshold
            .unwrap_or_else(|| 0.5 * 2f64.powi(self.exponent_bias))
    }

    pub fn quantize_value(&self, w: f64) -> f64 {
        let (lo, hi) = self.exponent_range();
        match self.kind {
            QuantizerKind::SymmetricPot => nearest_level(w, lo, hi),
            QuantizerKind::SignShift => {
                if w.abs() <= self.zero_threshold() {
                    0.0
                } else {
                    nearest_level(w, lo, hi)
                }
            }
        }
    }

    pub fn quantize(&self, w: &Tensor) -> Tensor {
        w.map(|v| self.quantize_value(v))
    }
}

/// `sign(w)·2^clamp(round(log2|w|), lo, hi)` with `sign(0) = +1`.
fn nearest_level(w: f64, lo: i32, hi: i32) -> f64 {
    let exp = if w == 0.0 {
        lo
    } else {
        (w.abs().log2().round() as i32).clamp(lo, hi)
    };
    let magnitude = 2f64.powi(exp);
    if w < 0.0 {
        -magnitude
    } else {
        magnitude
    }
}

/// Zero-free power-of-two quantization onto `{±2^b … ±2^(b+T)}`.
pub fn quantize_symmetric_pot(w: &Tensor, bits: u8, exponent_bias: i32) -> Result<Tensor> {
    let cfg = QuantizerConfig::new(QuantizerKind::SymmetricPot, bits, exponent_bias);
    cfg.validate()?;
    Ok(cfg.quantize(w))
}

/// Ternary-based shift quantization onto `{0} ∪ {±2^b … ±2^(b+T−1)}`.
pub fn quantize_sign_shift(w: &Tensor, bits: u8, exponent_bias: i32, zero_threshold: f64) -> Result<Tensor> {
    let cfg = QuantizerConfig {
        kind: QuantizerKind::SignShift,
        bits,
        exponent_bias,
        zero_threshold: Some(zero_threshold),
    };
    cfg.validate()?;
    Ok(cfg.quantize(w))
}

/// Straight-through backward: identity where `|w|` lies inside the clamp
/// range, zero where it saturates above the largest level.
pub fn ste_backward_quantizer(grad_out: &Tensor, w: &Tensor, cfg: &QuantizerConfig) -> Result<Tensor> {
    if grad_out.shape() != w.shape() {
        return Err(Error::ShapeMismatch(format!(
            "gradient {:?} vs weights {:?}",
            grad_out.shape(),
            w.shape()
        )));
    }
    let max = cfg.max_level();
    let data = grad_out
        .data()
        .iter()
        .zip(w.data())
        .map(|(&g, &v)| if v.abs() > max { 0.0 } else { g })
        .collect();
    Tensor::new(w.shape().to_vec(), data)
}
