//! Sign-scale decomposition of zero-free power-of-two weights.
//!
//! Every discrete weight is `(2·H(w_sign) − 1) · 2^(S_T + b)` where the shift
//! `S_T` is built from `T = 2^(n−1) − 1` binary gates by the recursion
//! `S_0 = 0, S_t = H(w_t)·(S_{t−1} + 1)`. All gates are backed by real-valued
//! latents that the optimizer updates; the Heaviside steps are crossed with a
//! straight-through estimator in the backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation of the low-variance random initialization.
pub const LOW_VARIANCE_SIGMA: f64 = 1e-3;

/// Step function: 1 for strictly positive input, 0 otherwise (including 0).
#[inline]
pub fn heaviside(x: f64) -> u8 {
    u8::from(x > 0.0)
}

/// Number of scale gates for an `n`-bit weight.
pub fn scale_gates(bits: u8) -> usize {
    (1usize << (bits - 1)) - 1
}

pub fn check_bits(bits: u8) -> Result<()> {
    if (2..=4).contains(&bits) {
        Ok(())
    } else {
        Err(Error::Config(format!("bit width must be 2, 3 or 4, got {bits}")))
    }
}

/// Discrete inference-time weight: `sign · 2^(shift + bias)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ShiftCode {
    pub negative: bool,
    pub shift: u8,
}

impl ShiftCode {
    pub fn new(negative: bool, shift: u8) -> Self {
        Self { negative, shift }
    }

    pub fn value(self, exponent_bias: i32) -> f64 {
        let magnitude = 2f64.powi(i32::from(self.shift) + exponent_bias);
        if self.negative {
            -magnitude
        } else {
            magnitude
        }
    }

    /// Inverse of [`ShiftCode::value`]; `None` when `w` is not `±2^(s+bias)`
    /// with `s ≥ 0`.
    pub fn from_value(w: f64, exponent_bias: i32) -> Option<Self> {
        let exp = power_of_two_exponent(w)?;
        let shift = u8::try_from(exp - exponent_bias).ok()?;
        Some(Self::new(w < 0.0, shift))
    }
}

/// Exponent `p` when `|w| == 2^p` exactly.
pub fn power_of_two_exponent(w: f64) -> Option<i32> {
    if w == 0.0 || !w.is_finite() {
        return None;
    }
    let exp = w.abs().log2().round() as i32;
    (2f64.powi(exp) == w.abs()).then_some(exp)
}

/// Options of the straight-through backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteOptions {
    /// Replace the `2^(S_T+b)` factor on the sign gradient by `sqrt(S_T+1)`.
    pub rescale_sign_grad: bool,
    /// Drop the `ln 2` of `d 2^S / dS` on the scale-gate gradients.
    pub drop_ln2: bool,
}

impl Default for SteOptions {
    fn default() -> Self {
        Self {
            rescale_sign_grad: true,
            drop_ln2: false,
        }
    }
}

/// How latent tensors are drawn at construction time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LatentInit {
    /// `N(0, 2/fan_in)` for every latent.
    Kaiming,
    /// `N(0, sigma²)` for every latent.
    LowVariance { sigma: f64 },
}

impl Default for LatentInit {
    fn default() -> Self {
        LatentInit::LowVariance {
            sigma: LOW_VARIANCE_SIGMA,
        }
    }
}

/// Full-precision latents backing one DenseShift weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentWeights {
    bits: u8,
    exponent_bias: i32,
    sign: Tensor,
    scale: Vec<Tensor>,
}

/// Discrete weights produced by [`materialize_shift`].
#[derive(Debug, Clone, PartialEq)]
pub struct Materialized {
    pub weights: Tensor,
    pub codes: Vec<ShiftCode>,
}

/// Gradients with respect to every latent of a [`LatentWeights`].
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrads {
    pub sign: Tensor,
    pub scale: Vec<Tensor>,
}

impl LatentGrads {
    pub fn into_vec(self) -> Vec<Tensor> {
        std::iter::once(self.sign).chain(self.scale).collect()
    }
}

impl LatentWeights {
    pub fn from_parts(bits: u8, exponent_bias: i32, sign: Tensor, scale: Vec<Tensor>) -> Result<Self> {
        check_bits(bits)?;
        if scale.len() != scale_gates(bits) {
            return Err(Error::Config(format!(
                "{bits}-bit latents need {} scale tensors, got {}",
                scale_gates(bits),
                scale.len()
            )));
        }
        if scale.iter().any(|t| t.shape() != sign.shape()) {
            return Err(Error::ShapeMismatch("latent tensors differ in shape".into()));
        }
        Ok(Self {
            bits,
            exponent_bias,
            sign,
            scale,
        })
    }

    pub fn init(
        shape: &[usize],
        bits: u8,
        exponent_bias: i32,
        fan_in: usize,
        init: LatentInit,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_bits(bits)?;
        let std = match init {
            LatentInit::Kaiming => {
                if fan_in == 0 {
                    return Err(Error::Config("fan_in must be positive".into()));
                }
                (2.0 / fan_in as f64).sqrt()
            }
            LatentInit::LowVariance { sigma } => {
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
                }
                sigma
            }
        };
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let mut draw = || Tensor::from_fn(shape, |_| normal.sample(rng));
        let sign = draw();
        let scale = (0..scale_gates(bits)).map(|_| draw()).collect();
        Ok(Self {
            bits,
            exponent_bias,
            sign,
            scale,
        })
    }

    /// Latents whose materialization reproduces `codes` exactly.
    ///
    /// Gates `w_{T−S+1}..w_T` are set to +1 and `w_{T−S}` to −1 so that the
    /// recursion restarts right below the top `S` gates.
    pub fn from_codes(shape: &[usize], bits: u8, exponent_bias: i32, codes: &[ShiftCode]) -> Result<Self> {
        check_bits(bits)?;
        let gates = scale_gates(bits);
        let n: usize = shape.iter().product();
        if codes.len() != n {
            return Err(Error::ShapeMismatch(format!("{} codes for shape {shape:?}", codes.len())));
        }
        let mut sign = Tensor::zeros(shape);
        let mut scale = vec![Tensor::zeros(shape); gates];
        for (i, code) in codes.iter().enumerate() {
            let s = usize::from(code.shift);
            if s > gates {
                return Err(Error::CodeOverflow {
                    shift: u32::from(code.shift),
                    bits,
                });
            }
            sign.data_mut()[i] = if code.negative { -1.0 } else { 1.0 };
            for (t, gate) in scale.iter_mut().enumerate() {
                // gate index t covers w_{t+1}
                gate.data_mut()[i] = if t + s >= gates { 1.0 } else { -1.0 };
            }
        }
        Ok(Self {
            bits,
            exponent_bias,
            sign,
            scale,
        })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn exponent_bias(&self) -> i32 {
        self.exponent_bias
    }

    pub fn shape(&self) -> &[usize] {
        self.sign.shape()
    }

    pub fn len(&self) -> usize {
        self.sign.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sign.is_empty()
    }

    pub fn sign(&self) -> &Tensor {
        &self.sign
    }

    pub fn scale(&self) -> &[Tensor] {
        &self.scale
    }

    /// `[w_sign, w_1, …, w_T]` in that order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        std::iter::once(&self.sign).chain(&self.scale).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        std::iter::once(&mut self.sign).chain(&mut self.scale).collect()
    }

    /// `[w_sign, w_1, …, w_T]` of element `index`.
    pub fn element(&self, index: usize) -> Vec<f64> {
        self.tensors().iter().map(|t| t.data()[index]).collect()
    }

    /// Copies the latents of leading-dimension rows `rows` and appends them.
    pub fn append_rows(&mut self, rows: &[usize]) -> Result<()> {
        for t in self.tensors_mut() {
            *t = append_rows(t, rows)?;
        }
        Ok(())
    }
}

pub(crate) fn append_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let row_len = t.row_len();
    let mut data = t.data().to_vec();
    for &r in rows {
        if r >= t.rows() {
            return Err(Error::ShapeMismatch(format!("row {r} out of range {}", t.rows())));
        }
        data.extend_from_slice(&t.data()[r * row_len..(r + 1) * row_len]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] += rows.len();
    Tensor::new(shape, data)
}

/// Shift of a single element from its scale latents `w_1..w_T`.
#[inline]
pub fn element_shift(scale: impl IntoIterator<Item = f64>) -> u8 {
    scale
        .into_iter()
        .fold(0u8, |s, w| heaviside(w) * (s + 1))
}

/// Discrete weights and codes of every element.
pub fn materialize_shift(latents: &LatentWeights) -> Materialized {
    let n = latents.len();
    let mut weights = Vec::with_capacity(n);
    let mut codes = Vec::with_capacity(n);
    for i in 0..n {
        let shift = element_shift(latents.scale.iter().map(|t| t.data()[i]));
        let code = ShiftCode::new(heaviside(latents.sign.data()[i]) == 0, shift);
        weights.push(code.value(latents.exponent_bias));
        codes.push(code);
    }
    Materialized {
        weights: Tensor::new(latents.shape().to_vec(), weights).expect("shape preserved"),
        codes,
    }
}

/// Straight-through backward pass from `dL/dw_shift` to every latent.
///
/// The sign gradient is `g·sqrt(S_T+1)` with rescaling, `g·2^(S_T+b)` without.
/// Gate `t` receives the exact chain rule with each Heaviside derivative
/// replaced by one: `g·w·ln2·∏_{k>t} H(w_k)·(S_{t−1}+1)`.
pub fn backward_latents(grad_wshift: &Tensor, latents: &LatentWeights, opts: SteOptions) -> Result<LatentGrads> {
    if grad_wshift.shape() != latents.shape() {
        return Err(Error::ShapeMismatch(format!(
            "gradient {:?} vs latents {:?}",
            grad_wshift.shape(),
            latents.shape()
        )));
    }
    let gates = latents.scale.len();
    let n = latents.len();
    let mut grad_sign = Vec::with_capacity(n);
    let mut grad_scale = vec![vec![0.0; n]; gates];
    let ln2 = if opts.drop_ln2 { 1.0 } else { std::f64::consts::LN_2 };
    // prefix[t] = S_t for t = 0..=T
    let mut prefix = vec![0u32; gates + 1];
    let mut gate_on = vec![0u32; gates];
    for i in 0..n {
        for t in 0..gates {
            gate_on[t] = u32::from(heaviside(latents.scale[t].data()[i]));
            prefix[t + 1] = gate_on[t] * (prefix[t] + 1);
        }
        let s_total = prefix[gates];
        let g = grad_wshift.data()[i];
        let sign = if heaviside(latents.sign.data()[i]) == 1 { 1.0 } else { -1.0 };
        let magnitude = 2f64.powi(s_total as i32 + latents.exponent_bias);
        grad_sign.push(if opts.rescale_sign_grad {
            g * f64::from(s_total + 1).sqrt()
        } else {
            g * magnitude
        });
        // suffix product of gates above t
        let mut upper = 1u32;
        for t in (0..gates).rev() {
            grad_scale[t][i] = g * sign * magnitude * ln2 * f64::from(upper) * f64::from(prefix[t] + 1);
            upper *= gate_on[t];
        }
    }
    let shape = latents.shape().to_vec();
    Ok(LatentGrads {
        sign: Tensor::new(shape.clone(), grad_sign)?,
        scale: grad_scale
            .into_iter()
            .map(|d| Tensor::new(shape.clone(), d))
            .collect::<Result<_>>()?,
    })
}

/// Every latent i.i.d. `N(0, sigma²)`, reproducible from `seed`.
pub fn init_low_variance(shape: &[usize], bits: u8, sigma: f64, seed: u64) -> Result<LatentWeights> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentWeights::init(shape, bits, 0, 1, LatentInit::LowVariance { sigma }, &mut rng)
}

/// Every latent i.i.d. `N(0, 2/fan_in)`, reproducible from `seed`.
pub fn init_kaiming(shape: &[usize], bits: u8, fan_in: usize, seed: u64) -> Result<LatentWeights> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentWeights::init(shape, bits, 0, fan_in, LatentInit::Kaiming, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn single(bits: u8, bias: i32, sign: f64, scale: &[f64]) -> LatentWeights {
        LatentWeights::from_parts(
            bits,
            bias,
            Tensor::new(vec![1], vec![sign]).unwrap(),
            scale
                .iter()
                .map(|&w| Tensor::new(vec![1], vec![w]).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn heaviside_boundary() {
        assert_eq!(heaviside(0.2), 1);
        assert_eq!(heaviside(0.0), 0);
        assert_eq!(heaviside(-0.0), 0);
        assert_eq!(heaviside(-3.0), 0);
    }

    #[test]
    fn three_bit_all_gates_open() {
        let m = materialize_shift(&single(3, 0, 0.5, &[0.2, 0.3, 0.1]));
        assert_eq!(m.codes[0], ShiftCode::new(false, 3));
        assert_eq!(m.weights.data()[0], 8.0);
    }

    #[test]
    fn closed_top_gate_zeroes_shift() {
        let m = materialize_shift(&single(3, 0, -0.5, &[0.7, 0.9, -0.1]));
        assert_eq!(m.codes[0].shift, 0);
        assert_eq!(m.weights.data()[0], -1.0);
    }

    #[test]
    fn closed_bottom_gate_restarts_count() {
        let m = materialize_shift(&single(3, 0, 0.5, &[-0.2, 0.3, 0.1]));
        assert_eq!(m.codes[0].shift, 2);
        assert_eq!(m.weights.data()[0], 4.0);
    }

    #[test]
    fn zero_sign_latent_is_negative() {
        let m = materialize_shift(&single(2, 0, 0.0, &[1.0]));
        assert_eq!(m.weights.data()[0], -2.0);
    }

    #[test]
    fn exponent_bias_shifts_levels() {
        let m = materialize_shift(&single(2, -3, 1.0, &[1.0]));
        assert_eq!(m.weights.data()[0], 0.25);
    }

    fn enumerate_values(bits: u8) -> BTreeSet<i64> {
        let gates = scale_gates(bits);
        let mut seen = BTreeSet::new();
        for pattern in 0u32..(1 << (gates + 1)) {
            let bit = |k: usize| if pattern >> k & 1 == 1 { 0.5 } else { -0.5 };
            let scale: Vec<f64> = (1..=gates).map(bit).collect();
            let w = materialize_shift(&single(bits, 0, bit(0), &scale)).weights.data()[0];
            assert_ne!(w, 0.0);
            seen.insert(w as i64);
        }
        seen
    }

    #[test]
    fn enumeration_covers_exactly_the_level_set() {
        for bits in 2..=4u8 {
            let gates = scale_gates(bits) as u32;
            let expected: BTreeSet<i64> = (0..=gates)
                .flat_map(|s| [1i64 << s, -(1i64 << s)])
                .collect();
            assert_eq!(enumerate_values(bits), expected, "bits={bits}");
        }
        assert_eq!(
            enumerate_values(3),
            BTreeSet::from([-8, -4, -2, -1, 1, 2, 4, 8])
        );
    }

    #[test]
    fn sign_gradient_rescaling() {
        let g = Tensor::new(vec![1], vec![1.0]).unwrap();
        let opts = SteOptions::default();
        let s3 = backward_latents(&g, &single(3, 0, 0.5, &[0.2, 0.3, 0.1]), opts).unwrap();
        assert_eq!(s3.sign.data()[0], 2.0);
        let s0 = backward_latents(&g, &single(3, 0, 0.5, &[0.2, 0.3, -0.1]), opts).unwrap();
        assert_eq!(s0.sign.data()[0], 1.0);
    }

    #[test]
    fn sign_gradient_without_rescaling_is_magnitude() {
        let g = Tensor::new(vec![1], vec![0.75]).unwrap();
        let opts = SteOptions {
            rescale_sign_grad: false,
            ..SteOptions::default()
        };
        let grads = backward_latents(&g, &single(3, -2, 0.5, &[0.2, -0.3, 0.1]), opts).unwrap();
        // S_T = 1, b = -2
        assert_eq!(grads.sign.data()[0], 0.75 * 0.5);
    }

    #[test]
    fn two_bit_gate_gradient() {
        let g = Tensor::new(vec![1], vec![1.0]).unwrap();
        let grads = backward_latents(&g, &single(2, 0, 0.3, &[0.4]), SteOptions::default()).unwrap();
        assert!((grads.scale[0].data()[0] - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
        let no_ln2 = SteOptions {
            drop_ln2: true,
            ..SteOptions::default()
        };
        let grads = backward_latents(&g, &single(2, 0, 0.3, &[0.4]), no_ln2).unwrap();
        assert_eq!(grads.scale[0].data()[0], 2.0);
    }

    /// Weight as a function of the latents with every Heaviside replaced by
    /// its local linearisation `H(x0) + (x − x0)`, i.e. a unit-slope
    /// surrogate anchored at the reference point.
    fn surrogate_weight(reference: &[f64], point: &[f64], bias: i32) -> f64 {
        let h = |k: usize| f64::from(heaviside(reference[k])) + (point[k] - reference[k]);
        let mut s = 0.0;
        for k in 1..reference.len() {
            s = h(k) * (s + 1.0);
        }
        // the sign path is evaluated as in the forward pass; its gradient is
        // checked separately against the closed forms
        let sign = 2.0 * f64::from(heaviside(reference[0])) - 1.0;
        sign * 2f64.powf(s + f64::from(bias))
    }

    fn check_gate_gradients_against_surrogate(bits: u8, bias: i32, latents: &[f64]) {
        let l = single(bits, bias, latents[0], &latents[1..]);
        let g = Tensor::new(vec![1], vec![1.0]).unwrap();
        let grads = backward_latents(&g, &l, SteOptions::default()).unwrap();
        let h = 1e-6;
        for t in 1..latents.len() {
            let mut plus = latents.to_vec();
            let mut minus = latents.to_vec();
            plus[t] += h;
            minus[t] -= h;
            let fd = (surrogate_weight(latents, &plus, bias) - surrogate_weight(latents, &minus, bias)) / (2.0 * h);
            let analytic = grads.scale[t - 1].data()[0];
            assert!(
                (fd - analytic).abs() <= 1e-6 * fd.abs().max(1.0),
                "bits={bits} gate={t} fd={fd} analytic={analytic}"
            );
        }
    }

    #[test]
    fn gate_gradient_matches_surrogate_finite_differences() {
        check_gate_gradients_against_surrogate(2, 0, &[0.3, 0.4]);
        check_gate_gradients_against_surrogate(3, 0, &[0.5, -0.2, 0.3, 0.1]);
        check_gate_gradients_against_surrogate(3, -1, &[-0.5, 0.2, -0.3, 0.1]);
        check_gate_gradients_against_surrogate(4, 2, &[0.5, 0.2, 0.3, -0.1, 0.4, 0.4, 0.4, 0.9]);
    }

    fn sample_std(values: &[f64]) -> f64 {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    }

    #[test]
    fn low_variance_statistics() {
        let l = init_low_variance(&[100, 100], 3, 1e-3, 7).unwrap();
        for t in l.tensors() {
            let std = sample_std(t.data());
            assert!((0.8e-3..=1.2e-3).contains(&std), "std {std}");
            let max = t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max < 1e-2, "max {max}");
        }
    }

    #[test]
    fn low_variance_is_reproducible() {
        let a = init_low_variance(&[8, 3, 3, 3], 4, 1e-3, 11).unwrap();
        let b = init_low_variance(&[8, 3, 3, 3], 4, 1e-3, 11).unwrap();
        assert_eq!(a, b);
        assert!(init_low_variance(&[2], 2, 0.0, 1).is_err());
    }

    #[test]
    fn kaiming_statistics() {
        for (fan_in, target) in [(2usize, 1.0f64), (200, 0.1)] {
            let l = init_kaiming(&[10_000], 2, fan_in, 3).unwrap();
            let std = sample_std(l.sign().data());
            assert!((std - target).abs() <= 0.1 * target, "fan_in={fan_in} std={std}");
        }
        assert!(init_kaiming(&[4], 2, 0, 3).is_err());
    }

    #[test]
    fn codes_rebuild_latents() {
        let codes: Vec<ShiftCode> = (0..8u8)
            .map(|i| ShiftCode::new(i % 2 == 1, i / 2))
            .collect();
        let l = LatentWeights::from_codes(&[8], 3, -1, &codes).unwrap();
        assert_eq!(materialize_shift(&l).codes, codes);
        assert!(LatentWeights::from_codes(&[1], 2, 0, &[ShiftCode::new(false, 2)]).is_err());
    }

    proptest! {
        #[test]
        fn never_zero_and_round_trips(
            bits in 2u8..=4,
            bias in -6i32..=3,
            raw in proptest::collection::vec(-1.0f64..1.0, 8),
        ) {
            let gates = scale_gates(bits);
            let l = single(bits, bias, raw[0], &raw[1..=gates]);
            let m = materialize_shift(&l);
            let w = m.weights.data()[0];
            prop_assert!(w != 0.0);
            prop_assert!(usize::from(m.codes[0].shift) <= gates);
            prop_assert_eq!(m.codes[0].value(bias), w);
            prop_assert_eq!(ShiftCode::from_value(w, bias), Some(m.codes[0]));
        }

        #[test]
        fn opening_more_top_gates_never_lowers_shift(bits in 2u8..=4, open in 0usize..8, base in proptest::collection::vec(-1.0f64..1.0, 7)) {
            let gates = scale_gates(bits);
            let open = open.min(gates);
            let mut scale = base[..gates].to_vec();
            let before = element_shift(scale.iter().copied());
            // force the top `open` gates positive
            for w in scale.iter_mut().rev().take(open) {
                *w = w.abs() + 0.1;
            }
            let after = element_shift(scale.iter().copied());
            prop_assert!(after >= before || open == 0);
            prop_assert!(usize::from(after) >= open);
        }

        #[test]
        fn sign_gradient_ratio_is_exact(bits in 2u8..=4, bias in -4i32..=2, raw in proptest::collection::vec(-1.0f64..1.0, 8), g in -3.0f64..3.0) {
            prop_assume!(g != 0.0);
            let gates = scale_gates(bits);
            let l = single(bits, bias, raw[0], &raw[1..=gates]);
            let s = materialize_shift(&l).codes[0].shift;
            let grad = Tensor::new(vec![1], vec![g]).unwrap();
            let on = backward_latents(&grad, &l, SteOptions::default()).unwrap();
            prop_assert_eq!(on.sign.data()[0], g * f64::from(u32::from(s) + 1).sqrt());
            let off = backward_latents(&grad, &l, SteOptions { rescale_sign_grad: false, drop_ln2: false }).unwrap();
            prop_assert_eq!(off.sign.data()[0] / g, 2f64.powi(i32::from(s) + bias));
        }
    }
}
