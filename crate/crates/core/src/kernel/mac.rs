//! Fixed-point multiply-free MAC kernels.
//!
//! Each term is `signflip(x, sign) << S` with `x` an 8-bit activation.
//! The DenseShift kernel applies this to every element with no test on the
//! code; the Shift kernel first checks for the zero code and skips it.
//!
//! Overflow: `|signflip(x)| ≤ 128` and `S ≤ 7`, so a term is at most `2^14`
//! in magnitude. Terms are summed in `i32` over blocks of `2^15` elements
//! (`≤ 2^29`) and blocks are summed in `i64`, so no input length overflows.

use super::pack::{extract, PackedWeightBlob};
use crate::error::{Error, Result};

/// 8-bit activations sharing one power-of-two scale: real value
/// `values[i] · 2^exponent`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedActivations {
    values: Vec<i8>,
    exponent: i32,
}

impl FixedActivations {
    pub fn new(values: Vec<i8>, exponent: i32) -> Self {
        Self { values, exponent }
    }

    /// Round-to-nearest with saturation at the given scale.
    pub fn with_exponent(x: &[f64], exponent: i32) -> Self {
        let inv = 2f64.powi(-exponent);
        let values = x.iter().map(|v| (v * inv).round().clamp(-128.0, 127.0) as i8).collect();
        Self { values, exponent }
    }

    /// Smallest scale at which `max |x|` still fits in 127.
    pub fn quantize(x: &[f64]) -> Self {
        let max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let exponent = if max > 0.0 { (max / 127.0).log2().ceil() as i32 } else { 0 };
        Self::with_exponent(x, exponent)
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn exponent(&self) -> i32 {
        self.exponent
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_real(&self) -> Vec<f64> {
        let scale = 2f64.powi(self.exponent);
        self.values.iter().map(|&v| f64::from(v) * scale).collect()
    }
}

const CHUNK: usize = 64;
const BLOCK: usize = 1 << 15;

#[inline(always)]
fn term(x: i8, code: u8) -> i32 {
    // wrapping ops keep overflow checks out of the loop so it vectorizes
    let neg = 0i32.wrapping_sub(i32::from(code & 1));
    (i32::from(x) ^ neg).wrapping_sub(neg).wrapping_shl(u32::from(code >> 1))
}

#[inline(always)]
fn mac_dense_i32(x: &[i8], codes: &[u8]) -> i32 {
    x.iter().zip(codes).fold(0i32, |acc, (&xi, &c)| acc.wrapping_add(term(xi, c)))
}

#[inline(always)]
fn mac_shift_i32(x: &[i8], codes: &[u8], zero_shift: u8) -> i32 {
    let mut acc = 0i32;
    for (&xi, &c) in x.iter().zip(codes) {
        if c >> 1 == zero_shift {
            continue;
        }
        acc = acc.wrapping_add(term(xi, c));
    }
    acc
}

/// MAC over already decoded raw codes; `zero_shift` selects the Shift kernel.
#[inline(always)]
fn mac_codes_generic(x: &[i8], codes: &[u8], zero_shift: Option<u8>) -> i64 {
    let mut total = 0i64;
    for (xb, cb) in x.chunks(BLOCK).zip(codes.chunks(BLOCK)) {
        let block = match zero_shift {
            None => mac_dense_i32(xb, cb),
            Some(z) => mac_shift_i32(xb, cb, z),
        };
        total += i64::from(block);
    }
    total
}

/// Unpacks the `CHUNK` codes starting at word `w0`. A full chunk of `N`-bit
/// codes fills exactly `N` words; `N` bytes hold `8` codes.
#[inline(always)]
fn unpack_chunk<const N: usize>(words: &[u64], w0: usize, codes: &mut [u8; CHUNK]) {
    let mut bytes = [0u8; 32];
    for (dst, w) in bytes.chunks_exact_mut(8).zip(&words[w0..w0 + N]) {
        dst.copy_from_slice(&w.to_le_bytes());
    }
    let mask = (1u32 << N) - 1;
    for (group, out) in bytes[..8 * N].chunks_exact(N).zip(codes.chunks_exact_mut(8)) {
        let v = group.iter().rev().fold(0u32, |acc, &b| acc << 8 | u32::from(b));
        for (k, c) in out.iter_mut().enumerate() {
            *c = (v >> (k * N) & mask) as u8;
        }
    }
}

/// MAC reading codes straight from packed words, one stack chunk at a time.
#[inline(always)]
fn dot_packed_n<const N: usize>(x: &[i8], words: &[u64], zero_shift: Option<u8>) -> i64 {
    let mut total = 0i64;
    let mut codes = [0u8; CHUNK];
    for (block_idx, xb) in x.chunks(BLOCK).enumerate() {
        let mut acc = 0i32;
        for (chunk_idx, xc) in xb.chunks(CHUNK).enumerate() {
            let base = block_idx * BLOCK + chunk_idx * CHUNK;
            if xc.len() == CHUNK {
                unpack_chunk::<N>(words, base / CHUNK * N, &mut codes);
            } else {
                for (j, c) in codes[..xc.len()].iter_mut().enumerate() {
                    *c = extract(words, base + j, N as u8);
                }
            }
            let part = match zero_shift {
                None => mac_dense_i32(xc, &codes[..xc.len()]),
                Some(z) => mac_shift_i32(xc, &codes[..xc.len()], z),
            };
            acc = acc.wrapping_add(part);
        }
        total += i64::from(acc);
    }
    total
}

#[inline(always)]
fn dot_packed_generic(x: &[i8], words: &[u64], bits: u8, zero_shift: Option<u8>) -> i64 {
    match bits {
        2 => dot_packed_n::<2>(x, words, zero_shift),
        3 => dot_packed_n::<3>(x, words, zero_shift),
        _ => dot_packed_n::<4>(x, words, zero_shift),
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn dot_packed(x: &[i8], words: &[u64], bits: u8, zero_shift: Option<u8>) -> i64 {
        super::dot_packed_generic(x, words, bits, zero_shift)
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn mac_codes(x: &[i8], codes: &[u8], zero_shift: Option<u8>) -> i64 {
        super::mac_codes_generic(x, codes, zero_shift)
    }
}

fn dot_packed(x: &[i8], words: &[u64], bits: u8, zero_shift: Option<u8>) -> i64 {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { avx2::dot_packed(x, words, bits, zero_shift) };
    }
    dot_packed_generic(x, words, bits, zero_shift)
}

/// Dot product of activations with decoded raw codes (sign bit 0, shift
/// above). `zero_shift` marks the shift field value meaning zero.
pub fn mac_codes(x: &[i8], codes: &[u8], zero_shift: Option<u8>) -> i64 {
    debug_assert_eq!(x.len(), codes.len());
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { avx2::mac_codes(x, codes, zero_shift) };
    }
    mac_codes_generic(x, codes, zero_shift)
}

fn check_lengths(x: &FixedActivations, w: &PackedWeightBlob) -> Result<()> {
    if x.len() != w.len() {
        return Err(Error::LengthMismatch {
            activations: x.len(),
            weights: w.len(),
        });
    }
    Ok(())
}

/// Branch-free DenseShift MAC. The result is in units of
/// `2^(exponent_bias + activation exponent)`.
pub fn dot_denseshift(x: &FixedActivations, w: &PackedWeightBlob) -> Result<i64> {
    check_lengths(x, w)?;
    if w.is_zero_coded() {
        return Err(Error::Config("the DenseShift kernel needs a zero-free blob".into()));
    }
    Ok(dot_packed(x.values(), w.padded_words(), w.bits(), None))
}

/// Shift MAC: zero codes are tested for and skipped.
pub fn dot_shift(x: &FixedActivations, w: &PackedWeightBlob) -> Result<i64> {
    check_lengths(x, w)?;
    let zero = w
        .zero_shift()
        .ok_or_else(|| Error::Config("the Shift kernel needs a zero-coded blob".into()))?;
    Ok(dot_packed(x.values(), w.padded_words(), w.bits(), Some(zero)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i64>,
}

/// Convolution of `(N, C, H, W)` fixed-point activations with packed
/// `(O, C, k, k)` weights. Output is in units of
/// `2^(exponent_bias + activation exponent)`; padding contributes zeros.
pub fn conv_forward_packed(x: &FixedActivations, shape: &[usize], w: &PackedWeightBlob, g: &ConvGeometry) -> Result<IntTensor> {
    let [n, c, h, wd] = *shape else {
        return Err(Error::ShapeMismatch(format!("conv input shape {shape:?}")));
    };
    if c != g.in_channels || n * c * h * wd != x.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} activations for shape {shape:?} with {} input channels",
            x.len(),
            g.in_channels
        )));
    }
    let k = g.in_channels * g.kernel * g.kernel;
    if w.len() != g.out_channels * k {
        return Err(Error::LengthMismatch {
            activations: g.out_channels * k,
            weights: w.len(),
        });
    }
    if g.kernel == 0 || g.stride == 0 {
        return Err(Error::Config("kernel and stride must be positive".into()));
    }
    let out = |size: usize| (size + 2 * g.padding).checked_sub(g.kernel).map(|s| s / g.stride + 1);
    let (oh, ow) = out(h)
        .zip(out(wd))
        .ok_or_else(|| Error::ShapeMismatch("kernel larger than padded input".into()))?;
    let codes: Vec<u8> = (0..w.len()).map(|i| w.raw(i)).collect();
    let zero = w.zero_shift();
    let mut data = vec![0i64; n * g.out_channels * oh * ow];
    let mut patch = vec![0i8; k];
    let xs = x.values();
    for s in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    for ky in 0..g.kernel {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        for kx in 0..g.kernel {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            let inside = iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize;
                            patch[(ch * g.kernel + ky) * g.kernel + kx] = if inside {
                                xs[((s * c + ch) * h + iy as usize) * wd + ix as usize]
                            } else {
                                0
                            };
                        }
                    }
                }
                for o in 0..g.out_channels {
                    data[((s * g.out_channels + o) * oh + oy) * ow + ox] = mac_codes(&patch, &codes[o * k..(o + 1) * k], zero);
                }
            }
        }
    }
    Ok(IntTensor {
        shape: vec![n, g.out_channels, oh, ow],
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reparam::ShiftCode;

    fn acts(v: &[i8]) -> FixedActivations {
        FixedActivations::new(v.to_vec(), 0)
    }

    #[test]
    fn dense_hand_example() {
        let w = PackedWeightBlob::pack(&[ShiftCode::new(false, 1), ShiftCode::new(true, 2)], 3, 0).unwrap();
        assert_eq!(dot_denseshift(&acts(&[3, -2]), &w).unwrap(), 14);
        assert_eq!(dot_denseshift(&acts(&[0, 0]), &w).unwrap(), 0);
    }

    #[test]
    fn shift_hand_examples() {
        let w = PackedWeightBlob::pack_with_zeros(&[None], 3, 0).unwrap();
        assert_eq!(dot_shift(&acts(&[5]), &w).unwrap(), 0);
        let w = PackedWeightBlob::pack_with_zeros(&[None, Some(ShiftCode::new(true, 2))], 3, 0).unwrap();
        assert_eq!(dot_shift(&acts(&[3, -2]), &w).unwrap(), 8);
    }

    #[test]
    fn length_and_variant_checked() {
        let dense = PackedWeightBlob::pack(&[ShiftCode::new(false, 1)], 3, 0).unwrap();
        assert!(matches!(dot_denseshift(&acts(&[1, 2]), &dense), Err(Error::LengthMismatch { .. })));
        assert!(dot_shift(&acts(&[1]), &dense).is_err());
        let zeroed = PackedWeightBlob::pack_with_zeros(&[None], 3, 0).unwrap();
        assert!(dot_denseshift(&acts(&[1]), &zeroed).is_err());
    }

    #[test]
    fn extreme_terms_do_not_overflow() {
        let n = 100_000;
        let w = PackedWeightBlob::pack(&vec![ShiftCode::new(true, 7); n], 4, 0).unwrap();
        let x = FixedActivations::new(vec![-128; n], 0);
        assert_eq!(dot_denseshift(&x, &w).unwrap(), n as i64 * 128 * 128);
    }

    #[test]
    fn identity_one_by_one_conv() {
        let g = ConvGeometry {
            in_channels: 1,
            out_channels: 1,
            kernel: 1,
            stride: 1,
            padding: 0,
        };
        let w = PackedWeightBlob::pack(&[ShiftCode::new(false, 0)], 2, 0).unwrap();
        let x = FixedActivations::new((0..12).map(|v| v as i8 - 6).collect(), 0);
        let y = conv_forward_packed(&x, &[1, 1, 3, 4], &w, &g).unwrap();
        assert_eq!(y.data, x.values().iter().map(|&v| i64::from(v)).collect::<Vec<_>>());
        let zero = FixedActivations::new(vec![0; 12], 0);
        assert!(conv_forward_packed(&zero, &[1, 1, 3, 4], &w, &g).unwrap().data.iter().all(|&v| v == 0));
    }

    #[test]
    fn activation_quantization_fits_range() {
        let a = FixedActivations::quantize(&[0.5, -3.0, 2.0]);
        assert!(a.values().iter().all(|&v| (-128..=127).contains(&i16::from(v))));
        for (r, x) in a.to_real().iter().zip([0.5, -3.0, 2.0]) {
            assert!((r - x).abs() <= 2f64.powi(a.exponent()));
        }
    }
}
