//! Bit-packed storage of shift codes.
//!
//! Each weight takes `n` bits: bit 0 is the sign (1 = negative), bits
//! `1..n` hold the shift. Codes are packed LSB-first into little-endian
//! 64-bit words and may straddle word boundaries.
//!
//! A zero-coded blob (Shift kernel) reserves the all-ones shift field
//! `T = 2^(n−1) − 1` with sign 0 for the value zero, leaving shifts
//! `0..T−1` for nonzero weights.
//!
//! Binary layout: `"DSHW"`, version `u8`, bits `u8` (bit 7 set for
//! zero-coded blobs), exponent bias `i8`, count `u64` LE, then
//! `ceil(count·n / 64)` words LE.

use crate::error::{Error, Result};
use crate::reparam::{check_bits, scale_gates, ShiftCode};

pub const BLOB_MAGIC: [u8; 4] = *b"DSHW";
pub const BLOB_VERSION: u8 = 1;
const ZERO_CODED_FLAG: u8 = 0x80;
const HEADER_LEN: usize = 4 + 1 + 1 + 1 + 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedWeightBlob {
    bits: u8,
    exponent_bias: i8,
    zero_coded: bool,
    count: usize,
    /// Payload plus one trailing zero word so straddling reads never go
    /// out of bounds.
    words: Vec<u64>,
}

fn raw_code(code: ShiftCode) -> u64 {
    u64::from(code.negative) | u64::from(code.shift) << 1
}

fn payload_words(count: usize, bits: u8) -> usize {
    (count * usize::from(bits)).div_ceil(64)
}

fn checked_bias(exponent_bias: i32) -> Result<i8> {
    i8::try_from(exponent_bias).map_err(|_| Error::Config(format!("exponent bias {exponent_bias} does not fit in i8")))
}

impl PackedWeightBlob {
    fn from_raw(bits: u8, exponent_bias: i32, zero_coded: bool, raw: impl ExactSizeIterator<Item = u64>) -> Result<Self> {
        let count = raw.len();
        let mut words = vec![0u64; payload_words(count, bits) + 1];
        let n = usize::from(bits);
        for (i, code) in raw.enumerate() {
            let bit = i * n;
            let (w, off) = (bit / 64, bit % 64);
            words[w] |= code << off;
            if off + n > 64 {
                words[w + 1] |= code >> (64 - off);
            }
        }
        Ok(Self {
            bits,
            exponent_bias: checked_bias(exponent_bias)?,
            zero_coded,
            count,
            words,
        })
    }

    /// Packs zero-free codes (DenseShift kernel).
    pub fn pack(codes: &[ShiftCode], bits: u8, exponent_bias: i32) -> Result<Self> {
        check_bits(bits)?;
        let max = scale_gates(bits);
        if let Some(c) = codes.iter().find(|c| usize::from(c.shift) > max) {
            return Err(Error::CodeOverflow {
                shift: u32::from(c.shift),
                bits,
            });
        }
        Self::from_raw(bits, exponent_bias, false, codes.iter().map(|&c| raw_code(c)))
    }

    /// Packs codes where `None` is the zero weight (Shift kernel).
    pub fn pack_with_zeros(codes: &[Option<ShiftCode>], bits: u8, exponent_bias: i32) -> Result<Self> {
        check_bits(bits)?;
        let zero = scale_gates(bits) as u64;
        if let Some(c) = codes.iter().flatten().find(|c| u64::from(c.shift) >= zero) {
            return Err(Error::CodeOverflow {
                shift: u32::from(c.shift),
                bits,
            });
        }
        Self::from_raw(
            bits,
            exponent_bias,
            true,
            codes.iter().map(|c| c.map_or(zero << 1, raw_code)),
        )
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn exponent_bias(&self) -> i32 {
        i32::from(self.exponent_bias)
    }

    pub fn is_zero_coded(&self) -> bool {
        self.zero_coded
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Payload words (without the internal padding word).
    pub fn payload(&self) -> &[u64] {
        &self.words[..self.words.len() - 1]
    }

    pub(crate) fn padded_words(&self) -> &[u64] {
        &self.words
    }

    /// Raw `n`-bit code of the shift field value used for zero, if any.
    pub fn zero_shift(&self) -> Option<u8> {
        self.zero_coded.then(|| scale_gates(self.bits) as u8)
    }

    /// Raw code of element `i`: sign in bit 0, shift above.
    #[inline]
    pub fn raw(&self, i: usize) -> u8 {
        extract(&self.words, i, self.bits)
    }

    /// Decodes every element; `None` marks a zero weight.
    pub fn unpack_with_zeros(&self) -> Vec<Option<ShiftCode>> {
        let zero = self.zero_shift();
        (0..self.count)
            .map(|i| {
                let raw = self.raw(i);
                let code = ShiftCode::new(raw & 1 == 1, raw >> 1);
                (Some(code.shift) != zero).then_some(code)
            })
            .collect()
    }

    /// Decodes a zero-free blob; errors if it contains zero codes.
    pub fn unpack(&self) -> Result<Vec<ShiftCode>> {
        self.unpack_with_zeros()
            .into_iter()
            .enumerate()
            .map(|(index, c)| c.ok_or(Error::NotShiftWeight { index, value: 0.0 }))
            .collect()
    }

    /// Real weights `±2^(S+b)` (0 for zero codes).
    pub fn decode_values(&self) -> Vec<f64> {
        let b = self.exponent_bias();
        self.unpack_with_zeros()
            .into_iter()
            .map(|c| c.map_or(0.0, |c| c.value(b)))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.payload().len());
        out.extend_from_slice(&BLOB_MAGIC);
        out.push(BLOB_VERSION);
        out.push(self.bits | if self.zero_coded { ZERO_CODED_FLAG } else { 0 });
        out.extend_from_slice(&self.exponent_bias.to_le_bytes());
        out.extend_from_slice(&(self.count as u64).to_le_bytes());
        for w in self.payload() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    /// Parses one blob from the front of `bytes`; returns it and the number
    /// of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format("weight blob header truncated".into()));
        }
        if bytes[..4] != BLOB_MAGIC {
            return Err(Error::Format("bad weight blob magic".into()));
        }
        if bytes[4] != BLOB_VERSION {
            return Err(Error::Format(format!("unsupported weight blob version {}", bytes[4])));
        }
        let zero_coded = bytes[5] & ZERO_CODED_FLAG != 0;
        let bits = bytes[5] & !ZERO_CODED_FLAG;
        check_bits(bits).map_err(|e| Error::Format(e.to_string()))?;
        let exponent_bias = i8::from_le_bytes([bytes[6]]);
        let count = u64::from_le_bytes(bytes[7..15].try_into().expect("8 bytes"));
        let count = usize::try_from(count).map_err(|_| Error::Format("weight count overflows".into()))?;
        let n_words = count
            .checked_mul(usize::from(bits))
            .map(|b| b.div_ceil(64))
            .ok_or_else(|| Error::Format("weight count overflows".into()))?;
        let end = n_words
            .checked_mul(8)
            .and_then(|b| b.checked_add(HEADER_LEN))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("weight blob payload truncated".into()))?;
        let mut words: Vec<u64> = bytes[HEADER_LEN..end]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        words.push(0);
        let blob = Self {
            bits,
            exponent_bias,
            zero_coded,
            count,
            words,
        };
        if zero_coded {
            let zero = scale_gates(bits) as u8;
            if let Some(index) = (0..count).find(|&i| blob.raw(i) == (zero << 1) | 1) {
                return Err(Error::Format(format!("invalid code at index {index} of zero-coded blob")));
            }
        }
        Ok((blob, end))
    }
}

/// Branch-free read of the `n`-bit code at position `i`; needs one padding
/// word after the payload.
#[inline(always)]
pub(crate) fn extract(words: &[u64], i: usize, bits: u8) -> u8 {
    let n = usize::from(bits);
    let bit = i * n;
    let (w, off) = (bit / 64, bit % 64);
    let lo = words[w] >> off;
    // two shifts keep the amount below 64 when off == 0
    let hi = (words[w + 1] << 1) << (63 - off);
    ((lo | hi) & ((1u64 << n) - 1)) as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_round_trip() {
        let blob = PackedWeightBlob::pack(&[], 3, 0).unwrap();
        assert_eq!(blob.len(), 0);
        assert!(blob.payload().is_empty());
        let (back, used) = PackedWeightBlob::from_bytes(&blob.to_bytes()).unwrap();
        assert_eq!(back, blob);
        assert_eq!(used, 15);
    }

    #[test]
    fn single_two_bit_code() {
        let blob = PackedWeightBlob::pack(&[ShiftCode::new(false, 0)], 2, 0).unwrap();
        assert_eq!(blob.payload(), &[0]);
        assert_eq!(blob.unpack().unwrap(), vec![ShiftCode::new(false, 0)]);
    }

    #[test]
    fn layout_is_lsb_first() {
        // (−,1) → 0b11, (+,2) → 0b100 at n = 3
        let blob = PackedWeightBlob::pack(&[ShiftCode::new(true, 1), ShiftCode::new(false, 2)], 3, -2).unwrap();
        assert_eq!(blob.payload(), &[0b100_011]);
        let bytes = blob.to_bytes();
        assert_eq!(&bytes[..4], b"DSHW");
        assert_eq!(bytes[5], 3);
        assert_eq!(bytes[6] as i8, -2);
        assert_eq!(u64::from_le_bytes(bytes[7..15].try_into().unwrap()), 2);
    }

    #[test]
    fn overflow_rejected() {
        assert!(matches!(
            PackedWeightBlob::pack(&[ShiftCode::new(false, 2)], 2, 0),
            Err(Error::CodeOverflow { shift: 2, bits: 2 })
        ));
        // the top shift is reserved for zero in zero-coded blobs
        assert!(PackedWeightBlob::pack_with_zeros(&[Some(ShiftCode::new(false, 3))], 3, 0).is_err());
    }

    #[test]
    fn zero_code_round_trip() {
        let codes = vec![None, Some(ShiftCode::new(true, 2)), None, Some(ShiftCode::new(false, 0))];
        let blob = PackedWeightBlob::pack_with_zeros(&codes, 3, 1).unwrap();
        assert_eq!(blob.unpack_with_zeros(), codes);
        assert_eq!(blob.decode_values(), vec![0.0, -8.0, 0.0, 2.0]);
        assert!(blob.unpack().is_err());
        let (back, _) = PackedWeightBlob::from_bytes(&blob.to_bytes()).unwrap();
        assert!(back.is_zero_coded());
        assert_eq!(back, blob);
    }

    #[test]
    fn corrupt_headers_rejected() {
        let blob = PackedWeightBlob::pack(&[ShiftCode::new(false, 1); 40], 3, 0).unwrap();
        let bytes = blob.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(PackedWeightBlob::from_bytes(&bad).is_err());
        assert!(PackedWeightBlob::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad_bits = bytes.clone();
        bad_bits[5] = 7;
        assert!(PackedWeightBlob::from_bytes(&bad_bits).is_err());
    }

    fn codes(bits: u8, len: usize) -> impl Strategy<Value = Vec<ShiftCode>> {
        let max = scale_gates(bits) as u8;
        prop::collection::vec((any::<bool>(), 0..=max).prop_map(|(n, s)| ShiftCode::new(n, s)), len)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn pack_unpack_round_trip(
            (bits, codes) in (2u8..=4).prop_flat_map(|b| (Just(b), codes(b, 10_000))),
            bias in -8i32..8,
        ) {
            let blob = PackedWeightBlob::pack(&codes, bits, bias).unwrap();
            prop_assert_eq!(blob.payload().len(), (codes.len() * bits as usize).div_ceil(64));
            prop_assert_eq!(&blob.unpack().unwrap(), &codes);
            let (back, _) = PackedWeightBlob::from_bytes(&blob.to_bytes()).unwrap();
            prop_assert_eq!(back, blob);
        }
    }
}
