//! Single-file model format.
//!
//! ```text
//! "DSNM" | version u8 | header length u32 LE | header (TOML, UTF-8)
//! per layer, in order:
//!   conv/linear: weight record, then a bias record if the layer has a bias
//!   batchnorm:   gamma, beta, running mean, running variance records
//! record: tag u8 = 0 raw tensor (count u64 LE, f64 LE values)
//!                = 1 packed shift codes (a DSHW blob)
//! CRC-64/XZ of every preceding byte, u64 LE
//! ```
//!
//! Quantized layers store their discrete weights as packed codes, so a
//! loaded DenseShift layer carries latents rebuilt from the codes rather than
//! the trained ones; its materialized weights are identical.

use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use denseshift::convert::{ConversionReport, EquivalenceReport};
use denseshift::data::Normalization;
use denseshift::kernel::{pack_weights, PackedWeightBlob};
use denseshift::nn::{build_network, Layer, Network, NetworkSpec, Weights};
use denseshift::reparam::{LatentInit, LatentWeights, SteOptions};
use denseshift::{Error, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::error::{CliError, CliResult};

pub const MODEL_MAGIC: [u8; 4] = *b"DSNM";
pub const MODEL_VERSION: u8 = 1;
const CRC: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

const TAG_RAW: u8 = 0;
const TAG_PACKED: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub normalization: Normalization,
    /// Data the model was trained on, so `eval` can reload the same split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub ste: SteOptions,
    pub spec: NetworkSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conversion: Option<ConversionReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equivalence: Option<EquivalenceReport>,
}

#[derive(Debug, Clone)]
pub struct ModelFile {
    pub header: ModelHeader,
    pub network: Network,
}

impl ModelFile {
    pub fn new(network: Network, normalization: Normalization, data: Option<DataConfig>) -> Self {
        let header = ModelHeader {
            normalization,
            data,
            ste: network.ste,
            spec: network.spec(),
            conversion: None,
            equivalence: None,
        };
        Self { header, network }
    }

    pub fn to_bytes(&self) -> CliResult<Vec<u8>> {
        let mut header = self.header.clone();
        header.spec = self.network.spec();
        let text = toml::to_string(&header).map_err(|e| CliError::Config(format!("model header: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(&MODEL_MAGIC);
        out.push(MODEL_VERSION);
        out.extend_from_slice(&u32::try_from(text.len()).expect("header under 4 GiB").to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for layer in self.network.layers() {
            match layer {
                Layer::Conv2d(c) => weighted(&mut out, &c.weights, c.bias.as_ref())?,
                Layer::Linear(l) => weighted(&mut out, &l.weights, l.bias.as_ref())?,
                Layer::BatchNorm(bn) => {
                    for t in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                        raw(&mut out, t);
                    }
                }
                _ => {}
            }
        }
        let crc = CRC.checksum(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> CliResult<Self> {
        let bad = |m: &str| CliError::Core(Error::Format(m.to_string()));
        if bytes.len() < 4 + 1 + 4 + 8 || bytes[..4] != MODEL_MAGIC {
            return Err(bad("not a model file"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
        if CRC.checksum(body) != stored {
            return Err(bad("checksum mismatch"));
        }
        if body[4] != MODEL_VERSION {
            return Err(bad(&format!("unsupported model version {}", body[4])));
        }
        let len = u32::from_le_bytes(body[5..9].try_into().expect("4 bytes")) as usize;
        let text = body
            .get(9..9 + len)
            .ok_or_else(|| bad("truncated header"))
            .and_then(|b| std::str::from_utf8(b).map_err(|_| bad("header is not UTF-8")))?;
        let header: ModelHeader = toml::from_str(text).map_err(|e| bad(&format!("header: {e}")))?;
        let mut reader = Reader { bytes: body, at: 9 + len };
        let template = build_network(&header.spec, LatentInit::default(), 0)?;
        let mut layers = template.into_layers();
        for layer in &mut layers {
            match layer {
                Layer::Conv2d(c) => {
                    c.weights = reader.weights(&c.weights)?;
                    if let Some(b) = &mut c.bias {
                        *b = reader.raw(b.shape())?;
                    }
                }
                Layer::Linear(l) => {
                    l.weights = reader.weights(&l.weights)?;
                    if let Some(b) = &mut l.bias {
                        *b = reader.raw(b.shape())?;
                    }
                }
                Layer::BatchNorm(bn) => {
                    for t in [&mut bn.gamma, &mut bn.beta, &mut bn.running_mean, &mut bn.running_var] {
                        *t = reader.raw(t.shape())?;
                    }
                }
                _ => {}
            }
        }
        if reader.at != body.len() {
            return Err(bad("trailing bytes after the last layer"));
        }
        let mut network = Network::from_layers(header.spec.input.clone(), header.spec.classes, layers)?;
        network.ste = header.ste;
        Ok(Self { header, network })
    }

    pub fn save(&self, path: &Path) -> CliResult<u64> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes).map_err(|e| CliError::io(path, e))?;
        Ok(checksum_of(&bytes))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// The stored trailer checksum of serialized model bytes.
pub fn checksum_of(bytes: &[u8]) -> u64 {
    u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"))
}

fn raw(out: &mut Vec<u8>, t: &Tensor) {
    out.push(TAG_RAW);
    out.extend_from_slice(&(t.len() as u64).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn weighted(out: &mut Vec<u8>, weights: &Weights, bias: Option<&Tensor>) -> CliResult<()> {
    match pack_weights(weights)? {
        Some(blob) => {
            out.push(TAG_PACKED);
            out.extend_from_slice(&blob.to_bytes());
        }
        None => raw(out, &weights.effective()),
    }
    if let Some(b) = bias {
        raw(out, b);
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> CliResult<&[u8]> {
        let s = self
            .bytes
            .get(self.at..self.at + n)
            .ok_or_else(|| CliError::Core(Error::Format("truncated layer payload".into())))?;
        self.at += n;
        Ok(s)
    }

    fn tag(&mut self, want: u8) -> CliResult<()> {
        let tag = self.take(1)?[0];
        if tag != want {
            return Err(CliError::Core(Error::Format(format!("record tag {tag}, expected {want}"))));
        }
        Ok(())
    }

    fn raw(&mut self, shape: &[usize]) -> CliResult<Tensor> {
        self.tag(TAG_RAW)?;
        let count = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize;
        let want: usize = shape.iter().product();
        if count != want {
            return Err(CliError::Core(Error::Format(format!("{count} values stored for shape {shape:?}"))));
        }
        let data = self
            .take(count * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Tensor::new(shape.to_vec(), data)?)
    }

    fn weights(&mut self, template: &Weights) -> CliResult<Weights> {
        let shape = template.shape().to_vec();
        match template {
            Weights::Full(_) => Ok(Weights::Full(self.raw(&shape)?)),
            Weights::DenseShift(_) | Weights::Quantized { .. } => {
                self.tag(TAG_PACKED)?;
                let (blob, used) = PackedWeightBlob::from_bytes(&self.bytes[self.at..])?;
                self.at += used;
                if blob.len() != shape.iter().product::<usize>() {
                    return Err(CliError::Core(Error::Format(format!("{} codes stored for shape {shape:?}", blob.len()))));
                }
                Ok(match template {
                    Weights::DenseShift(_) => {
                        Weights::DenseShift(LatentWeights::from_codes(&shape, blob.bits(), blob.exponent_bias(), &blob.unpack()?)?)
                    }
                    Weights::Quantized { config, .. } => Weights::Quantized {
                        latent: Tensor::new(shape, blob.decode_values())?,
                        config: *config,
                    },
                    Weights::Full(_) => unreachable!(),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use denseshift::nn::presets::{lenet, PresetOptions, WeightChoice};

    fn model(weights: WeightChoice) -> ModelFile {
        let opts = PresetOptions {
            weights,
            ..PresetOptions::default()
        };
        let net = build_network(&lenet(opts, 10), LatentInit::Kaiming, 3).unwrap();
        ModelFile::new(net, Normalization::identity(1), None)
    }

    #[test]
    fn discrete_layers_round_trip_bit_exactly() {
        for choice in [WeightChoice::DenseShift, WeightChoice::SignShift, WeightChoice::SymmetricPot, WeightChoice::FullPrecision] {
            let m = model(choice);
            let bytes = m.to_bytes().unwrap();
            let back = ModelFile::from_bytes(&bytes).unwrap();
            assert_eq!(back.to_bytes().unwrap(), bytes);
            for (a, b) in m.network.layers().iter().zip(back.network.layers()) {
                if let (Some(x), Some(y)) = (a.weights(), b.weights()) {
                    assert_eq!(x.effective(), y.effective());
                    assert_eq!(x.provider(), y.provider());
                }
            }
        }
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = model(WeightChoice::DenseShift).to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(ModelFile::from_bytes(&bytes), Err(CliError::Core(Error::Format(_)))));
        assert!(ModelFile::from_bytes(b"DSNM").is_err());
    }
}
