//! MNIST (IDX), CIFAR-10 (binary batches), synthetic blobs, and the
//! class-disjoint transfer split.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel standardization constants, computed on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone)]
enum Pixels {
    /// Raw bytes, read as `v / 255`.
    Bytes(Arc<Vec<u8>>),
    Real(Arc<Vec<f32>>),
}

impl Pixels {
    fn raw(&self, i: usize) -> f64 {
        match self {
            Pixels::Bytes(b) => f64::from(b[i]) / 255.0,
            Pixels::Real(r) => f64::from(r[i]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Immutable labelled images; subsets share the pixel buffer.
#[derive(Debug, Clone)]
pub struct Dataset {
    sample_shape: Vec<usize>,
    classes: usize,
    pixels: Pixels,
    /// Position of each sample in `pixels`.
    rows: Vec<usize>,
    labels: Vec<usize>,
    norm: Normalization,
}

impl Dataset {
    fn build(sample_shape: Vec<usize>, classes: usize, pixels: Pixels, labels: Vec<usize>) -> Result<Self> {
        let len: usize = sample_shape.iter().product();
        let stored = match &pixels {
            Pixels::Bytes(b) => b.len(),
            Pixels::Real(r) => r.len(),
        };
        if stored != len * labels.len() {
            return Err(Error::Data(format!("{stored} pixel values for {} samples of {sample_shape:?}", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {classes})")));
        }
        let channels = sample_shape[0];
        let mut ds = Self {
            sample_shape,
            classes,
            pixels,
            rows: (0..labels.len()).collect(),
            labels,
            norm: Normalization::identity(channels),
        };
        ds.norm = ds.compute_normalization();
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn with_normalization(mut self, norm: Normalization) -> Result<Self> {
        if norm.mean.len() != self.sample_shape[0] || norm.std.len() != self.sample_shape[0] {
            return Err(Error::Data(format!(
                "normalization for {} channels on {}-channel data",
                norm.mean.len(),
                self.sample_shape[0]
            )));
        }
        self.norm = norm;
        Ok(self)
    }

    /// Mean and population standard deviation per channel of the raw values.
    pub fn compute_normalization(&self) -> Normalization {
        let channels = self.sample_shape[0];
        let plane: usize = self.sample_shape[1..].iter().product();
        let mut sum = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        let stride = channels * plane;
        for &row in &self.rows {
            for c in 0..channels {
                let base = row * stride + c * plane;
                for i in base..base + plane {
                    let v = self.pixels.raw(i);
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (self.rows.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Normalization { mean, std }
    }

    /// Normalized images and labels for the given sample positions.
    pub fn batch(&self, indices: &[usize]) -> Result<LabeledBatch> {
        let channels = self.sample_shape[0];
        let plane: usize = self.sample_shape[1..].iter().product();
        let stride = channels * plane;
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let row = *self
                .rows
                .get(i)
                .ok_or_else(|| Error::Data(format!("sample {i} out of range {}", self.len())))?;
            for c in 0..channels {
                let (m, s) = (self.norm.mean[c], self.norm.std[c]);
                let base = row * stride + c * plane;
                data.extend((base..base + plane).map(|p| (self.pixels.raw(p) - m) / s));
            }
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Ok(LabeledBatch {
            images: Tensor::new(shape, data)?,
            labels,
        })
    }

    /// Samples at `indices`, keeping pixel storage and normalization.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut rows = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!("sample {i} out of range {}", self.len())));
            }
            rows.push(self.rows[i]);
            labels.push(self.labels[i]);
        }
        Ok(Self {
            rows,
            labels,
            ..self.clone()
        })
    }

    /// The first `n_per_class` samples of every class, in dataset order.
    pub fn take_per_class(&self, n_per_class: usize) -> Result<Self> {
        let mut counts = vec![0; self.classes];
        let picked: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = &mut counts[self.labels[i]];
                *c += 1;
                *c <= n_per_class
            })
            .collect();
        self.subset(&picked)
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Reads an IDX image file (magic 0x803) and label file (magic 0x801).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read(images_path)?;
    let labels = read(labels_path)?;
    if images.len() < 16 || be_u32(&images, 0) != 0x0803 {
        return Err(Error::Data(format!("{}: not an IDX image file", images_path.display())));
    }
    if labels.len() < 8 || be_u32(&labels, 0) != 0x0801 {
        return Err(Error::Data(format!("{}: not an IDX label file", labels_path.display())));
    }
    let n = be_u32(&images, 4) as usize;
    let (h, w) = (be_u32(&images, 8) as usize, be_u32(&images, 12) as usize);
    let n_labels = be_u32(&labels, 4) as usize;
    if n != n_labels {
        return Err(Error::Data(format!("{n} images but {n_labels} labels")));
    }
    if images.len() != 16 + n * h * w || labels.len() != 8 + n {
        return Err(Error::Data("IDX file truncated or oversized".into()));
    }
    Dataset::build(
        vec![1, h, w],
        10,
        Pixels::Bytes(Arc::new(images[16..].to_vec())),
        labels[8..].iter().map(|&l| usize::from(l)).collect(),
    )
}

/// MNIST train and test splits from the standard IDX file names; the test
/// split uses the training normalization.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
    let test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?
        .with_normalization(train.normalization().clone())?;
    Ok((train, test))
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_PER_FILE: usize = 10_000;

/// Concatenates CIFAR-10 binary batch files (label byte + 3072 planar RGB bytes).
pub fn load_cifar_batches(paths: &[PathBuf]) -> Result<Dataset> {
    let mut pixels = Vec::with_capacity(paths.len() * CIFAR_PER_FILE * 3072);
    let mut labels = Vec::with_capacity(paths.len() * CIFAR_PER_FILE);
    for path in paths {
        let bytes = read(path)?;
        if bytes.len() != CIFAR_RECORD * CIFAR_PER_FILE {
            return Err(Error::Data(format!(
                "{}: {} bytes, expected {}",
                path.display(),
                bytes.len(),
                CIFAR_RECORD * CIFAR_PER_FILE
            )));
        }
        for record in bytes.chunks_exact(CIFAR_RECORD) {
            labels.push(usize::from(record[0]));
            pixels.extend_from_slice(&record[1..]);
        }
    }
    Dataset::build(vec![3, 32, 32], 10, Pixels::Bytes(Arc::new(pixels)), labels)
}

/// CIFAR-10 train (`data_batch_1..5.bin`) and test (`test_batch.bin`).
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train_files: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    let train = load_cifar_batches(&train_files)?;
    let test = load_cifar_batches(&[dir.join("test_batch.bin")])?.with_normalization(train.normalization().clone())?;
    Ok((train, test))
}

/// Gaussian clusters in `dim` dimensions with unit noise. Centers sit on
/// scaled one-hot directions so every pair is `4·sqrt(2)` σ apart along the
/// line joining them, at least 4σ.
pub fn synthetic_blobs(classes: usize, dim: usize, n_per_class: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Data("synthetic_blobs needs at least 2 classes".into()));
    }
    if dim == 0 {
        return Err(Error::Data("synthetic_blobs needs dim > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = |c: usize, d: usize| -> f64 {
        // classes beyond dim reuse axes with the opposite sign
        let axis = c % dim;
        let sign = if (c / dim) % 2 == 0 { 1.0 } else { -1.0 };
        let ring = (c / (2 * dim)) as f64 + 1.0;
        if d == axis {
            4.0 * sign * ring
        } else {
            0.0
        }
    };
    let mut values = Vec::with_capacity(classes * n_per_class * dim);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for _ in 0..n_per_class {
        for c in 0..classes {
            for d in 0..dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                values.push((center(c, d) + z) as f32);
            }
            labels.push(c);
        }
    }
    let mut ds = Dataset::build(vec![dim], classes, Pixels::Real(Arc::new(values)), labels)?;
    ds.norm = Normalization::identity(dim);
    Ok(ds)
}

/// Splits by class into a pretraining set and a finetuning set, relabelling
/// each side to `0..k` in the order the classes are listed.
pub fn transfer_split(dataset: &Dataset, pretrain_classes: &[usize], finetune_classes: &[usize]) -> Result<(Dataset, Dataset)> {
    if pretrain_classes.is_empty() || finetune_classes.is_empty() {
        return Err(Error::Data("transfer split needs non-empty class sets".into()));
    }
    if let Some(c) = pretrain_classes.iter().find(|c| finetune_classes.contains(c)) {
        return Err(Error::Data(format!("class {c} appears in both splits")));
    }
    let side = |classes: &[usize]| -> Result<Dataset> {
        let mut seen = std::collections::HashSet::new();
        if let Some(c) = classes.iter().find(|&&c| c >= dataset.classes || !seen.insert(c)) {
            return Err(Error::Data(format!("invalid or repeated class {c}")));
        }
        let picked: Vec<usize> = (0..dataset.len()).filter(|&i| classes.contains(&dataset.labels[i])).collect();
        if picked.is_empty() {
            return Err(Error::Data(format!("no samples for classes {classes:?}")));
        }
        let mut sub = dataset.subset(&picked)?;
        for l in &mut sub.labels {
            *l = classes.iter().position(|c| c == l).expect("filtered");
        }
        sub.classes = classes.len();
        Ok(sub)
    };
    Ok((side(pretrain_classes)?, side(finetune_classes)?))
}

/// Directory holding `mnist/` and `cifar-10-batches-bin/`: `$DENSESHIFT_DATA`,
/// else `data/` at the workspace root.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os("DENSESHIFT_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
            p.canonicalize().unwrap_or(p)
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn scratch(bytes: &[u8]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(bytes).unwrap();
        f
    }

    fn idx_pair(n: usize, image_magic: u32) -> (tempfile::NamedTempFile, tempfile::NamedTempFile) {
        let mut images = image_magic.to_be_bytes().to_vec();
        for v in [n as u32, 28, 28] {
            images.extend(v.to_be_bytes());
        }
        images.extend((0..n * 784).map(|i| (i % 256) as u8));
        let mut labels = 0x0801u32.to_be_bytes().to_vec();
        labels.extend((n as u32).to_be_bytes());
        labels.extend((0..n).map(|i| i as u8));
        (scratch(&images), scratch(&labels))
    }

    #[test]
    fn crafted_idx_loads() {
        let (img, lab) = idx_pair(2, 0x0803);
        let ds = load_idx(img.path(), lab.path()).unwrap();
        assert_eq!(ds.len(), 2);
        let b = ds.batch(&[0, 1]).unwrap();
        assert_eq!(b.images.shape(), &[2, 1, 28, 28]);
        assert_eq!(b.labels, vec![0, 1]);
    }

    #[test]
    fn wrong_magic_rejected() {
        let (img, lab) = idx_pair(2, 0x0801);
        assert!(matches!(load_idx(img.path(), lab.path()), Err(Error::Data(_))));
    }

    #[test]
    fn truncated_cifar_rejected() {
        let f = scratch(&[0u8; 3073 * 3]);
        assert!(load_cifar_batches(&[f.path().to_path_buf()]).is_err());
    }

    #[test]
    fn cifar_record_layout() {
        let mut bytes = vec![0u8; CIFAR_RECORD * CIFAR_PER_FILE];
        bytes[0] = 9;
        bytes[1] = 255;
        bytes[1 + 1024] = 128;
        let f = scratch(&bytes);
        let ds = load_cifar_batches(&[f.path().to_path_buf()]).unwrap();
        assert_eq!(ds.len(), 10_000);
        assert_eq!(ds.labels()[0], 9);
        let raw = ds.clone().with_normalization(Normalization::identity(3)).unwrap();
        let b = raw.batch(&[0]).unwrap();
        assert_eq!(b.images.data()[0], 1.0);
        assert!((b.images.data()[1024] - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn normalization_zero_mean_unit_std() {
        let ds = synthetic_blobs(3, 4, 50, 1).unwrap();
        let ds = ds.clone().with_normalization(ds.compute_normalization()).unwrap();
        let all: Vec<usize> = (0..ds.len()).collect();
        let b = ds.batch(&all).unwrap();
        for d in 0..4 {
            let col: Vec<f64> = b.images.data().iter().skip(d).step_by(4).copied().collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn blobs_deterministic_and_sized() {
        let a = synthetic_blobs(2, 3, 10, 7).unwrap();
        let b = synthetic_blobs(2, 3, 10, 7).unwrap();
        assert_eq!(a.len(), 20);
        let idx: Vec<usize> = (0..20).collect();
        assert_eq!(a.batch(&idx).unwrap().images, b.batch(&idx).unwrap().images);
        assert!(synthetic_blobs(1, 3, 10, 7).is_err());
    }

    #[test]
    fn transfer_split_relabels() {
        let ds = synthetic_blobs(10, 10, 3, 0).unwrap();
        let (pre, fine) = transfer_split(&ds, &[0, 1, 2, 3, 4], &[5, 6, 7, 8, 9]).unwrap();
        assert_eq!((pre.len(), fine.len()), (15, 15));
        assert_eq!((pre.classes(), fine.classes()), (5, 5));
        let mut seen: Vec<usize> = fine.labels().to_vec();
        seen.sort();
        seen.dedup();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert!(transfer_split(&ds, &[0, 1], &[1, 2]).is_err());
        assert!(transfer_split(&ds, &[0, 1], &[]).is_err());
    }
}
