//! Dataset loading, encoding and batching.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 3073;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: cannot read: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:#010x} (expected {expected:#010x})")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated (need {needed} bytes, have {have})")]
    Truncated { path: PathBuf, needed: usize, have: usize },
    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: length {len} is not a multiple of {CIFAR_RECORD}")]
    RecordLength { path: PathBuf, len: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("minibatch size {m} invalid for {n} samples")]
    BatchSize { m: usize, n: usize },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Images (batch-leading, values in `[0, 1]`) with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self, DataError> {
        if images.batch() != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.batch(),
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::LabelRange { label, classes });
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
        }
    }

    /// First `k` samples in file order, balanced across classes. Earlier
    /// classes absorb the remainder when `k` is not a multiple of the class
    /// count. Returns the whole set when `k >= len`.
    pub fn stratified_subset(&self, k: usize) -> Dataset {
        if k >= self.len() {
            return self.clone();
        }
        let base = k / self.classes;
        let extra = k % self.classes;
        let mut quota: Vec<usize> = (0..self.classes).map(|c| base + usize::from(c < extra)).collect();
        let mut picked = Vec::with_capacity(k);
        for (i, &l) in self.labels.iter().enumerate() {
            if quota[l] > 0 {
                quota[l] -= 1;
                picked.push(i);
                if picked.len() == k {
                    break;
                }
            }
        }
        self.select(&picked)
    }

    pub fn one_hot_labels(&self) -> Tensor<f32> {
        one_hot_batch(&self.labels, self.classes).expect("labels validated on construction")
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(buf: &[u8], at: usize, path: &Path) -> Result<u32, DataError> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Truncated {
            path: path.to_path_buf(),
            needed: at + 4,
            have: buf.len(),
        })
}

fn check_len(buf: &[u8], needed: usize, path: &Path) -> Result<(), DataError> {
    if buf.len() < needed {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            needed,
            have: buf.len(),
        });
    }
    Ok(())
}

/// Reads an IDX image/label pair. Gzip input is detected by its magic bytes.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset, DataError> {
    let img = read_file(images_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.to_path_buf(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let pixels = n * rows * cols;
    check_len(&img, 16 + pixels, images_path)?;

    let lab = read_file(labels_path)?;
    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.to_path_buf(),
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let nl = be_u32(&lab, 4, labels_path)? as usize;
    check_len(&lab, 8 + nl, labels_path)?;
    if nl != n {
        return Err(DataError::CountMismatch { images: n, labels: nl });
    }

    let data = img[16..16 + pixels].iter().map(|&b| f32::from(b) / 255.0).collect();
    let images = Tensor::new(vec![n, 1, rows, cols], data).map_err(|e| DataError::Invalid(e.to_string()))?;
    let labels = lab[8..8 + n].iter().map(|&b| usize::from(b)).collect();
    Dataset::new(images, labels, 10, split)
}

fn first_existing(dir: &Path, stem: &str) -> PathBuf {
    let plain = dir.join(stem);
    let gz = dir.join(format!("{stem}.gz"));
    if !plain.exists() && gz.exists() {
        gz
    } else {
        plain
    }
}

/// FashionMNIST from a directory holding the standard IDX file names
/// (optionally gzipped).
pub fn load_fashion_mnist(dir: &Path, split: Split) -> Result<Dataset, DataError> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    load_idx(
        &first_existing(dir, &format!("{prefix}-images-idx3-ubyte")),
        &first_existing(dir, &format!("{prefix}-labels-idx1-ubyte")),
        split,
    )
}

/// Reads CIFAR10 binary batches: 1 label byte then 3072 channel-planar pixels.
pub fn load_cifar10(paths: &[PathBuf], split: Split) -> Result<Dataset, DataError> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let buf = read_file(path)?;
        if buf.len() % CIFAR_RECORD != 0 {
            return Err(DataError::RecordLength {
                path: path.clone(),
                len: buf.len(),
            });
        }
        pixels.reserve(buf.len() / CIFAR_RECORD * 3072);
        for rec in buf.chunks_exact(CIFAR_RECORD) {
            labels.push(usize::from(rec[0]));
            pixels.extend(rec[1..].iter().map(|&b| f32::from(b) / 255.0));
        }
    }
    let n = labels.len();
    let images = Tensor::new(vec![n, 3, 32, 32], pixels).map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new(images, labels, 10, split)
}

/// CIFAR10 from the standard `cifar-10-batches-bin` directory layout.
pub fn load_cifar10_dir(dir: &Path, split: Split) -> Result<Dataset, DataError> {
    let paths: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };
    load_cifar10(&paths, split)
}

pub fn one_hot(label: usize, classes: usize) -> Result<Tensor<f32>, DataError> {
    one_hot_batch(&[label], classes).map(|t| t.reshape([classes]).expect("same size"))
}

pub fn one_hot_batch(labels: &[usize], classes: usize) -> Result<Tensor<f32>, DataError> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(DataError::LabelRange { label: l, classes });
        }
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data).map_err(|e| DataError::Invalid(e.to_string()))
}

pub const TOY_DIM: usize = 8;

/// Two Gaussian blobs in 8 dimensions, one per class, with means at 0.25 and
/// 0.75 on every coordinate. Samples whose projection onto the mean axis lands
/// within 0.2 of the midpoint are redrawn, so the classes are linearly
/// separable by construction. Labels alternate, then the order is shuffled.
pub fn synthetic_toy(n: usize, seed: u64) -> Result<Dataset, DataError> {
    if n < 2 {
        return Err(DataError::Invalid(format!("toy dataset needs n >= 2, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.06).expect("valid std");
    let axis = 1.0 / (TOY_DIM as f64).sqrt();
    let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n * TOY_DIM);
    for &l in &labels {
        let mean: f64 = if l == 0 { 0.25 } else { 0.75 };
        loop {
            let x: Vec<f64> = (0..TOY_DIM).map(|_| (mean + noise.sample(&mut rng)).clamp(0.0, 1.0)).collect();
            let proj: f64 = x.iter().map(|v| (v - 0.5) * axis).sum();
            if proj.abs() >= 0.2 {
                data.extend(x.iter().map(|&v| v as f32));
                break;
            }
        }
    }
    let images = Tensor::new(vec![n, TOY_DIM], data).map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new(images, labels, 2, Split::Train)
}

/// Seeded permutation of `0..n` (Fisher-Yates on a ChaCha8 stream).
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Index lists of one epoch's minibatches; the ragged tail is dropped.
pub fn batch_indices(n: usize, m: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>, DataError> {
    if m == 0 || m > n {
        return Err(DataError::BatchSize { m, n });
    }
    let perm = permutation(n, epoch_seed);
    Ok(perm.chunks_exact(m).map(<[usize]>::to_vec).collect())
}

pub struct Batch {
    pub indices: Vec<usize>,
    pub x: Tensor<f32>,
    pub y: Tensor<f32>,
}

/// Minibatches `(x, one-hot y)` for one epoch.
pub fn minibatches(data: &Dataset, m: usize, epoch_seed: u64) -> Result<impl Iterator<Item = Batch> + '_, DataError> {
    let batches = batch_indices(data.len(), m, epoch_seed)?;
    Ok(batches.into_iter().map(move |indices| {
        let x = data.images.gather_rows(&indices);
        let labels: Vec<usize> = indices.iter().map(|&i| data.labels[i]).collect();
        let y = one_hot_batch(&labels, data.classes).expect("labels validated on construction");
        Batch { indices, x, y }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_basics() {
        assert_eq!(one_hot(0, 2).unwrap().data(), &[1.0, 0.0]);
        let e3 = one_hot(3, 10).unwrap();
        assert_eq!(e3.data()[3], 1.0);
        assert_eq!(e3.data().iter().sum::<f32>(), 1.0);
        assert!(matches!(one_hot(2, 2), Err(DataError::LabelRange { .. })));
    }

    #[test]
    fn batch_counts() {
        assert_eq!(batch_indices(10, 3, 1).unwrap().len(), 3);
        assert!(matches!(batch_indices(3, 4, 1), Err(DataError::BatchSize { .. })));
    }

    #[test]
    fn stratified_subset_balances() {
        let labels: Vec<usize> = (0..40).map(|i| (i * 7) % 4).collect();
        let d = Dataset::new(Tensor::zeros([40, 1]), labels, 4, Split::Train).unwrap();
        let s = d.stratified_subset(10);
        let counts: Vec<usize> = (0..4).map(|c| s.labels.iter().filter(|&&l| l == c).count()).collect();
        assert_eq!(counts, vec![3, 3, 2, 2]);
    }
}
