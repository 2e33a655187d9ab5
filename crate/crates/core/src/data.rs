//! Dataset generation and ingestion.
//!
//! The fast path is a synthetic two-moons task small enough for CI; image
//! experiments ingest IDX (MNIST layout) and CIFAR-10 binary files from
//! local disk. Every loader normalizes inputs into [0, 1], which the
//! attack projection relies on.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::RngStream;
use crate::tensor::{Array, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: expected magic {expected:#010x}, found {got:#010x}")]
    WrongMagic {
        path: String,
        expected: u32,
        got: u32,
    },
    #[error("{path}: truncated, needed {needed} bytes but only {got} present")]
    Truncated {
        path: String,
        needed: usize,
        got: usize,
    },
    #[error("image file holds {images} samples but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: length {len} is not a whole number of {record}-byte records")]
    BadRecordLength {
        path: String,
        len: usize,
        record: usize,
    },
    #[error("label {got} out of range for {classes} classes")]
    BadLabel { got: usize, classes: usize },
    #[error("invalid dataset: {detail}")]
    Invalid { detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

/// Samples, labels, and the class count. Inputs are [n, features] or
/// [n, c, h, w], always inside [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Array,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        inputs: Array,
        labels: Vec<usize>,
        n_classes: usize,
        split: Split,
    ) -> Result<Self, DataError> {
        let ds = Self {
            inputs,
            labels,
            n_classes,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let shape = self.inputs.shape();
        if shape.is_empty() || shape[0] != self.labels.len() {
            return Err(DataError::Invalid {
                detail: format!(
                    "input shape {shape:?} does not match {} labels",
                    self.labels.len()
                ),
            });
        }
        if self.n_classes < 2 {
            return Err(DataError::Invalid {
                detail: format!("need at least 2 classes, got {}", self.n_classes),
            });
        }
        if let Some(&c) = self.labels.iter().find(|&&c| c >= self.n_classes) {
            return Err(DataError::BadLabel {
                got: c,
                classes: self.n_classes,
            });
        }
        if let Some(&v) = self
            .inputs
            .data()
            .iter()
            .find(|v| !v.is_finite() || !(0.0..=1.0).contains(*v))
        {
            return Err(DataError::Invalid {
                detail: format!("input value {v} outside [0, 1]"),
            });
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    /// Per-sample shape without the sample axis.
    pub fn sample_shape(&self) -> Vec<usize> {
        self.inputs.shape()[1..].to_vec()
    }

    /// Rows `start..start + len` as one input array plus labels.
    pub fn slice(&self, start: usize, len: usize) -> Result<(Array, Vec<usize>), DataError> {
        let n = self.n_samples();
        if start + len > n {
            return Err(DataError::Invalid {
                detail: format!("slice {start}..{} beyond {n} samples", start + len),
            });
        }
        let per = self.inputs.numel() / n;
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = len;
        let data = self.inputs.data()[start * per..(start + len) * per].to_vec();
        Ok((
            Array::from_vec(&shape, data)?,
            self.labels[start..start + len].to_vec(),
        ))
    }

    /// A seeded random subset of `n` distinct samples, in draw order.
    pub fn subset(&self, n: usize, rng: &mut RngStream) -> Result<Dataset, DataError> {
        if n == 0 || n > self.n_samples() {
            return Err(DataError::Invalid {
                detail: format!("subset of {n} from {} samples", self.n_samples()),
            });
        }
        let picks = rng.sample_distinct(self.n_samples(), n);
        let per = self.inputs.numel() / self.n_samples();
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = n;
        let mut data = Vec::with_capacity(n * per);
        let mut labels = Vec::with_capacity(n);
        for &i in &picks {
            data.extend_from_slice(&self.inputs.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok(Dataset {
            inputs: Array::from_vec(&shape, data)?,
            labels,
            n_classes: self.n_classes,
            split: self.split,
        })
    }
}

/// Two interleaved half-circles mapped affinely into the unit square.
/// Class 0 is the upper arc, class 1 the lower; counts differ by at most
/// one. Gaussian jitter of scale `noise` lands before the mapping, and the
/// mapping clamps to [0, 1].
pub fn gen_two_moons(n: usize, noise: f64, rng: &mut RngStream) -> Result<Dataset, DataError> {
    if n < 2 {
        return Err(DataError::Invalid {
            detail: format!("need at least 2 samples, got {n}"),
        });
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(DataError::Invalid {
            detail: format!("noise {noise} must be finite and >= 0"),
        });
    }
    let n0 = n.div_ceil(2);
    let n1 = n - n0;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    let arc = |count: usize, k: usize| -> f64 {
        if count > 1 {
            std::f64::consts::PI * k as f64 / (count - 1) as f64
        } else {
            0.0
        }
    };
    for k in 0..n0 {
        let t = arc(n0, k);
        let x = t.cos() + noise * rng.next_normal();
        let y = t.sin() + noise * rng.next_normal();
        data.push(((x + 1.0) / 3.0).clamp(0.0, 1.0));
        data.push(((y + 0.5) / 1.5).clamp(0.0, 1.0));
        labels.push(0);
    }
    for k in 0..n1 {
        let t = arc(n1, k);
        let x = 1.0 - t.cos() + noise * rng.next_normal();
        let y = 0.5 - t.sin() + noise * rng.next_normal();
        data.push(((x + 1.0) / 3.0).clamp(0.0, 1.0));
        data.push(((y + 0.5) / 1.5).clamp(0.0, 1.0));
        labels.push(1);
    }
    Dataset::new(Array::from_vec(&[n, 2], data)?, labels, 2, Split::Train)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32, DataError> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(DataError::Truncated {
            path: path.display().to_string(),
            needed: end,
            got: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().expect("4 bytes")))
}

/// IDX image + label pair (the MNIST layout): big-endian magics 0x803 and
/// 0x801, pixel bytes scaled by 1/255 into an [n, 1, rows, cols] tensor.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset, DataError> {
    let img_bytes = std::fs::read(images)?;
    let magic = be_u32(&img_bytes, 0, images)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::WrongMagic {
            path: images.display().to_string(),
            expected: IDX_IMAGES_MAGIC,
            got: magic,
        });
    }
    let n = be_u32(&img_bytes, 4, images)? as usize;
    let rows = be_u32(&img_bytes, 8, images)? as usize;
    let cols = be_u32(&img_bytes, 12, images)? as usize;
    let needed = 16 + n * rows * cols;
    if img_bytes.len() < needed {
        return Err(DataError::Truncated {
            path: images.display().to_string(),
            needed,
            got: img_bytes.len(),
        });
    }

    let lbl_bytes = std::fs::read(labels)?;
    let magic = be_u32(&lbl_bytes, 0, labels)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::WrongMagic {
            path: labels.display().to_string(),
            expected: IDX_LABELS_MAGIC,
            got: magic,
        });
    }
    let n_labels = be_u32(&lbl_bytes, 4, labels)? as usize;
    if n_labels != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    let lbl_needed = 8 + n;
    if lbl_bytes.len() < lbl_needed {
        return Err(DataError::Truncated {
            path: labels.display().to_string(),
            needed: lbl_needed,
            got: lbl_bytes.len(),
        });
    }

    let data: Vec<f64> = img_bytes[16..needed]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let label_vec: Vec<usize> = lbl_bytes[8..lbl_needed].iter().map(|&b| b as usize).collect();
    Dataset::new(
        Array::from_vec(&[n, 1, rows, cols], data)?,
        label_vec,
        10,
        Split::Train,
    )
}

const CIFAR_RECORD: usize = 3073;

/// CIFAR-10 binary batches: 3073-byte records of one label byte plus 3072
/// channel-major pixels, concatenated across files in the given order.
pub fn load_cifar10_bin(paths: &[PathBuf]) -> Result<Dataset, DataError> {
    if paths.is_empty() {
        return Err(DataError::Invalid {
            detail: "no cifar batch files given".into(),
        });
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = std::fs::read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(DataError::BadRecordLength {
                path: path.display().to_string(),
                len: bytes.len(),
                record: CIFAR_RECORD,
            });
        }
        for record in bytes.chunks(CIFAR_RECORD) {
            let label = record[0] as usize;
            if label > 9 {
                return Err(DataError::BadLabel {
                    got: label,
                    classes: 10,
                });
            }
            labels.push(label);
            data.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    let n = labels.len();
    Dataset::new(
        Array::from_vec(&[n, 3, 32, 32], data)?,
        labels,
        10,
        Split::Train,
    )
}

/// Dataset cache root from the DES_DATA_DIR environment variable.
pub fn data_dir() -> Option<PathBuf> {
    std::env::var_os("DES_DATA_DIR").map(PathBuf::from)
}

/// Batches covering every sample exactly once; the last batch may be
/// short. Shuffling permutes with the caller's stream, otherwise insertion
/// order.
pub fn batch_iter<'a>(
    ds: &'a Dataset,
    batch_size: usize,
    shuffle: bool,
    rng: &mut RngStream,
) -> Result<Batches<'a>, DataError> {
    if batch_size == 0 {
        return Err(DataError::Invalid {
            detail: "batch size must be at least 1".into(),
        });
    }
    let mut order: Vec<usize> = (0..ds.n_samples()).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    Ok(Batches {
        ds,
        order,
        batch_size,
        cursor: 0,
    })
}

pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl Iterator for Batches<'_> {
    type Item = (Array, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let picks = &self.order[self.cursor..end];
        self.cursor = end;
        let per = self.ds.inputs.numel() / self.ds.n_samples();
        let mut shape = self.ds.inputs.shape().to_vec();
        shape[0] = picks.len();
        let mut data = Vec::with_capacity(picks.len() * per);
        let mut labels = Vec::with_capacity(picks.len());
        for &i in picks {
            data.extend_from_slice(&self.ds.inputs.data()[i * per..(i + 1) * per]);
            labels.push(self.ds.labels[i]);
        }
        Some((
            Array::from_vec(&shape, data).expect("batch shape matches data"),
            labels,
        ))
    }
}
