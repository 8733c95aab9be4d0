//! Labeled image datasets: a built-in synthetic generator plus readers for the
//! CIFAR-10 binary archive and IDX (MNIST-style) files.

use std::fs;
use std::path::{Path, PathBuf};

use adaperf_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adnn::AdnnSpec;
use crate::error::{Error, Result};

/// Images in `[0, 1]` with integer labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Dataset,
    pub test: Dataset,
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic {
        num_classes: usize,
        channels: usize,
        height: usize,
        width: usize,
        train_count: usize,
        test_count: usize,
        seed: u64,
    },
    /// Directory holding `data_batch_{1..5}.bin` and `test_batch.bin`.
    Cifar10 {
        dir: PathBuf,
        #[serde(default)]
        max_train: Option<usize>,
        #[serde(default)]
        max_test: Option<usize>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        max_train: Option<usize>,
        #[serde(default)]
        max_test: Option<usize>,
    },
}

impl DatasetSource {
    /// Synthetic source shaped like the reference model's input.
    pub fn synthetic(num_classes: usize, train_count: usize, test_count: usize, seed: u64) -> Self {
        Self::Synthetic {
            num_classes,
            channels: 3,
            height: 32,
            width: 32,
            train_count,
            test_count,
            seed,
        }
    }
}

pub const CIFAR10_RECORD_BYTES: usize = 3073;
pub const CIFAR10_RECORDS_PER_FILE: usize = 10_000;
const CIFAR10_SHAPE: [usize; 3] = [3, 32, 32];

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Shape(format!("images must be [N, C, H, W], got {:?}", images.shape())));
        }
        if images.batch() != labels.len() {
            return Err(Error::Length {
                expected: images.batch(),
                actual: labels.len(),
            });
        }
        if let Some(l) = labels.iter().find(|l| **l >= num_classes) {
            return Err(Error::Dataset(format!("label {l} out of range for {num_classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)` of one item.
    pub fn item_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// First `n` items (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Hex SHA-256 over the raw bytes of the first `n` items and their labels.
    pub fn checksum(&self, n: usize) -> String {
        let mut h = Sha256::new();
        for i in 0..n.min(self.len()) {
            for v in self.images.item_slice(i) {
                h.update(v.to_le_bytes());
            }
            h.update((self.labels[i] as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Rejects datasets that do not fit the model.
    pub fn check_against(&self, spec: &AdnnSpec) -> Result<()> {
        if self.item_shape() != spec.input_shape {
            return Err(Error::Dataset(format!(
                "dataset items are {:?} but the model expects {:?}",
                self.item_shape(),
                spec.input_shape
            )));
        }
        if self.num_classes != spec.num_classes {
            return Err(Error::Dataset(format!(
                "dataset has {} classes but the model has {}",
                self.num_classes, spec.num_classes
            )));
        }
        Ok(())
    }
}

/// Loads a dataset and its fixed train/test split.
pub fn ingest_dataset(source: &DatasetSource) -> Result<DatasetSplit> {
    match source {
        &DatasetSource::Synthetic {
            num_classes,
            channels,
            height,
            width,
            train_count,
            test_count,
            seed,
        } => {
            let shape = [channels, height, width];
            Ok(DatasetSplit {
                train: synthetic(num_classes, shape, train_count, seed)?,
                test: synthetic(num_classes, shape, test_count, seed ^ 0x7e57_7e57_7e57_7e57)?,
            })
        }
        DatasetSource::Cifar10 { dir, max_train, max_test } => {
            let train_files: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            let train = read_cifar10(&train_files, *max_train)?;
            let test = read_cifar10(&[dir.join("test_batch.bin")], *max_test)?;
            Ok(DatasetSplit { train, test })
        }
        DatasetSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            max_train,
            max_test,
        } => Ok(DatasetSplit {
            train: read_idx(train_images, train_labels, *max_train)?,
            test: read_idx(test_images, test_labels, *max_test)?,
        }),
    }
}

/// Per-class grating parameters: orientation, spatial frequency and RGB tint.
fn class_pattern(class: usize, num_classes: usize, channels: usize) -> (f32, f32, Vec<f32>) {
    let angle = std::f32::consts::PI * class as f32 / num_classes as f32;
    let freq = 0.15 + 0.35 * ((class * 7) % num_classes) as f32 / num_classes as f32;
    let tint = (0..channels)
        .map(|c| 0.6 + 0.4 * ((class + c * 3) as f32 * 1.3).cos())
        .collect();
    (angle, freq, tint)
}

/// Oriented sinusoidal gratings whose orientation, frequency and tint depend on
/// the class; phase, contrast, background and noise level vary per image.
pub fn synthetic(num_classes: usize, shape: [usize; 3], count: usize, seed: u64) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::Dataset("synthetic data needs at least 2 classes".into()));
    }
    if shape.contains(&0) {
        return Err(Error::Dataset(format!("invalid synthetic image shape {shape:?}")));
    }
    let [c, h, w] = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(count * c * h * w);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.gen_range(0..num_classes);
        let (angle, freq, tint) = class_pattern(class, num_classes, c);
        let phase = rng.gen_range(0.0..std::f32::consts::TAU);
        let contrast = rng.gen_range(0.1..0.5f32);
        let background = rng.gen_range(0.3..0.7f32);
        let sigma = rng.gen_range(0.0..0.2f32);
        let noise = Normal::new(0.0f32, sigma.max(f32::MIN_POSITIVE)).expect("valid sigma");
        let (sa, ca) = angle.sin_cos();
        for tc in &tint {
            for y in 0..h {
                for x in 0..w {
                    let u = x as f32 * ca + y as f32 * sa;
                    let v = background + contrast * tc * (freq * u + phase).sin() + noise.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(class);
    }
    Dataset::new(Tensor::new(&[count, c, h, w], data)?, labels, num_classes)
}

/// Reads CIFAR-10 binary batches: each record is one label byte followed by
/// 3072 pixel bytes in channel-major order.
pub fn read_cifar10(files: &[PathBuf], max_items: Option<usize>) -> Result<Dataset> {
    let limit = max_items.unwrap_or(usize::MAX);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in files {
        if labels.len() >= limit {
            break;
        }
        let bytes = read_file(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR10_RECORD_BYTES != 0 {
            return Err(Error::Dataset(format!(
                "{}: size {} is not a multiple of the {CIFAR10_RECORD_BYTES}-byte record",
                path.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(CIFAR10_RECORD_BYTES) {
            if labels.len() >= limit {
                break;
            }
            if rec[0] >= 10 {
                return Err(Error::Dataset(format!("{}: label byte {} out of range", path.display(), rec[0])));
            }
            labels.push(rec[0] as usize);
            data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let n = labels.len();
    let [c, h, w] = CIFAR10_SHAPE;
    Dataset::new(Tensor::new(&[n, c, h, w], data)?, labels, 10)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(fs::read(path)?)
}

/// Parsed IDX header: element type code and dimensions.
fn idx_header(bytes: &[u8], path: &Path) -> Result<(u8, Vec<usize>, usize)> {
    let bad = |m: &str| Error::Dataset(format!("{}: {m}", path.display()));
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad("bad IDX magic"));
    }
    let ndim = bytes[3] as usize;
    let header_len = 4 + 4 * ndim;
    if bytes.len() < header_len {
        return Err(bad("truncated IDX header"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    if bytes[2] != 0x08 {
        return Err(bad("only unsigned-byte IDX files are supported"));
    }
    let expected = header_len + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(bad(&format!("expected {expected} bytes from header, found {}", bytes.len())));
    }
    Ok((bytes[2], dims, header_len))
}

/// Number of items announced by an IDX header.
pub fn idx_item_count(path: &Path) -> Result<usize> {
    let bytes = read_file(path)?;
    let (_, dims, _) = idx_header(&bytes, path)?;
    dims.first().copied().ok_or_else(|| Error::Dataset(format!("{}: zero-dimensional IDX", path.display())))
}

/// Reads an IDX image file (`[N, H, W]` bytes) and its label file (`[N]`).
pub fn read_idx(images: &Path, labels: &Path, max_items: Option<usize>) -> Result<Dataset> {
    let ib = read_file(images)?;
    let lb = read_file(labels)?;
    let (_, idims, ioff) = idx_header(&ib, images)?;
    let (_, ldims, loff) = idx_header(&lb, labels)?;
    if idims.len() != 3 || ldims.len() != 1 {
        return Err(Error::Dataset("IDX images must be [N, H, W] and labels [N]".into()));
    }
    if idims[0] != ldims[0] {
        return Err(Error::Dataset(format!("{} images but {} labels", idims[0], ldims[0])));
    }
    let n = idims[0].min(max_items.unwrap_or(usize::MAX));
    let (h, w) = (idims[1], idims[2]);
    let data = ib[ioff..ioff + n * h * w].iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = lb[loff..loff + n].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(2, |m| (m + 1).max(10));
    Dataset::new(Tensor::new(&[n, 1, h, w], data)?, labels, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adnn::Mechanism;

    #[test]
    fn synthetic_shapes_and_split_sizes() {
        let split = ingest_dataset(&DatasetSource::synthetic(10, 500, 100, 3)).unwrap();
        assert_eq!(split.train.images.shape(), &[500, 3, 32, 32]);
        assert_eq!(split.test.len(), 100);
        assert!(split.train.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(split.train.labels.iter().all(|&l| l < 10));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = ingest_dataset(&DatasetSource::synthetic(10, 64, 8, 11)).unwrap();
        let b = ingest_dataset(&DatasetSource::synthetic(10, 64, 8, 11)).unwrap();
        assert_eq!(a.train.checksum(64), b.train.checksum(64));
        let c = ingest_dataset(&DatasetSource::synthetic(10, 64, 8, 12)).unwrap();
        assert_ne!(a.train.checksum(64), c.train.checksum(64));
        assert_ne!(a.train.checksum(8), a.test.checksum(8));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let ds = synthetic(10, [3, 28, 28], 4, 0).unwrap();
        let spec = AdnnSpec::reference(Mechanism::ConditionalSkipping);
        assert!(matches!(ds.check_against(&spec), Err(Error::Dataset(_))));
        let ds = synthetic(5, [3, 32, 32], 4, 0).unwrap();
        assert!(ds.check_against(&spec).is_err());
    }

    #[test]
    fn cifar_reader_counts_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test_batch.bin");
        let mut bytes = Vec::new();
        for i in 0..7u8 {
            bytes.push(i % 10);
            bytes.extend(std::iter::repeat(i * 30).take(3072));
        }
        fs::write(&path, &bytes).unwrap();
        let ds = read_cifar10(&[path.clone()], None).unwrap();
        assert_eq!(ds.len(), 7);
        assert_eq!(ds.labels[3], 3);
        assert_eq!(ds.images.item_slice(1)[0], 30.0 / 255.0);
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_cifar10(&[path], None), Err(Error::Dataset(_))));
    }

    #[test]
    fn idx_item_count_comes_from_header() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        let n = 12u32;
        let mut ib = vec![0, 0, 8, 3];
        for d in [n, 4, 5] {
            ib.extend(d.to_be_bytes());
        }
        ib.extend((0..n * 20).map(|i| (i % 256) as u8));
        let mut lb = vec![0, 0, 8, 1];
        lb.extend(n.to_be_bytes());
        lb.extend((0..n).map(|i| (i % 10) as u8));
        fs::write(&img, &ib).unwrap();
        fs::write(&lab, &lb).unwrap();
        assert_eq!(idx_item_count(&img).unwrap(), 12);
        let ds = read_idx(&img, &lab, None).unwrap();
        assert_eq!(ds.images.shape(), &[12, 1, 4, 5]);
        assert_eq!(ds.labels[11], 1);
        ib.pop();
        fs::write(&img, &ib).unwrap();
        assert!(read_idx(&img, &lab, None).is_err());
    }
}
