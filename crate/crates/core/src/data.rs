//! Dataset ingestion and iteration: CIFAR-10 binary files, IDX image and
//! label files, seeded synthetic Gaussian blobs, per-channel
//! standardization, and deterministic shuffled batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

const CIFAR_RECORD: usize = 3073;
const IDX_MAGIC_U8_IMAGES: u32 = 0x0000_0803;
const IDX_MAGIC_U8_LABELS: u32 = 0x0000_0801;
const IDX_MAGIC_F64_MATRIX: u32 = 0x0000_0E02;

/// Labeled samples: images as `[N,C,H,W]` or flat features as `[N,F]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(samples: Tensor, labels: Vec<usize>, classes: usize, split: &str) -> Result<Self> {
        let n = *samples.shape().first().unwrap_or(&0);
        if labels.len() != n {
            return Err(Error::Contract(format!(
                "{} labels for {} samples",
                labels.len(),
                n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Contract(format!(
                "label {} out of range for {} classes",
                bad, classes
            )));
        }
        Ok(Dataset {
            samples,
            labels,
            classes,
            split: split.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample feature extent (everything after the batch axis).
    pub fn sample_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    /// Materialize the rows at `indices` as a batch tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.samples.numel() / self.len().max(1);
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.samples.data()[i * per..(i + 1) * per]);
        }
        (
            Tensor::new(shape, data).expect("batch extraction shape"),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Channel means and standard deviations (population). Flat datasets
    /// are treated as a single channel.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let channels = match self.samples.shape() {
            [_, c, _, _] => *c,
            _ => 1,
        };
        let mut mean = vec![0.0; channels];
        let mut count = vec![0usize; channels];
        let per = self.samples.numel() / channels;
        for (i, &v) in self.samples.data().iter().enumerate() {
            let c = channel_of(self.samples.shape(), i);
            mean[c] += v;
            count[c] += 1;
        }
        for c in 0..channels {
            mean[c] /= per.max(1) as f64;
            debug_assert_eq!(count[c], per);
        }
        let mut var = vec![0.0; channels];
        for (i, &v) in self.samples.data().iter().enumerate() {
            let c = channel_of(self.samples.shape(), i);
            let d = v - mean[c];
            var[c] += d * d;
        }
        let std = var
            .into_iter()
            .map(|v| (v / per.max(1) as f64).sqrt())
            .collect();
        (mean, std)
    }

    /// Split into (train, test): the first `train_per_class` samples of
    /// each class go to train, the rest to test. Order-preserving and
    /// deterministic.
    pub fn stratified_split(&self, train_per_class: usize) -> Result<(Dataset, Dataset)> {
        let per = self.samples.numel() / self.len().max(1);
        let mut taken = vec![0usize; self.classes];
        let mut tr_idx = Vec::new();
        let mut te_idx = Vec::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if taken[l] < train_per_class {
                taken[l] += 1;
                tr_idx.push(i);
            } else {
                te_idx.push(i);
            }
        }
        if tr_idx.is_empty() || te_idx.is_empty() {
            return Err(Error::Contract(format!(
                "stratified split at {} per class leaves an empty side ({} train, {} test)",
                train_per_class,
                tr_idx.len(),
                te_idx.len()
            )));
        }
        let cut = |indices: &[usize], split: &str| -> Result<Dataset> {
            let mut shape = vec![indices.len()];
            shape.extend_from_slice(self.sample_shape());
            let mut data = Vec::with_capacity(indices.len() * per);
            for &i in indices {
                data.extend_from_slice(&self.samples.data()[i * per..(i + 1) * per]);
            }
            Dataset::new(
                Tensor::new(shape, data)?,
                indices.iter().map(|&i| self.labels[i]).collect(),
                self.classes,
                split,
            )
        };
        Ok((cut(&tr_idx, "train")?, cut(&te_idx, "test")?))
    }

    /// Shift/scale every channel by the given statistics.
    pub fn standardized(&self, mean: &[f64], std: &[f64]) -> Result<Dataset> {
        let channels = match self.samples.shape() {
            [_, c, _, _] => *c,
            _ => 1,
        };
        if mean.len() != channels || std.len() != channels {
            return Err(Error::Contract(format!(
                "{} channel statistics for {} channels",
                mean.len(),
                channels
            )));
        }
        let data: Vec<f64> = self
            .samples
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = channel_of(self.samples.shape(), i);
                (v - mean[c]) / std[c].max(1e-8)
            })
            .collect();
        Ok(Dataset {
            samples: Tensor::new(self.samples.shape().to_vec(), data)?,
            labels: self.labels.clone(),
            classes: self.classes,
            split: self.split.clone(),
        })
    }
}

fn channel_of(shape: &[usize], flat_index: usize) -> usize {
    match shape {
        [_, c, h, w] => (flat_index / (h * w)) % c,
        _ => 0,
    }
}

/// Deterministic shuffled partition of `0..n` into `size`-long batches;
/// the final short batch is kept. Order depends only on (seed, epoch).
pub fn batches(n: usize, size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(size >= 1, "batch size must be >= 1");
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, Stream::Shuffle, &[epoch]);
    indices.shuffle(&mut rng);
    indices.chunks(size).map(|c| c.to_vec()).collect()
}

/// CIFAR-10 binary records: one label byte then 3072 pixel bytes
/// (R, G, B planes of a 32x32 image). Multiple files concatenate.
pub fn load_cifar10_binary<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "{}: {} bytes is not a whole number of {}-byte records (stray {} bytes at offset {})",
                path.display(),
                bytes.len(),
                CIFAR_RECORD,
                bytes.len() % CIFAR_RECORD,
                bytes.len() - bytes.len() % CIFAR_RECORD,
            )));
        }
        for (rec, chunk) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            let label = chunk[0] as usize;
            if label >= 10 {
                return Err(Error::Format(format!(
                    "{}: record {} has label byte {} (valid: 0..9)",
                    path.display(),
                    rec,
                    chunk[0]
                )));
            }
            labels.push(label);
            samples.extend(chunk[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    let n = labels.len();
    Dataset::new(
        Tensor::new(vec![n, 3, 32, 32], samples)?,
        labels,
        10,
        "cifar10",
    )
}

/// Inverse of [`load_cifar10_binary`] for a `[N,3,32,32]` dataset whose
/// pixels are still exact multiples of 1/255.
pub fn save_cifar10_binary<P: AsRef<Path>>(dataset: &Dataset, path: P) -> Result<()> {
    let path = path.as_ref();
    if dataset.samples.shape()[1..] != [3, 32, 32] {
        return Err(Error::Contract(format!(
            "CIFAR-10 export needs [N,3,32,32] samples, got {:?}",
            dataset.samples.shape()
        )));
    }
    let per = 3072;
    let mut bytes = Vec::with_capacity(dataset.len() * CIFAR_RECORD);
    for (i, &label) in dataset.labels.iter().enumerate() {
        bytes.push(label as u8);
        for &v in &dataset.samples.data()[i * per..(i + 1) * per] {
            bytes.push((v * 255.0).round() as u8);
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_u32_be(bytes: &[u8], at: usize, what: &str, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            Error::Format(format!(
                "{}: truncated before {} at offset {}",
                path.display(),
                what,
                at
            ))
        })
}

/// IDX image/label file pair. Accepts byte images (magic 0x00000803,
/// dimensions N,H,W, values scaled to [0,1]) or double-precision feature
/// matrices (magic 0x00000E02, dimensions N,F, values taken verbatim);
/// labels use magic 0x00000801.
pub fn load_idx<P: AsRef<Path>>(images_path: P, labels_path: P, split: &str) -> Result<Dataset> {
    let ipath = images_path.as_ref();
    let lpath = labels_path.as_ref();
    let ibytes = fs::read(ipath).map_err(|e| Error::io(ipath, e))?;
    let lbytes = fs::read(lpath).map_err(|e| Error::io(lpath, e))?;

    let magic = read_u32_be(&ibytes, 0, "magic", ipath)?;
    let (samples, n) = match magic {
        IDX_MAGIC_U8_IMAGES => {
            let n = read_u32_be(&ibytes, 4, "image count", ipath)? as usize;
            let h = read_u32_be(&ibytes, 8, "height", ipath)? as usize;
            let w = read_u32_be(&ibytes, 12, "width", ipath)? as usize;
            let want = 16 + n * h * w;
            if ibytes.len() != want {
                return Err(Error::Format(format!(
                    "{}: expected {} bytes for {}x{}x{} u8 images, found {}",
                    ipath.display(),
                    want,
                    n,
                    h,
                    w,
                    ibytes.len()
                )));
            }
            let data: Vec<f64> = ibytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
            (Tensor::new(vec![n, 1, h, w], data)?, n)
        }
        IDX_MAGIC_F64_MATRIX => {
            let n = read_u32_be(&ibytes, 4, "row count", ipath)? as usize;
            let f = read_u32_be(&ibytes, 8, "feature width", ipath)? as usize;
            let want = 12 + n * f * 8;
            if ibytes.len() != want {
                return Err(Error::Format(format!(
                    "{}: expected {} bytes for a {}x{} f64 matrix, found {}",
                    ipath.display(),
                    want,
                    n,
                    f,
                    ibytes.len()
                )));
            }
            let data: Vec<f64> = ibytes[12..]
                .chunks_exact(8)
                .map(|c| f64::from_be_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect();
            (Tensor::new(vec![n, f], data)?, n)
        }
        other => {
            return Err(Error::Format(format!(
                "{}: magic 0x{:08X} is not an IDX image or feature matrix",
                ipath.display(),
                other
            )))
        }
    };

    let lmagic = read_u32_be(&lbytes, 0, "magic", lpath)?;
    if lmagic != IDX_MAGIC_U8_LABELS {
        return Err(Error::Format(format!(
            "{}: magic 0x{:08X} is not an IDX label file",
            lpath.display(),
            lmagic
        )));
    }
    let ln = read_u32_be(&lbytes, 4, "label count", lpath)? as usize;
    if lbytes.len() != 8 + ln {
        return Err(Error::Format(format!(
            "{}: expected {} bytes for {} labels, found {}",
            lpath.display(),
            8 + ln,
            ln,
            lbytes.len()
        )));
    }
    if ln != n {
        return Err(Error::Format(format!("{} images but {} labels", n, ln)));
    }
    let labels: Vec<usize> = lbytes[8..].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(samples, labels, classes, split)
}

/// Serialize a dataset as an IDX pair: `[N,1,H,W]` image datasets with
/// 1/255-quantized pixels become u8 images; `[N,F]` feature datasets
/// become f64 matrices.
pub fn save_idx<P: AsRef<Path>>(dataset: &Dataset, images_path: P, labels_path: P) -> Result<()> {
    let ipath = images_path.as_ref();
    let lpath = labels_path.as_ref();
    let mut ibytes = Vec::new();
    match dataset.samples.shape() {
        [n, 1, h, w] => {
            ibytes.extend(IDX_MAGIC_U8_IMAGES.to_be_bytes());
            for &d in [*n, *h, *w].iter() {
                ibytes.extend((d as u32).to_be_bytes());
            }
            ibytes.extend(
                dataset
                    .samples
                    .data()
                    .iter()
                    .map(|&v| (v * 255.0).round() as u8),
            );
        }
        [n, f] => {
            ibytes.extend(IDX_MAGIC_F64_MATRIX.to_be_bytes());
            ibytes.extend((*n as u32).to_be_bytes());
            ibytes.extend((*f as u32).to_be_bytes());
            for &v in dataset.samples.data() {
                ibytes.extend(v.to_be_bytes());
            }
        }
        other => {
            return Err(Error::Contract(format!(
                "IDX export supports [N,1,H,W] or [N,F] datasets, got {:?}",
                other
            )))
        }
    }
    fs::write(ipath, ibytes).map_err(|e| Error::io(ipath, e))?;

    let mut lbytes = Vec::with_capacity(8 + dataset.len());
    lbytes.extend(IDX_MAGIC_U8_LABELS.to_be_bytes());
    lbytes.extend((dataset.len() as u32).to_be_bytes());
    for &l in &dataset.labels {
        if l > u8::MAX as usize {
            return Err(Error::Contract(format!(
                "label {} does not fit an IDX byte label",
                l
            )));
        }
        lbytes.push(l as u8);
    }
    fs::write(lpath, lbytes).map_err(|e| Error::io(lpath, e))
}

/// Gaussian class clusters: centers drawn on the unit hypersphere and
/// re-drawn until every pair is at least 2·spread apart; samples are
/// center + N(0, spread²) per coordinate. Fully determined by the seed.
pub fn synth_blobs(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || dim < 2 {
        return Err(Error::Contract(format!(
            "synthetic blobs need >= 2 classes and >= 2 dimensions, got {} / {}",
            classes, dim
        )));
    }
    if spread <= 0.0 || !spread.is_finite() {
        return Err(Error::Contract(format!(
            "spread must be a positive real, got {}",
            spread
        )));
    }
    let mut rng = stream_rng(seed, Stream::Data, &[classes as u64, dim as u64]);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut rejections = 0usize;
    while centers.len() < classes {
        let candidate = unit_sphere_point(dim, &mut rng);
        let ok = centers
            .iter()
            .all(|c| euclidean(c, &candidate) >= 2.0 * spread);
        if ok {
            centers.push(candidate);
        } else {
            rejections += 1;
            if rejections > 10_000 {
                return Err(Error::Numeric(format!(
                    "could not place {} centers at pairwise distance >= {} on the unit sphere \
                     after 10000 rejections; use a smaller spread",
                    classes,
                    2.0 * spread
                )));
            }
        }
    }

    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (k, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &c in center {
                data.push(c + spread * gaussian(&mut rng));
            }
            labels.push(k);
        }
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, classes, "synth")
}

fn unit_sphere_point(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Box-Muller standard normal.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
