//! Image classification datasets: MNIST IDX files, CIFAR-10 binary batches
//! and seeded Gaussian blobs for offline runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;

const MNIST_MEAN: f32 = 0.1307;
const MNIST_STD: f32 = 0.3081;
const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    MnistIdx,
    Cifar10Bin,
    Synthetic,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist-idx" => Ok(Self::MnistIdx),
            "cifar10-bin" => Ok(Self::Cifar10Bin),
            "synthetic" => Ok(Self::Synthetic),
            o => Err(Error::config(format!("unknown dataset kind `{o}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Normalized images `[n, C, H, W]` stored flat, with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub sample_shape: [usize; 3],
    pub classes: usize,
}

/// Generation parameters of the synthetic blobs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<usize>, sample_shape: [usize; 3], classes: usize) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::shape(format!(
                "{} pixels for {} samples of shape {sample_shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::input(format!("label {y} out of range for {classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            sample_shape,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    /// Stack the given samples into `[n, C, H, W]`.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images[i * per..(i + 1) * per]);
        }
        let [c, h, w] = self.sample_shape;
        let x = Tensor::new(vec![idx.len(), c, h, w], data).expect("consistent sample size");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let (x, labels) = self.batch(idx);
        Self {
            images: x.into_data(),
            labels,
            sample_shape: self.sample_shape,
            classes: self.classes,
        }
    }

    /// The first `n` samples (all if `n` is 0 or larger than the set).
    pub fn take(&self, n: usize) -> Self {
        if n == 0 || n >= self.len() {
            return self.clone();
        }
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    /// Shuffled split into `(rest, held_out)` with `fraction` held out.
    pub fn split(&self, fraction: f64, rng: &mut Rng) -> (Self, Self) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut idx);
        let held = ((self.len() as f64) * fraction).round() as usize;
        let (a, b) = idx.split_at(self.len() - held);
        (self.subset(a), self.subset(b))
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::config(format!("missing dataset file {}", path.display())));
    }
    Ok(fs::read(path)?)
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format("truncated IDX header"))
}

/// IDX image file: magic, count, rows, cols, then `u8` pixels.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!("IDX images magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let (n, rows, cols) = (be_u32(bytes, 4)? as usize, be_u32(bytes, 8)? as usize, be_u32(bytes, 12)? as usize);
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::format(format!(
            "IDX images body has {} bytes, header promises {n}x{rows}x{cols}",
            body.len()
        )));
    }
    Ok((n, rows, cols, body))
}

/// IDX label file: magic, count, then `u8` labels.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(format!("IDX labels magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::format(format!("IDX labels body has {} bytes, header promises {n}", body.len())));
    }
    Ok(body)
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = read(&dir.join(format!("{prefix}-images-idx3-ubyte")))?;
    let labels = read(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
    let (n, rows, cols, pixels) = parse_idx_images(&images)?;
    let labels = parse_idx_labels(&labels)?;
    if labels.len() != n {
        return Err(Error::format(format!("{n} images but {} labels", labels.len())));
    }
    let images = pixels
        .iter()
        .map(|&p| (p as f32 / 255.0 - MNIST_MEAN) / MNIST_STD)
        .collect();
    let labels = labels.iter().map(|&y| y as usize).collect();
    Dataset::new(images, labels, [1, rows, cols], 10).map_err(|e| Error::format(e.to_string()))
}

/// Records of one label byte followed by 1024 red, green and blue bytes.
pub fn parse_cifar10(bytes: &[u8], images: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<()> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::format(format!(
            "CIFAR-10 batch of {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(Error::format(format!("CIFAR-10 label byte {}", rec[0])));
        }
        labels.push(rec[0] as usize);
        for (i, &p) in rec[1..].iter().enumerate() {
            let c = i / plane;
            images.push((p as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]);
        }
    }
    Ok(())
}

pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };
    let (mut images, mut labels) = (Vec::new(), Vec::new());
    for f in files {
        parse_cifar10(&read(&f)?, &mut images, &mut labels)?;
    }
    Dataset::new(images, labels, [3, CIFAR_SIDE, CIFAR_SIDE], 10)
}

/// Class-conditional Gaussians around random class prototypes. Train and
/// test share prototypes and draw samples from separate streams.
pub fn synthetic(spec: SyntheticSpec, split: Split) -> Result<Dataset> {
    if spec.samples == 0 || spec.classes < 2 || spec.size == 0 || spec.channels == 0 || !(spec.noise >= 0.0) {
        return Err(Error::config(format!("invalid synthetic dataset {spec:?}")));
    }
    let per = spec.channels * spec.size * spec.size;
    let mut proto_rng = Rng::new(spec.seed);
    let protos: Vec<f64> = (0..spec.classes * per).map(|_| proto_rng.normal()).collect();
    let mut rng = Rng::new(spec.seed ^ if split == Split::Train { 0x7261_696e } else { 0x7465_7374 });
    let mut images = Vec::with_capacity(spec.samples * per);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let y = i % spec.classes;
        labels.push(y);
        for j in 0..per {
            images.push((protos[y * per + j] + spec.noise * rng.normal()) as f32);
        }
    }
    Dataset::new(images, labels, [spec.channels, spec.size, spec.size], spec.classes)
}

/// Load one split of a dataset directory (ignored for synthetic data).
pub fn load_dataset(path: &Path, kind: DatasetKind, split: Split, synth: SyntheticSpec) -> Result<Dataset> {
    if kind != DatasetKind::Synthetic && !path.is_dir() {
        return Err(Error::config(format!("dataset directory {} does not exist", path.display())));
    }
    match kind {
        DatasetKind::MnistIdx => load_mnist(path, split),
        DatasetKind::Cifar10Bin => load_cifar10(path, split),
        DatasetKind::Synthetic => synthetic(synth, split),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, r: u32, c: u32, magic: u32) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [magic, n, r, c] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend((0..n * r * c).map(|i| (i % 256) as u8));
        v
    }

    #[test]
    fn idx_round_trip() {
        let bytes = idx_images(2, 3, 4, 0x803);
        let (n, r, c, px) = parse_idx_images(&bytes).unwrap();
        assert_eq!((n, r, c, px.len()), (2, 3, 4, 24));
        let mut labels = 0x801u32.to_be_bytes().to_vec();
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[7, 3]);
        assert_eq!(parse_idx_labels(&labels).unwrap(), &[7, 3]);
    }

    #[test]
    fn idx_bad_magic_and_truncation() {
        assert!(matches!(parse_idx_images(&idx_images(1, 2, 2, 0x801)), Err(Error::Format(_))));
        let mut b = idx_images(2, 2, 2, 0x803);
        b.pop();
        assert!(matches!(parse_idx_images(&b), Err(Error::Format(_))));
        assert!(matches!(parse_idx_labels(&[0, 0, 8]), Err(Error::Format(_))));
    }

    #[test]
    fn cifar_records() {
        let mut rec = vec![3u8];
        rec.extend(std::iter::repeat_n(255u8, 3072));
        let (mut im, mut lb) = (Vec::new(), Vec::new());
        parse_cifar10(&rec, &mut im, &mut lb).unwrap();
        assert_eq!((im.len(), lb.clone()), (3072, vec![3]));
        assert!((im[0] - (1.0 - CIFAR_MEAN[0]) / CIFAR_STD[0]).abs() < 1e-6);
        assert!((im[2048] - (1.0 - CIFAR_MEAN[2]) / CIFAR_STD[2]).abs() < 1e-6);
        assert!(matches!(parse_cifar10(&rec[..3000], &mut im, &mut lb), Err(Error::Format(_))));
    }

    #[test]
    fn synthetic_is_seeded_and_balanced() {
        let spec = SyntheticSpec {
            samples: 40,
            classes: 4,
            channels: 1,
            size: 8,
            noise: 0.5,
            seed: 3,
        };
        let a = synthetic(spec, Split::Train).unwrap();
        assert_eq!(a, synthetic(spec, Split::Train).unwrap());
        assert_ne!(a.images, synthetic(spec, Split::Test).unwrap().images);
        assert_eq!(a.labels.iter().filter(|&&y| y == 2).count(), 10);
        let (x, y) = a.batch(&[1, 5]);
        assert_eq!((x.shape(), y), (&[2, 1, 8, 8][..], vec![1, 1]));
    }

    #[test]
    fn missing_directory_is_a_config_error() {
        let r = load_dataset(Path::new("/definitely/not/here"), DatasetKind::MnistIdx, Split::Train, SyntheticSpec {
            samples: 1,
            classes: 2,
            channels: 1,
            size: 1,
            noise: 0.0,
            seed: 0,
        });
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
