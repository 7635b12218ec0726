//! Dataset ingestion, synthetic data, and batching.
//!
//! Datasets are memory-resident: an (N, C, H, W) image tensor in [0, 1] plus
//! integer labels. Loaders cover the MNIST-style IDX container and the
//! CIFAR-10 binary batch format; synthetic generators provide fast
//! CI-scale data.

use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::rng::substream_indexed;
use crate::tensor::Tensor;

#[derive(Debug)]
pub enum DataError {
    Io(PathBuf, io::Error),
    Parse { path: PathBuf, offset: u64, what: String },
    MissingFiles { expected: Vec<PathBuf> },
    Invalid(String),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io(path, e) => write!(f, "{}: {e}", path.display()),
            DataError::Parse { path, offset, what } => {
                write!(f, "{} at byte {offset}: {what}", path.display())
            }
            DataError::MissingFiles { expected } => {
                let names: Vec<String> = expected.iter().map(|p| p.display().to_string()).collect();
                write!(f, "missing dataset files: {}", names.join(", "))
            }
            DataError::Invalid(msg) => write!(f, "invalid dataset: {msg}"),
        }
    }
}

impl std::error::Error for DataError {}

/// An in-memory labeled image dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: &str) -> Result<Self, DataError> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(DataError::Invalid(format!("images must be rank 4, got {shape:?}")));
        }
        if shape[0] == 0 || shape[0] != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} images but {} labels",
                shape[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::Invalid(format!("label {bad} >= {classes} classes")));
        }
        Ok(Dataset { images, labels, classes, split: split.to_string() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (channels, height, width) of one example.
    pub fn input_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    fn example_numel(&self) -> usize {
        let (c, h, w) = self.input_shape();
        c * h * w
    }

    fn example(&self, i: usize) -> &[f64] {
        let n = self.example_numel();
        &self.images.data()[i * n..(i + 1) * n]
    }
}

// ---------------------------------------------------------------------------
// IDX (big-endian MNIST container)
// ---------------------------------------------------------------------------

struct IdxArray {
    dims: Vec<usize>,
    data: Vec<u8>,
}

fn parse_idx(path: &Path) -> Result<IdxArray, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::Io(path.to_path_buf(), e))?;
    let parse_err = |offset: u64, what: &str| DataError::Parse {
        path: path.to_path_buf(),
        offset,
        what: what.to_string(),
    };
    if bytes.len() < 4 {
        return Err(parse_err(0, "file shorter than the 4-byte magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse_err(0, "bad magic: first two bytes must be zero"));
    }
    if bytes[2] != 0x08 {
        return Err(parse_err(2, "bad magic: only the unsigned-byte dtype (0x08) is supported"));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(parse_err(4, "truncated dimension table"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|d| {
            let at = 4 + 4 * d;
            u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]) as usize
        })
        .collect();
    let expected: usize = dims.iter().product();
    let actual = bytes.len() - header;
    if actual != expected {
        return Err(DataError::Parse {
            path: path.to_path_buf(),
            offset: header as u64,
            what: format!("expected {expected} data bytes, found {actual}"),
        });
    }
    Ok(IdxArray { dims, data: bytes[header..].to_vec() })
}

/// Loads an IDX image file (dims N,H,W) plus its sibling label file, derived
/// by replacing "images" -> "labels" and "idx3" -> "idx1" in the file name.
/// Pixel bytes scale to [0, 1].
pub fn load_idx(images_path: &Path) -> Result<Dataset, DataError> {
    let name = images_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| DataError::Invalid(format!("bad path {}", images_path.display())))?;
    let sibling = name.replace("images", "labels").replace("idx3", "idx1");
    if sibling == name {
        return Err(DataError::Invalid(format!(
            "cannot derive a label file name from '{name}' (expected an '-images-idx3-' style name)"
        )));
    }
    let labels_path = images_path.with_file_name(sibling);
    if !labels_path.exists() {
        return Err(DataError::MissingFiles { expected: vec![labels_path] });
    }
    load_idx_pair(images_path, &labels_path)
}

/// Loads an explicit (images, labels) IDX file pair.
pub fn load_idx_pair(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let images = parse_idx(images_path)?;
    if images.dims.len() != 3 {
        return Err(DataError::Invalid(format!(
            "image file must have 3 dims (count, height, width), got {:?}",
            images.dims
        )));
    }
    let labels = parse_idx(labels_path)?;
    if labels.dims.len() != 1 || labels.dims[0] != images.dims[0] {
        return Err(DataError::Invalid(format!(
            "label file dims {:?} do not match {} images",
            labels.dims, images.dims[0]
        )));
    }
    let (n, h, w) = (images.dims[0], images.dims[1], images.dims[2]);
    let data: Vec<f64> = images.data.iter().map(|&b| f64::from(b) / 255.0).collect();
    let tensor = Tensor::new(vec![n, 1, h, w], data).expect("dims match data");
    let labels: Vec<usize> = labels.data.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1).max(2);
    Dataset::new(tensor, labels, classes, "idx")
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches
// ---------------------------------------------------------------------------

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const CIFAR_PER_FILE: usize = 10_000;

pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Loads the six standard CIFAR-10 binary batch files from a directory.
/// No preprocessing beyond scaling to [0, 1].
pub fn load_cifar_binary(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    let mut missing = Vec::new();
    let mut paths = Vec::new();
    for name in CIFAR_TRAIN_FILES.iter().chain(std::iter::once(&CIFAR_TEST_FILE)) {
        let p = dir.join(name);
        if !p.exists() {
            missing.push(p.clone());
        }
        paths.push(p);
    }
    if !missing.is_empty() {
        return Err(DataError::MissingFiles { expected: missing });
    }
    let mut train_pixels = Vec::with_capacity(5 * CIFAR_PER_FILE * 3072);
    let mut train_labels = Vec::with_capacity(5 * CIFAR_PER_FILE);
    for p in &paths[..5] {
        read_cifar_file(p, &mut train_pixels, &mut train_labels)?;
    }
    let mut test_pixels = Vec::new();
    let mut test_labels = Vec::new();
    read_cifar_file(&paths[5], &mut test_pixels, &mut test_labels)?;

    let train = Dataset::new(
        Tensor::new(vec![train_labels.len(), 3, 32, 32], train_pixels).expect("sized"),
        train_labels,
        10,
        "train",
    )?;
    let test = Dataset::new(
        Tensor::new(vec![test_labels.len(), 3, 32, 32], test_pixels).expect("sized"),
        test_labels,
        10,
        "test",
    )?;
    Ok((train, test))
}

fn read_cifar_file(path: &Path, pixels: &mut Vec<f64>, labels: &mut Vec<usize>) -> Result<(), DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::Io(path.to_path_buf(), e))?;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(DataError::Parse {
            path: path.to_path_buf(),
            offset: (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64,
            what: format!("file length {} is not a multiple of the {CIFAR_RECORD}-byte record", bytes.len()),
        });
    }
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = record[0] as usize;
        if label >= 10 {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                offset: (i * CIFAR_RECORD) as u64,
                what: format!("label byte {label} outside [0, 10)"),
            });
        }
        labels.push(label);
        pixels.extend(record[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok(())
}

/// Serializes one example back to CIFAR record bytes (inverse of the
/// loader's scaling); used to build fixtures and verify round-trips.
pub fn cifar_record_bytes(ds: &Dataset, index: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(CIFAR_RECORD);
    out.push(ds.labels[index] as u8);
    out.extend(ds.example(index).iter().map(|&v| (v * 255.0).round() as u8));
    out
}

/// Writes a CIFAR-format binary batch file from raw label/pixel bytes.
pub fn write_cifar_batch(path: &Path, labels: &[u8], pixels: &[u8]) -> Result<(), DataError> {
    assert_eq!(pixels.len(), labels.len() * 3072);
    let mut bytes = Vec::with_capacity(labels.len() * CIFAR_RECORD);
    for (i, &lab) in labels.iter().enumerate() {
        bytes.push(lab);
        bytes.extend_from_slice(&pixels[i * 3072..(i + 1) * 3072]);
    }
    std::fs::write(path, bytes).map_err(|e| DataError::Io(path.to_path_buf(), e))
}

/// Standard CIFAR-10 per-channel statistics (RGB), for optional
/// normalization.
pub const CIFAR10_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f64; 3] = [0.247, 0.243, 0.262];

/// Per-channel standardization x' = (x - mean) / std, in place.
pub fn normalize_channels(ds: &mut Dataset, means: &[f64], stds: &[f64]) {
    let (c, h, w) = ds.input_shape();
    assert_eq!(means.len(), c);
    assert_eq!(stds.len(), c);
    assert!(stds.iter().all(|&s| s > 0.0));
    let plane = h * w;
    for ex in ds.images.data_mut().chunks_mut(c * plane) {
        for (ch, chunk) in ex.chunks_mut(plane).enumerate() {
            for v in chunk {
                *v = (*v - means[ch]) / stds[ch];
            }
        }
    }
}

/// Exact inverse of [`normalize_channels`].
pub fn denormalize_channels(ds: &mut Dataset, means: &[f64], stds: &[f64]) {
    let (c, h, w) = ds.input_shape();
    let plane = h * w;
    for ex in ds.images.data_mut().chunks_mut(c * plane) {
        for (ch, chunk) in ex.chunks_mut(plane).enumerate() {
            for v in chunk {
                *v = *v * stds[ch] + means[ch];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// Ten classes of Gaussian-bump patterns on a 16x16 canvas; linearly
    /// separable by construction.
    Blobs,
    /// Two classes with XOR-arranged bright quadrants; not linearly
    /// separable.
    XorGrid,
}

const SYNTH_SIDE: usize = 16;

/// Deterministic synthetic dataset.
pub fn synth_dataset(kind: SynthKind, count: usize, seed: u64) -> Dataset {
    assert!(count > 0, "synthetic dataset needs count > 0");
    let mut rng = substream_indexed(seed, "synth", kind as u64);
    match kind {
        SynthKind::Blobs => blobs(count, &mut rng),
        SynthKind::XorGrid => xor_grid(count, &mut rng),
    }
}

fn blobs(count: usize, rng: &mut impl Rng) -> Dataset {
    let classes = 10;
    let side = SYNTH_SIDE;
    // Two bumps per class on a 4x4 grid of anchor points; classes share some
    // anchors so that more than one pixel neighborhood matters.
    let anchor = |i: usize| -> (f64, f64) {
        let gx = (i % 4) as f64;
        let gy = (i / 4 % 4) as f64;
        (2.0 + gx * 4.0, 2.0 + gy * 4.0)
    };
    let mut pixels = Vec::with_capacity(count * side * side);
    let mut labels = Vec::with_capacity(count);
    for e in 0..count {
        let class = e % classes;
        let bumps = [anchor(class), anchor((class * 7 + 3) % 16)];
        let jitter: (f64, f64) = (rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8));
        for y in 0..side {
            for x in 0..side {
                let mut v = 0.0;
                for &(bx, by) in &bumps {
                    let dx = x as f64 - (bx + jitter.0);
                    let dy = y as f64 - (by + jitter.1);
                    v += 0.9 * (-(dx * dx + dy * dy) / (2.0 * 1.6 * 1.6)).exp();
                }
                v += rng.random_range(-0.12..0.12);
                pixels.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(class);
    }
    let images = Tensor::new(vec![count, 1, side, side], pixels).expect("sized");
    Dataset::new(images, labels, classes, "synth-blobs").expect("valid by construction")
}

fn xor_grid(count: usize, rng: &mut impl Rng) -> Dataset {
    let side = SYNTH_SIDE;
    let half = side / 2;
    let mut pixels = Vec::with_capacity(count * side * side);
    let mut labels = Vec::with_capacity(count);
    // Two independent latent bits, one per image half; the class is their
    // XOR. Every individual pixel has identical marginals across classes,
    // so no linear function of the pixels can separate them.
    for _ in 0..count {
        let a = rng.random::<bool>();
        let b = rng.random::<bool>();
        let class = usize::from(a ^ b);
        for y in 0..side {
            for x in 0..side {
                let top = y < half;
                let bright = if x < half { top == a } else { top == b };
                let base = if bright { 0.75 } else { 0.15 };
                let v: f64 = base + rng.random_range(-0.1..0.1);
                pixels.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(class);
    }
    let images = Tensor::new(vec![count, 1, side, side], pixels).expect("sized");
    Dataset::new(images, labels, 2, "synth-xor").expect("valid by construction")
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct AugmentFlags {
    /// Horizontal flip with probability 0.5.
    #[serde(default)]
    pub hflip: bool,
    /// Zero-pad by 4 pixels and crop back at a random offset.
    #[serde(default)]
    pub pad_crop: bool,
}

/// Seeded per-epoch batch iterator over a dataset.
pub struct BatchStream<'a> {
    data: &'a Dataset,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    augment: AugmentFlags,
}

pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl<'a> BatchStream<'a> {
    pub fn new(data: &'a Dataset, batch_size: usize, shuffle: bool, seed: u64) -> Self {
        assert!(batch_size > 0);
        BatchStream { data, batch_size, shuffle, seed, augment: AugmentFlags::default() }
    }

    pub fn with_augment(mut self, augment: AugmentFlags) -> Self {
        self.augment = augment;
        self
    }

    /// The example visitation order for an epoch; a permutation derived from
    /// (seed, epoch) when shuffling, identity otherwise.
    pub fn order(&self, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.data.len()).collect();
        if self.shuffle {
            let mut rng = substream_indexed(self.seed, "data", epoch as u64);
            idx.shuffle(&mut rng);
        }
        idx
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.batch_size)
    }

    /// Materializes the epoch's batches in order; the final short batch is
    /// included.
    pub fn epoch(&self, epoch: usize) -> Vec<Batch> {
        let order = self.order(epoch);
        let (c, h, w) = self.data.input_shape();
        let numel = c * h * w;
        let mut rng = substream_indexed(self.seed, "augment", epoch as u64);
        order
            .chunks(self.batch_size)
            .map(|chunk| {
                let mut data = Vec::with_capacity(chunk.len() * numel);
                let mut labels = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let mut img = self.data.example(i).to_vec();
                    if self.augment.hflip && rng.random::<f64>() < 0.5 {
                        hflip(&mut img, c, h, w);
                    }
                    if self.augment.pad_crop {
                        let dy = rng.random_range(0..=8usize) as isize - 4;
                        let dx = rng.random_range(0..=8usize) as isize - 4;
                        img = shift(&img, c, h, w, dy, dx);
                    }
                    data.extend_from_slice(&img);
                    labels.push(self.data.labels[i]);
                }
                let images = Tensor::new(vec![chunk.len(), c, h, w], data).expect("sized");
                Batch { images, labels }
            })
            .collect()
    }
}

fn hflip(img: &mut [f64], c: usize, h: usize, w: usize) {
    for ch in 0..c {
        for y in 0..h {
            let row = &mut img[(ch * h + y) * w..(ch * h + y + 1) * w];
            row.reverse();
        }
    }
}

/// Pad-and-crop as a bounded shift with zero fill.
fn shift(img: &[f64], c: usize, h: usize, w: usize, dy: isize, dx: isize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}
