//! Seeded datasets: a synthetic grating task and the CIFAR-10 binary format.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Shape;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("{file}: truncated record at byte offset {offset}")]
    Truncated { file: String, offset: usize },
    #[error("{file}: label {label} at byte offset {offset} is out of range")]
    BadLabel { file: String, offset: usize, label: u8 },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// `(N, C, H, W)`.
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub classes: usize,
    pub shape: Shape,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Each sample is circularly shifted by up to this many pixels per axis.
    pub jitter: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { classes: 10, train_per_class: 200, test_per_class: 50, image_size: 16, channels: 3, noise: 1.0, jitter: 16, seed: 0 }
    }
}

struct Grating {
    fx: f64,
    fy: f64,
    amp: Vec<f64>,
    phase: Vec<f64>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Class `k` is a sinusoidal grating with a class-specific spatial frequency
/// and per-channel amplitude and phase. Every sample is the grating shifted
/// by a random circular offset in `[0, jitter]` plus Gaussian noise.
///
/// The shift makes pixel-wise class means nearly vanish, so a linear model
/// on raw pixels performs poorly while a convolutional model with global
/// pooling can pick out the frequency.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    if spec.classes < 2 || spec.train_per_class == 0 || spec.test_per_class == 0 || spec.image_size == 0 || spec.channels == 0 {
        return Err(DataError::InvalidSpec(format!("{spec:?}")));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(DataError::InvalidSpec(format!("noise must be finite and >= 0, got {}", spec.noise)));
    }
    let mut freqs: Vec<(i32, i32)> = (0..=4)
        .flat_map(|fx| (-4..=4).map(move |fy| (fx, fy)))
        .filter(|&(fx, fy)| (fx > 0 || fy > 0) && (2..=20).contains(&(fx * fx + fy * fy)))
        .collect();
    if spec.classes > freqs.len() {
        return Err(DataError::InvalidSpec(format!("at most {} classes supported", freqs.len())));
    }
    let mut rng = rng_for(spec.seed, 0);
    freqs.shuffle(&mut rng);
    let gratings: Vec<Grating> = freqs[..spec.classes]
        .iter()
        .map(|&(fx, fy)| Grating {
            fx: fx as f64,
            fy: fy as f64,
            amp: (0..spec.channels).map(|_| rng.random_range(0.5..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect(),
            phase: (0..spec.channels).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect(),
        })
        .collect();
    let shape = Shape::new(spec.channels, spec.image_size, spec.image_size);
    let train = sample_split(spec, &gratings, spec.train_per_class, &mut rng_for(spec.seed, 1));
    let test = sample_split(spec, &gratings, spec.test_per_class, &mut rng_for(spec.seed, 2));
    Ok(Dataset { train, test, classes: spec.classes, shape })
}

fn sample_split(spec: &SyntheticSpec, gratings: &[Grating], per_class: usize, rng: &mut ChaCha8Rng) -> Split {
    let s = spec.image_size;
    let n = per_class * spec.classes;
    let mut data = Vec::with_capacity(n * spec.channels * s * s);
    let mut labels = Vec::with_capacity(n);
    let k = std::f64::consts::TAU / s as f64;
    for _ in 0..per_class {
        for (label, g) in gratings.iter().enumerate() {
            let dx = rng.random_range(0..=spec.jitter) as f64;
            let dy = rng.random_range(0..=spec.jitter) as f64;
            for c in 0..spec.channels {
                for y in 0..s {
                    for x in 0..s {
                        let arg = k * (g.fx * (x as f64 + dx) + g.fy * (y as f64 + dy)) + g.phase[c];
                        let noise: f64 = if spec.noise > 0.0 { spec.noise * Distribution::<f64>::sample(&StandardNormal, rng) } else { 0.0 };
                        data.push(g.amp[c] * arg.sin() + noise);
                    }
                }
            }
            labels.push(label);
        }
    }
    let images = Tensor::new(vec![n, spec.channels, s, s], data).expect("synthetic shape");
    Split { images, labels }
}

/// Mini-batch index lists for one epoch: a seeded Fisher–Yates permutation
/// cut into chunks of `batch_size`, keeping the trailing partial batch.
pub fn batches(len: usize, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Random horizontal flip and zero-padded random crop (pad = size / 8), in place.
pub fn augment(images: &mut Tensor, rng: &mut impl Rng) {
    let s = images.shape().to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let pad = (h.min(w) / 8) as isize;
    let plane = h * w;
    let data = images.data_mut();
    let mut buf = vec![0.0; c * plane];
    for i in 0..n {
        let flip = rng.random_bool(0.5);
        let oy = rng.random_range(-pad as i64..=pad as i64) as isize;
        let ox = rng.random_range(-pad as i64..=pad as i64) as isize;
        let img = &mut data[i * c * plane..(i + 1) * c * plane];
        buf.fill(0.0);
        for ch in 0..c {
            for y in 0..h {
                let sy = y as isize + oy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = xx as isize + ox;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    buf[ch * plane + y * w + x] = img[ch * plane + sy as usize * w + sx as usize];
                }
            }
        }
        img.copy_from_slice(&buf);
    }
}

pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const CIFAR_PIXELS: usize = 3072;
pub const CIFAR_CLASSES: usize = 10;

/// One raw CIFAR-10 record: a label byte followed by 1024 red, 1024 green
/// and 1024 blue bytes, each plane row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CifarRecord {
    pub label: u8,
    pub pixels: Vec<u8>,
}

impl CifarRecord {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CIFAR_RECORD_BYTES);
        out.push(self.label);
        out.extend_from_slice(&self.pixels);
        out
    }
}

pub fn parse_cifar_batch(bytes: &[u8], file: &str) -> Result<Vec<CifarRecord>, DataError> {
    let whole = bytes.len() / CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES;
    if whole != bytes.len() {
        return Err(DataError::Truncated { file: file.to_string(), offset: whole });
    }
    bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            if rec[0] as usize >= CIFAR_CLASSES {
                return Err(DataError::BadLabel { file: file.to_string(), offset: i * CIFAR_RECORD_BYTES, label: rec[0] });
            }
            Ok(CifarRecord { label: rec[0], pixels: rec[1..].to_vec() })
        })
        .collect()
}

pub fn write_cifar_batch(records: &[CifarRecord]) -> Vec<u8> {
    records.iter().flat_map(CifarRecord::to_bytes).collect()
}

/// Channel-wise normalization applied after scaling pixels to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self { mean: [0.4914, 0.4822, 0.4465], std: [0.2470, 0.2435, 0.2616] }
    }
}

impl Normalization {
    pub fn apply(&self, channel: usize, byte: u8) -> f64 {
        (byte as f64 / 255.0 - self.mean[channel]) / self.std[channel]
    }

    /// Inverse of [`apply`](Self::apply), rounded back to a byte.
    pub fn invert(&self, channel: usize, value: f64) -> u8 {
        ((value * self.std[channel] + self.mean[channel]) * 255.0).round().clamp(0.0, 255.0) as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CifarOptions {
    /// Keep only the first `k` training images of each class, in file order.
    pub subset_per_class: Option<usize>,
    pub test_subset_per_class: Option<usize>,
    pub normalization: Normalization,
}

fn records_to_split(records: &[CifarRecord], subset: Option<usize>, norm: &Normalization) -> Split {
    let mut taken = [0usize; CIFAR_CLASSES];
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for r in records {
        let l = r.label as usize;
        if subset.is_some_and(|k| taken[l] >= k) {
            continue;
        }
        taken[l] += 1;
        data.extend(r.pixels.iter().enumerate().map(|(i, &b)| norm.apply(i / 1024, b)));
        labels.push(l);
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], data).expect("cifar shape");
    Split { images, labels }
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

/// Reads `data_batch_1.bin` … `data_batch_5.bin` (those present, at least
/// the first) and `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: &Path, opts: &CifarOptions) -> Result<Dataset, DataError> {
    let mut train = Vec::new();
    for i in 1..=5 {
        let path = dir.join(format!("data_batch_{i}.bin"));
        if i > 1 && !path.exists() {
            continue;
        }
        train.extend(parse_cifar_batch(&read(&path)?, &path.display().to_string())?);
    }
    let test_path = dir.join("test_batch.bin");
    let test = parse_cifar_batch(&read(&test_path)?, &test_path.display().to_string())?;
    Ok(Dataset {
        train: records_to_split(&train, opts.subset_per_class, &opts.normalization),
        test: records_to_split(&test, opts.test_subset_per_class, &opts.normalization),
        classes: CIFAR_CLASSES,
        shape: Shape::new(3, 32, 32),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(noise: f64, jitter: usize) -> SyntheticSpec {
        SyntheticSpec { classes: 4, train_per_class: 6, test_per_class: 3, image_size: 8, channels: 2, noise, jitter, seed: 3 }
    }

    #[test]
    fn synthetic_counts_and_shape() {
        let d = gen_synthetic(&small_spec(0.5, 8)).unwrap();
        assert_eq!(d.train.images.shape(), &[24, 2, 8, 8]);
        assert_eq!(d.train.class_counts(4), vec![6; 4]);
        assert_eq!(d.test.class_counts(4), vec![3; 4]);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = small_spec(0.5, 8);
        assert_eq!(gen_synthetic(&spec).unwrap(), gen_synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 4, ..spec };
        assert_ne!(gen_synthetic(&spec).unwrap().train, gen_synthetic(&other).unwrap().train);
    }

    #[test]
    fn noiseless_unshifted_classes_are_constant_and_1nn_is_perfect() {
        let d = gen_synthetic(&small_spec(0.0, 0)).unwrap();
        let per = 2 * 8 * 8;
        let img = |s: &Split, i: usize| s.images.data()[i * per..(i + 1) * per].to_vec();
        for i in 0..d.train.len() {
            let first = d.train.labels.iter().position(|&l| l == d.train.labels[i]).unwrap();
            assert_eq!(img(&d.train, i), img(&d.train, first));
        }
        for i in 0..d.test.len() {
            let q = img(&d.test, i);
            let nearest = (0..d.train.len())
                .min_by(|&a, &b| {
                    let da: f64 = img(&d.train, a).iter().zip(&q).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = img(&d.train, b).iter().zip(&q).map(|(x, y)| (x - y).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(d.train.labels[nearest], d.test.labels[i]);
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        assert!(gen_synthetic(&SyntheticSpec { classes: 1, ..small_spec(0.1, 0) }).is_err());
        assert!(gen_synthetic(&SyntheticSpec { noise: f64::NAN, ..small_spec(0.1, 0) }).is_err());
    }

    #[test]
    fn batch_layout() {
        let b = batches(10, 3, 9);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(batches(10, 3, 9), b);
        let single = batches(7, 7, 1);
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].len(), 7);
    }

    fn record(label: u8, seed: u8) -> CifarRecord {
        CifarRecord { label, pixels: (0..CIFAR_PIXELS).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect() }
    }

    #[test]
    fn cifar_truncated_and_bad_label() {
        let bytes = write_cifar_batch(&[record(1, 0), record(2, 1)]);
        match parse_cifar_batch(&bytes[..bytes.len() - 5], "f") {
            Err(DataError::Truncated { offset, .. }) => assert_eq!(offset, CIFAR_RECORD_BYTES),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[CIFAR_RECORD_BYTES] = 10;
        assert!(matches!(parse_cifar_batch(&bad, "f"), Err(DataError::BadLabel { offset: 3073, label: 10, .. })));
    }

    #[test]
    fn normalization_inverts_exactly() {
        let n = Normalization::default();
        for c in 0..3 {
            for b in 0..=255u8 {
                assert_eq!(n.invert(c, n.apply(c, b)), b);
            }
        }
    }

    #[test]
    fn augment_keeps_shape_and_is_seeded() {
        let d = gen_synthetic(&small_spec(0.5, 8)).unwrap();
        let mut a = d.train.images.clone();
        let mut b = d.train.images.clone();
        augment(&mut a, &mut ChaCha8Rng::seed_from_u64(1));
        augment(&mut b, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert_eq!(a.shape(), d.train.images.shape());
    }
}
