//! Dataset ingestion: IDX (MNIST-style) and CIFAR-10 binary readers, a
//! deterministic synthetic pattern generator for desk-scale experiments,
//! and normalization / batching helpers.

use std::fmt;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{mix, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        f.write_str(s)
    }
}

/// Images in `[N, C, H, W]` layout with pixel values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        images: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("dataset images must be [N,C,H,W], got {shape:?}")));
        }
        if shape[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                shape[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} >= {num_classes} classes")));
        }
        if images.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Data("pixel values outside [0, 1]".into()));
        }
        Ok(Dataset { name: name.into(), split, images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copy the listed samples into a `[B, C, H, W]` batch tensor.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let shape = self.images.shape();
        let sample = shape[1] * shape[2] * shape[3];
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * sample);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&src[i * sample..(i + 1) * sample]);
            labels.push(self.labels[i]);
        }
        let batch = Tensor::new(vec![indices.len(), shape[1], shape[2], shape[3]], data).unwrap();
        (batch, labels)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Data(format!("truncated file while reading {what}")))
}

fn read_u32_be(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_be_bytes(b))
}

/// Read an IDX image/label file pair (the MNIST container format).
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let mut img = std::io::BufReader::new(std::fs::File::open(images_path)?);
    let magic = read_u32_be(&mut img, "image magic")?;
    if magic != 0x0000_0803 {
        return Err(Error::Data(format!(
            "{}: bad IDX image magic {magic:#010x} (expected 0x00000803)",
            images_path.display()
        )));
    }
    let n = read_u32_be(&mut img, "image count")? as usize;
    let h = read_u32_be(&mut img, "image rows")? as usize;
    let w = read_u32_be(&mut img, "image cols")? as usize;
    let mut pixels = vec![0u8; n * h * w];
    read_exact(&mut img, &mut pixels, "image pixels")?;

    let mut lab = std::io::BufReader::new(std::fs::File::open(labels_path)?);
    let magic = read_u32_be(&mut lab, "label magic")?;
    if magic != 0x0000_0801 {
        return Err(Error::Data(format!(
            "{}: bad IDX label magic {magic:#010x} (expected 0x00000801)",
            labels_path.display()
        )));
    }
    let ln = read_u32_be(&mut lab, "label count")? as usize;
    if ln != n {
        return Err(Error::Data(format!("{n} images but {ln} labels in IDX pair")));
    }
    let mut labels_raw = vec![0u8; ln];
    read_exact(&mut lab, &mut labels_raw, "labels")?;

    let data: Vec<f32> = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let images = Tensor::new(vec![n, 1, h, w], data)?;
    let labels: Vec<usize> = labels_raw.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().copied().max().map_or(1, |m| m + 1).max(10);
    Dataset::new("idx", split, images, labels, classes)
}

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3 x 1024 channel planes

fn read_cifar_file(path: &Path, pixels: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<()> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Data(format!(
            "{}: size {} is not a multiple of {CIFAR_RECORD}-byte records",
            path.display(),
            bytes.len()
        )));
    }
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Data(format!("{}: label {label} >= 10", path.display())));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
    }
    Ok(())
}

/// Read the standard CIFAR-10 binary layout from a directory:
/// `data_batch_{1..5}.bin` for train, `test_batch.bin` for test.
pub fn load_cifar10_bin(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<std::path::PathBuf> = match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Val | Split::Test => vec![dir.join("test_batch.bin")],
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        read_cifar_file(f, &mut pixels, &mut labels)?;
    }
    let n = labels.len();
    let images = Tensor::new(vec![n, 3, 32, 32], pixels)?;
    Dataset::new("cifar10", split, images, labels, 10)
}

/// Deterministic class prototypes: bars, crosses, diagonals and blobs on
/// a dim background. Public so tests can run a nearest-prototype oracle.
pub fn prototypes(classes: usize, size: usize) -> Vec<Vec<f32>> {
    let lo = 0.1f32;
    let hi = 0.9f32;
    (0..classes)
        .map(|k| {
            let mut img = vec![lo; size * size];
            let variant = k % 5;
            let offset = 1 + (k / 5) % (size.saturating_sub(2).max(1));
            match variant {
                0 => {
                    // horizontal bar
                    for x in 0..size {
                        img[offset * size + x] = hi;
                    }
                }
                1 => {
                    // vertical bar
                    for y in 0..size {
                        img[y * size + offset] = hi;
                    }
                }
                2 => {
                    // cross through the center
                    let c = size / 2;
                    for i in 0..size {
                        img[c * size + i] = hi;
                        img[i * size + c] = hi;
                    }
                }
                3 => {
                    // main diagonal (shifted by offset)
                    for i in 0..size {
                        img[i * size + (i + offset) % size] = hi;
                    }
                }
                _ => {
                    // square blob
                    let c = size / 2;
                    let r = 1 + offset.min(size / 4);
                    for y in c.saturating_sub(r)..(c + r).min(size) {
                        for x in c.saturating_sub(r)..(c + r).min(size) {
                            img[y * size + x] = hi;
                        }
                    }
                }
            }
            img
        })
        .collect()
}

/// Seeded synthetic dataset: per-class geometric prototypes plus Gaussian
/// pixel noise of the given sigma, clamped to `[0, 1]`.
pub fn synthetic_patterns_with_sigma(
    seed: u64,
    classes: usize,
    size: usize,
    per_class: usize,
    sigma: f32,
    split: Split,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    let protos = prototypes(classes, size);
    let n = classes * per_class;
    let mut rng = Rng::new(mix(seed, match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }));
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for k in 0..classes {
        for _ in 0..per_class {
            for &p in &protos[k] {
                data.push((p + sigma * rng.normal()).clamp(0.0, 1.0));
            }
            labels.push(k);
        }
    }
    let images = Tensor::new(vec![n, 1, size, size], data)?;
    Dataset::new("synthetic", split, images, labels, classes)
}

pub fn synthetic_patterns(
    seed: u64,
    classes: usize,
    size: usize,
    per_class: usize,
    split: Split,
) -> Result<Dataset> {
    synthetic_patterns_with_sigma(seed, classes, size, per_class, 0.1, split)
}

/// Index batches for one epoch: a seeded permutation chunked by batch
/// size, short final batch kept. Seed and epoch jointly determine the
/// order, so any epoch can be replayed independently.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::new(mix(shuffle_seed, 0x00DA_7A00 ^ epoch));
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Unshuffled batches, for evaluation passes.
pub fn batch_indices_sequential(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    (0..n).collect::<Vec<_>>().chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Per-channel affine normalization applied after `[0, 1]` scaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn cifar10() -> Self {
        Normalization {
            mean: vec![0.4914, 0.4822, 0.4465],
            std: vec![0.2470, 0.2435, 0.2616],
        }
    }

    /// Centered single-channel map used for the synthetic patterns.
    pub fn unit_gray() -> Self {
        Normalization { mean: vec![0.5], std: vec![0.5] }
    }

    pub fn apply(&self, batch: &mut Tensor) -> Result<()> {
        let shape = batch.shape().to_vec();
        if shape.len() != 4 || shape[1] != self.mean.len() {
            return Err(Error::Shape(format!(
                "normalization over {} channels cannot apply to {shape:?}",
                self.mean.len()
            )));
        }
        let plane = shape[2] * shape[3];
        let data = batch.data_mut();
        for nb in 0..shape[0] {
            for c in 0..shape[1] {
                let start = (nb * shape[1] + c) * plane;
                let (m, s) = (self.mean[c], self.std[c]);
                for v in &mut data[start..start + plane] {
                    *v = (*v - m) / s;
                }
            }
        }
        Ok(())
    }
}

/// Flip each sample left-right with the given probability (train-time
/// augmentation only).
pub fn hflip_batch(batch: &mut Tensor, prob: f32, rng: &mut Rng) {
    let shape = batch.shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let data = batch.data_mut();
    for nb in 0..n {
        if rng.next_f32() >= prob {
            continue;
        }
        for ch in 0..c {
            for y in 0..h {
                let row = ((nb * c + ch) * h + y) * w;
                data[row..row + w].reverse();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_idx_pair(dir: &Path, images: &[u8], labels: &[u8], h: u32, w: u32) -> (std::path::PathBuf, std::path::PathBuf) {
        let n = labels.len() as u32;
        let ip = dir.join("imgs.idx3");
        let lp = dir.join("labs.idx1");
        let mut f = std::fs::File::create(&ip).unwrap();
        f.write_all(&0x0000_0803u32.to_be_bytes()).unwrap();
        f.write_all(&n.to_be_bytes()).unwrap();
        f.write_all(&h.to_be_bytes()).unwrap();
        f.write_all(&w.to_be_bytes()).unwrap();
        f.write_all(images).unwrap();
        let mut f = std::fs::File::create(&lp).unwrap();
        f.write_all(&0x0000_0801u32.to_be_bytes()).unwrap();
        f.write_all(&n.to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_fixture_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..2 * 4 * 4).map(|i| (i * 16) as u8).collect();
        let (ip, lp) = write_idx_pair(dir.path(), &pixels, &[3, 7], 4, 4);
        let ds = load_idx(&ip, &lp, Split::Train).unwrap();
        assert_eq!(ds.images.shape(), &[2, 1, 4, 4]);
        assert_eq!(ds.labels, vec![3, 7]);
        for (i, &p) in pixels.iter().enumerate() {
            assert_eq!(ds.images.data()[i], p as f32 / 255.0);
        }
    }

    #[test]
    fn idx_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), &[0u8; 16], &[0], 4, 4);
        // Corrupt the magic.
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes[3] = 0x99;
        std::fs::write(&ip, &bytes).unwrap();
        let err = load_idx(&ip, &lp, Split::Train).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        // Truncate the pixel payload.
        let (ip2, lp2) = write_idx_pair(dir.path(), &[0u8; 16], &[0], 4, 4);
        let bytes = std::fs::read(&ip2).unwrap();
        std::fs::write(&ip2, &bytes[..bytes.len() - 5]).unwrap();
        let err = load_idx(&ip2, &lp2, Split::Train).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn idx_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, _) = write_idx_pair(dir.path(), &[0u8; 32], &[0, 0], 4, 4);
        let (_, lp3) = {
            let d2 = dir.path().join("other");
            std::fs::create_dir(&d2).unwrap();
            write_idx_pair(&d2, &[0u8; 48], &[0, 0, 0], 4, 4)
        };
        let err = load_idx(&ip, &lp3, Split::Train).unwrap_err();
        assert!(err.to_string().contains("labels"), "{err}");
    }

    #[test]
    fn cifar_single_record_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 7;
        rec[1] = 255; // first red pixel
        rec[1 + 1024] = 128; // first green pixel
        std::fs::write(dir.path().join("test_batch.bin"), &rec).unwrap();
        let ds = load_cifar10_bin(dir.path(), Split::Test).unwrap();
        assert_eq!(ds.labels, vec![7]);
        assert_eq!(ds.images.shape(), &[1, 3, 32, 32]);
        assert_eq!(ds.images.data()[0], 1.0); // red plane first
        assert_eq!(ds.images.data()[1024], 128.0 / 255.0); // then green
    }

    #[test]
    fn cifar_short_record_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("test_batch.bin"), vec![0u8; 3072]).unwrap();
        let err = load_cifar10_bin(dir.path(), Split::Test).unwrap_err();
        assert!(err.to_string().contains("3073"), "{err}");
    }

    #[test]
    fn cifar_bad_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 12;
        std::fs::write(dir.path().join("test_batch.bin"), &rec).unwrap();
        assert!(load_cifar10_bin(dir.path(), Split::Test).is_err());
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let a = synthetic_patterns(9, 3, 8, 5, Split::Train).unwrap();
        let b = synthetic_patterns(9, 3, 8, 5, Split::Train).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);
        let c = synthetic_patterns(10, 3, 8, 5, Split::Train).unwrap();
        assert_ne!(a.images.data(), c.images.data());
    }

    #[test]
    fn sigma_zero_gives_identical_samples_and_perfect_oracle() {
        let ds = synthetic_patterns_with_sigma(4, 5, 8, 3, 0.0, Split::Train).unwrap();
        let sample = 64;
        let d = ds.images.data();
        assert_eq!(&d[0..sample], &d[sample..2 * sample]);
        // Nearest-prototype classification is exact without noise.
        let protos = prototypes(5, 8);
        let mut correct = 0;
        for i in 0..ds.len() {
            let img = &d[i * sample..(i + 1) * sample];
            let best = (0..5)
                .min_by(|&a, &b| {
                    let da: f32 = protos[a].iter().zip(img).map(|(p, x)| (p - x).powi(2)).sum();
                    let db: f32 = protos[b].iter().zip(img).map(|(p, x)| (p - x).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == ds.labels[i] {
                correct += 1;
            }
        }
        assert_eq!(correct, ds.len());
    }

    #[test]
    fn batch_sizes_and_partition() {
        let batches = batch_indices(10, 3, 1, 0);
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let mut all: Vec<usize> = batches.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn epochs_permute_differently_but_reproducibly() {
        let e0 = batch_indices(64, 8, 5, 0);
        let e1 = batch_indices(64, 8, 5, 1);
        assert_ne!(e0, e1);
        assert_eq!(e0, batch_indices(64, 8, 5, 0));
    }

    #[test]
    fn normalization_and_gather() {
        let ds = synthetic_patterns(3, 2, 4, 2, Split::Train).unwrap();
        let (mut batch, labels) = ds.gather(&[0, 3]);
        assert_eq!(batch.shape(), &[2, 1, 4, 4]);
        assert_eq!(labels, vec![0, 1]);
        let before = batch.data().to_vec();
        Normalization::unit_gray().apply(&mut batch).unwrap();
        for (b, a) in before.iter().zip(batch.data()) {
            assert!((a - (b - 0.5) / 0.5).abs() < 1e-7);
        }
    }

    #[test]
    fn hflip_reverses_rows() {
        let mut t = Tensor::new(vec![1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut rng = Rng::new(0);
        hflip_batch(&mut t, 1.0, &mut rng);
        assert_eq!(t.data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
    }
}
