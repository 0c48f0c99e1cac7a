//! Datasets: the XOR truth table, MNIST-format IDX files, CIFAR-10 binary
//! batches, per-channel normalization and seeded augmentation.
//!
//! Loaded pixels are `byte / 255`, so writing a loaded dataset back out
//! reproduces the original bytes.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// `[N, ...]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: &str) -> Result<Self> {
        let n = images.shape().first().copied().unwrap_or(0);
        if n == 0 {
            return Err(Error::contract("dataset must contain at least one sample"));
        }
        if labels.len() != n {
            return Err(Error::dim(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::contract(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        if !images.all_finite() {
            return Err(Error::Numeric("dataset contains non-finite values".into()));
        }
        Ok(LabeledDataset {
            images,
            labels,
            num_classes,
            split: split.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape, without the leading batch axis.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// The first `k` samples (all of them when `k` exceeds the size).
    pub fn first(&self, k: usize) -> Result<LabeledDataset> {
        let k = k.min(self.len());
        LabeledDataset::new(
            self.images.slice_rows(0, k)?,
            self.labels[..k].to_vec(),
            self.num_classes,
            &self.split,
        )
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }
}

/// The four XOR points with labels `0, 1, 1, 0`.
pub fn xor_dataset() -> LabeledDataset {
    let images = Tensor::new(&[4, 2], vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
    LabeledDataset::new(images, vec![0, 1, 1, 0], 2, "xor").unwrap()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let slice = self.bytes.get(self.pos..end).ok_or_else(|| {
            Error::format(self.bytes.len() as u64, format!("file ends inside the {what} field"))
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(slice.try_into().unwrap()))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::format(
                self.bytes.len() as u64,
                format!("truncated {what}: expected {n} bytes from offset {}", self.pos),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn magic(r: &mut Reader<'_>, expected: u32) -> Result<()> {
    let m = r.u32_be("magic")?;
    if m != expected {
        return Err(Error::format(
            0,
            format!("bad magic 0x{m:08x}, expected 0x{expected:08x}"),
        ));
    }
    Ok(())
}

fn scale(bytes: &[u8]) -> Vec<f64> {
    bytes.iter().map(|&b| b as f64 / 255.0).collect()
}

/// Parse an IDX image file into `[N, 1, rows, cols]` values in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { bytes, pos: 0 };
    magic(&mut r, IDX_IMAGES_MAGIC)?;
    let n = r.u32_be("image count")? as usize;
    let rows = r.u32_be("row count")? as usize;
    let cols = r.u32_be("column count")? as usize;
    let pixels = scale(r.take(n * rows * cols, "pixel data")?);
    r.finish()?;
    Tensor::new(&[n, 1, rows, cols], pixels)
}

/// Parse an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader { bytes, pos: 0 };
    magic(&mut r, IDX_LABELS_MAGIC)?;
    let n = r.u32_be("label count")? as usize;
    let labels = r.take(n, "label data")?.iter().map(|&b| b as usize).collect();
    r.finish()?;
    Ok(labels)
}

fn to_bytes(values: &[f64]) -> Result<Vec<u8>> {
    values
        .iter()
        .map(|&v| {
            let b = (v * 255.0).round();
            if (0.0..=255.0).contains(&b) && b / 255.0 == v {
                Ok(b as u8)
            } else {
                Err(Error::contract(format!("{v} is not a byte/255 pixel value")))
            }
        })
        .collect()
}

pub fn encode_idx_images(images: &Tensor) -> Result<Vec<u8>> {
    let (n, rows, cols) = match *images.shape() {
        [n, 1, r, c] => (n, r, c),
        ref s => return Err(Error::dim(format!("IDX images must be [N,1,H,W], got {s:?}"))),
    };
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(to_bytes(images.data())?);
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::contract(format!("label {l} exceeds a byte")))?);
    }
    Ok(out)
}

/// Load an IDX image/label file pair as a 10-class dataset.
pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    let x = parse_idx_images(&std::fs::read(images)?)?;
    let y = parse_idx_labels(&std::fs::read(labels)?)?;
    if x.shape()[0] != y.len() {
        return Err(Error::format(
            4,
            format!("{} images but {} labels", x.shape()[0], y.len()),
        ));
    }
    if let Some(i) = y.iter().position(|&l| l > 9) {
        return Err(Error::format(8 + i as u64, format!("label {} outside 0..=9", y[i])));
    }
    if y.is_empty() {
        return Err(Error::format(4, "file holds no samples"));
    }
    let split = images
        .file_name()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    LabeledDataset::new(x, y, 10, &split)
}

/// Parse concatenated CIFAR-10 records: one label byte followed by
/// 3072 channel-planar R, G, B pixels. `base` offsets reported positions.
pub fn parse_cifar10(bytes: &[u8], base: u64) -> Result<(Vec<f64>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::format(
            base + (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
            format!(
                "size {} is not a multiple of the {CIFAR_RECORD}-byte record",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if record[0] > 9 {
            return Err(Error::format(
                base + (i * CIFAR_RECORD) as u64,
                format!("label byte {} outside 0..=9", record[0]),
            ));
        }
        labels.push(record[0] as usize);
        pixels.extend(scale(&record[1..]));
    }
    Ok((pixels, labels))
}

pub fn encode_cifar10(ds: &LabeledDataset) -> Result<Vec<u8>> {
    if ds.sample_shape() != [3, 32, 32] {
        return Err(Error::dim(format!(
            "CIFAR-10 records hold [3,32,32] images, got {:?}",
            ds.sample_shape()
        )));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for (label, image) in ds.labels.iter().zip(ds.images.data().chunks(CIFAR_RECORD - 1)) {
        out.push(u8::try_from(*label).map_err(|_| Error::contract("label exceeds a byte"))?);
        out.extend(to_bytes(image)?);
    }
    Ok(out)
}

/// Load and concatenate CIFAR-10 binary batch files, in order.
pub fn load_cifar10_bin(paths: &[PathBuf]) -> Result<LabeledDataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = std::fs::read(path)?;
        let (p, l) = parse_cifar10(&bytes, 0).map_err(|e| match e {
            Error::Format { offset, message } => Error::format(
                offset,
                format!("{}: {message}", path.display()),
            ),
            other => other,
        })?;
        pixels.extend(p);
        labels.extend(l);
    }
    if labels.is_empty() {
        return Err(Error::format(0, "no CIFAR-10 records"));
    }
    let images = Tensor::new(&[labels.len(), 3, 32, 32], pixels)?;
    LabeledDataset::new(images, labels, 10, "cifar10")
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [_, c, rest @ ..] => Ok((*c, rest.iter().product())),
        _ => Err(Error::dim(format!("channel statistics need [N,C,...], got {shape:?}"))),
    }
}

/// Population mean and standard deviation of every channel over `images`.
pub fn channel_stats(images: &Tensor) -> Result<ChannelStats> {
    let (c, plane) = channel_layout(images.shape())?;
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for (i, chunk) in images.data().chunks(plane).enumerate() {
        let ch = i % c;
        for &v in chunk {
            sum[ch] += v;
            sq[ch] += v * v;
        }
    }
    let count = (images.len() / c) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / count - m * m).max(0.0).sqrt())
        .collect();
    Ok(ChannelStats { mean, std })
}

fn map_channels(images: &mut Tensor, stats: &ChannelStats, f: impl Fn(f64, f64, f64) -> f64) -> Result<()> {
    let (c, plane) = channel_layout(images.shape())?;
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(Error::dim(format!(
            "{} channels but statistics for {} / {}",
            c,
            stats.mean.len(),
            stats.std.len()
        )));
    }
    if let Some(ch) = stats.std.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::contract(format!(
            "standard deviation of channel {ch} must be positive, got {}",
            stats.std[ch]
        )));
    }
    for (i, chunk) in images.data_mut().chunks_mut(plane).enumerate() {
        let ch = i % c;
        for v in chunk {
            *v = f(*v, stats.mean[ch], stats.std[ch]);
        }
    }
    Ok(())
}

/// `(x − mean) / std` per channel, in place.
pub fn normalize_images(images: &mut Tensor, stats: &ChannelStats) -> Result<()> {
    map_channels(images, stats, |v, m, s| (v - m) / s)
}

pub fn denormalize_images(images: &mut Tensor, stats: &ChannelStats) -> Result<()> {
    map_channels(images, stats, |v, m, s| v * s + m)
}

pub fn normalize(ds: &LabeledDataset, stats: &ChannelStats) -> Result<LabeledDataset> {
    let mut out = ds.clone();
    normalize_images(&mut out.images, stats)?;
    Ok(out)
}

pub fn denormalize(ds: &LabeledDataset, stats: &ChannelStats) -> Result<LabeledDataset> {
    let mut out = ds.clone();
    denormalize_images(&mut out.images, stats)?;
    Ok(out)
}

/// Random crop after zero padding plus horizontal flip, drawn per
/// `(seed, epoch, sample index)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    pub seed: u64,
    pub pad: usize,
    pub flip_prob: f64,
}

impl Augment {
    pub fn new(seed: u64, pad: usize, flip_prob: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&flip_prob) {
            return Err(Error::contract(format!(
                "flip probability {flip_prob} outside [0, 1]"
            )));
        }
        Ok(Augment {
            seed,
            pad,
            flip_prob,
        })
    }

    fn rng(&self, epoch: usize, index: usize) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
        key[16..24].copy_from_slice(&(index as u64).to_le_bytes());
        key[24..].copy_from_slice(b"augment!");
        ChaCha8Rng::from_seed(key)
    }

    /// Transform a `[B, C, H, W]` batch whose rows are the samples `indices`.
    pub fn apply(&self, batch: &mut Tensor, epoch: usize, indices: &[usize]) -> Result<()> {
        let (b, c, h, w) = match *batch.shape() {
            [b, c, h, w] => (b, c, h, w),
            ref s => return Err(Error::dim(format!("augment needs [B,C,H,W], got {s:?}"))),
        };
        if indices.len() != b {
            return Err(Error::dim(format!("{b} samples but {} indices", indices.len())));
        }
        if self.pad == 0 && self.flip_prob == 0.0 {
            return Ok(());
        }
        let sample = c * h * w;
        let mut scratch = vec![0.0; sample];
        for (s, &index) in indices.iter().enumerate() {
            let mut rng = self.rng(epoch, index);
            let dy = rng.random_range(0..=2 * self.pad) as isize - self.pad as isize;
            let dx = rng.random_range(0..=2 * self.pad) as isize - self.pad as isize;
            let flip = rng.random::<f64>() < self.flip_prob;
            let data = &mut batch.data_mut()[s * sample..(s + 1) * sample];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let sx = if flip { w - 1 - x } else { x } as isize + dx;
                        let sy = y as isize + dy;
                        let inside = (0..h as isize).contains(&sy) && (0..w as isize).contains(&sx);
                        scratch[(ch * h + y) * w + x] = if inside {
                            data[(ch * h + sy as usize) * w + sx as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
            data.copy_from_slice(&scratch);
        }
        Ok(())
    }
}

/// Train and test splits of a named dataset.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

fn find_dir(root: &Path, candidates: &[&str], marker: &str) -> Option<PathBuf> {
    candidates
        .iter()
        .map(|c| root.join(c))
        .chain(std::iter::once(root.to_path_buf()))
        .find(|d| d.join(marker).is_file())
}

/// MNIST IDX files under `root` or `root/mnist`.
pub fn load_mnist(root: &Path) -> Result<Splits> {
    let dir = find_dir(root, &["mnist", "MNIST"], "train-images-idx3-ubyte").ok_or_else(|| {
        Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no MNIST IDX files under {}", root.display()),
        ))
    })?;
    Ok(Splits {
        train: load_idx(
            &dir.join("train-images-idx3-ubyte"),
            &dir.join("train-labels-idx1-ubyte"),
        )?,
        test: load_idx(
            &dir.join("t10k-images-idx3-ubyte"),
            &dir.join("t10k-labels-idx1-ubyte"),
        )?,
    })
}

/// CIFAR-10 binary batches under `root` or `root/cifar-10-batches-bin`.
pub fn load_cifar10(root: &Path) -> Result<Splits> {
    let dir = find_dir(root, &["cifar-10-batches-bin", "cifar10"], "test_batch.bin").ok_or_else(|| {
        Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no CIFAR-10 batches under {}", root.display()),
        ))
    })?;
    let train: Vec<PathBuf> = (1..=5)
        .map(|i| dir.join(format!("data_batch_{i}.bin")))
        .filter(|p| p.is_file())
        .collect();
    let mut train = load_cifar10_bin(&train)?;
    train.split = "train".into();
    let mut test = load_cifar10_bin(&[dir.join("test_batch.bin")])?;
    test.split = "test".into();
    Ok(Splits { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_fixture(n: usize) -> (Vec<u8>, Vec<u8>) {
        let images = Tensor::from_fn(&[n, 1, 3, 2], |i| ((i * 37) % 256) as f64 / 255.0);
        let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
        (encode_idx_images(&images).unwrap(), encode_idx_labels(&labels).unwrap())
    }

    #[test]
    fn xor_truth_table() {
        let ds = xor_dataset();
        assert_eq!(ds.len(), 4);
        let at = |a: f64, b: f64| {
            let i = ds.images.data().chunks(2).position(|p| p == [a, b]).unwrap();
            ds.labels[i]
        };
        assert_eq!(at(1.0, 1.0), 0);
        assert_eq!(at(0.0, 1.0), 1);
    }

    #[test]
    fn xor_is_not_linearly_separable() {
        let ds = xor_dataset();
        let grid: Vec<f64> = (-20..=20).map(|i| i as f64 * 0.25).collect();
        for &w1 in &grid {
            for &w2 in &grid {
                for &b in &grid {
                    let correct = ds
                        .images
                        .data()
                        .chunks(2)
                        .zip(&ds.labels)
                        .filter(|(x, &y)| ((w1 * x[0] + w2 * x[1] + b > 0.0) as usize) == y)
                        .count();
                    assert!(correct <= 3, "({w1}, {w2}, {b}) separates XOR");
                }
            }
        }
    }

    #[test]
    fn idx_round_trip_is_bitwise() {
        let (img, lab) = idx_fixture(5);
        let x = parse_idx_images(&img).unwrap();
        let y = parse_idx_labels(&lab).unwrap();
        assert_eq!(x.shape(), [5, 1, 3, 2]);
        assert_eq!(encode_idx_images(&x).unwrap(), img);
        assert_eq!(encode_idx_labels(&y).unwrap(), lab);
        assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn idx_errors_carry_offsets() {
        let (mut img, lab) = idx_fixture(2);
        assert!(matches!(parse_idx_images(&[]), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(
            parse_idx_images(&img[..20]),
            Err(Error::Format { offset: 20, .. })
        ));
        assert!(matches!(
            parse_idx_images(&img[..10]),
            Err(Error::Format { offset: 10, .. })
        ));
        assert!(matches!(parse_idx_images(&lab), Err(Error::Format { offset: 0, .. })));
        img.push(0);
        assert!(matches!(
            parse_idx_images(&img),
            Err(Error::Format { offset: 28, .. })
        ));
    }

    #[test]
    fn idx_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = idx_fixture(3);
        let (_, lab) = idx_fixture(2);
        std::fs::write(dir.path().join("i"), img).unwrap();
        std::fs::write(dir.path().join("l"), lab).unwrap();
        assert!(matches!(
            load_idx(&dir.path().join("i"), &dir.path().join("l")),
            Err(Error::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn cifar_round_trip_and_errors() {
        let images = Tensor::from_fn(&[2, 3, 32, 32], |i| ((i * 7) % 256) as f64 / 255.0);
        let ds = LabeledDataset::new(images, vec![3, 9], 10, "t").unwrap();
        let bytes = encode_cifar10(&ds).unwrap();
        assert_eq!(bytes.len(), 2 * 3073);
        let (p, l) = parse_cifar10(&bytes, 0).unwrap();
        assert_eq!(l, [3, 9]);
        assert_eq!(p, ds.images.data());
        // red plane first: byte 1 of a record is the top-left red pixel
        assert_eq!(p[0], ds.images.data()[0]);

        assert!(matches!(
            parse_cifar10(&bytes[..3000], 0),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[3073] = 11;
        assert!(matches!(
            parse_cifar10(&bad, 0),
            Err(Error::Format { offset: 3073, .. })
        ));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bin");
        std::fs::write(&path, &bytes).unwrap();
        let loaded = load_cifar10_bin(&[path.clone(), path]).unwrap();
        assert_eq!(loaded.len(), 4);
        assert_eq!(loaded.sample_shape(), [3, 32, 32]);
    }

    #[test]
    fn normalization() {
        let images = Tensor::from_fn(&[4, 2, 3, 3], |i| (i as f64 * 0.61).sin().abs());
        let ds = LabeledDataset::new(images, vec![0; 4], 1, "t").unwrap();
        let identity = ChannelStats {
            mean: vec![0.0; 2],
            std: vec![1.0; 2],
        };
        assert_eq!(normalize(&ds, &identity).unwrap(), ds);

        let stats = channel_stats(&ds.images).unwrap();
        let n = normalize(&ds, &stats).unwrap();
        let after = channel_stats(&n.images).unwrap();
        for c in 0..2 {
            assert!(after.mean[c].abs() < 1e-12);
            assert!((after.std[c] - 1.0).abs() < 1e-12);
        }
        let back = denormalize(&n, &stats).unwrap();
        assert!(back.images.max_abs_diff(&ds.images).unwrap() < 1e-12);

        let constant = LabeledDataset::new(Tensor::full(&[2, 1, 2, 2], 0.4), vec![0, 0], 1, "c").unwrap();
        let shifted = normalize(
            &constant,
            &ChannelStats {
                mean: vec![0.4],
                std: vec![2.0],
            },
        )
        .unwrap();
        assert!(shifted.images.data().iter().all(|&v| v == 0.0));
        let zero = ChannelStats {
            mean: vec![0.0],
            std: vec![0.0],
        };
        assert!(matches!(normalize(&constant, &zero), Err(Error::Contract(_))));
    }

    #[test]
    fn augmentation() {
        let x = Tensor::from_fn(&[2, 1, 3, 4], |i| i as f64);
        let mut same = x.clone();
        Augment::new(1, 0, 0.0).unwrap().apply(&mut same, 0, &[0, 1]).unwrap();
        assert_eq!(same, x);

        let mut flipped = x.clone();
        Augment::new(1, 0, 1.0).unwrap().apply(&mut flipped, 0, &[0, 1]).unwrap();
        for row in 0..6 {
            let orig = &x.data()[row * 4..row * 4 + 4];
            let got = &flipped.data()[row * 4..row * 4 + 4];
            assert!(orig.iter().rev().eq(got.iter()));
        }

        let aug = Augment::new(9, 2, 0.5).unwrap();
        let run = |epoch| {
            let mut t = x.clone();
            aug.apply(&mut t, epoch, &[4, 7]).unwrap();
            t
        };
        assert_eq!(run(3), run(3));
        assert!(Augment::new(0, 0, 1.5).is_err());
    }

    #[test]
    fn first_k_subset_is_stable() {
        let (img, lab) = idx_fixture(6);
        let ds = LabeledDataset::new(parse_idx_images(&img).unwrap(), parse_idx_labels(&lab).unwrap(), 10, "t")
            .unwrap();
        let a = ds.first(4).unwrap();
        assert_eq!(a, ds.first(4).unwrap());
        assert_eq!(a.labels, [0, 1, 2, 3]);
        assert_eq!(ds.first(100).unwrap().len(), 6);
    }

    #[test]
    fn shipped_mnist_loads() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
        let splits = load_mnist(&root).unwrap();
        assert_eq!(splits.train.sample_shape(), [1, 28, 28]);
        assert_eq!((splits.train.len(), splits.test.len()), (60000, 10000));
        assert_eq!(splits.train.labels[..8], [5, 0, 4, 1, 9, 2, 1, 3]);
        assert!(splits.train.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
