//! Datasets: a synthetic generator, MNIST IDX and CIFAR-10 binary parsers,
//! per-channel standardization, and seeded mini-batch iteration.

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR10_RECORD_BYTES: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, ...]`; the leading dimension indexes samples.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, class_count: usize, split: Split) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} samples but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Label {
                label,
                classes: class_count,
            });
        }
        Ok(Dataset {
            inputs,
            labels,
            class_count,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape, without the leading dimension.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Splits off the first `n` samples as a training set; the rest become
    /// the test set.
    pub fn split_at(self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::Parameter(format!(
                "split point {n} must leave both halves nonempty (N = {})",
                self.len()
            )));
        }
        let row = self.inputs.row_len();
        let mut shape = self.inputs.shape().to_vec();
        let total = shape[0];
        let mut data = self.inputs.into_data();
        let test_data = data.split_off(n * row);
        let mut labels = self.labels;
        let test_labels = labels.split_off(n);
        shape[0] = n;
        let train = Dataset::new(Tensor::new(&shape, data)?, labels, self.class_count, Split::Train)?;
        shape[0] = total - n;
        let test = Dataset::new(
            Tensor::new(&shape, test_data)?,
            test_labels,
            self.class_count,
            Split::Test,
        )?;
        Ok((train, test))
    }
}

/// Gaussian blobs around `classes` random centers.
///
/// Draw order: all centers (`classes × dim` standard normals), then per sample
/// `dim` normals, one uniform for the flip test, and one more uniform class
/// draw if the label is flipped. Sample `i` is generated from center
/// `i mod classes`, so every class is represented equally. A flipped label is
/// redrawn uniformly over all classes and may land on the original one.
pub fn synth_blobs(
    prng: &mut Prng,
    n: usize,
    dim: usize,
    classes: usize,
    cluster_std: f64,
    label_flip_prob: f64,
    split: Split,
) -> Result<Dataset> {
    if classes < 2 || n < classes || dim == 0 {
        return Err(Error::Parameter(format!(
            "blobs need dim >= 1, classes >= 2 and n >= classes (n={n}, dim={dim}, classes={classes})"
        )));
    }
    if cluster_std.is_nan() || cluster_std <= 0.0 {
        return Err(Error::Parameter(format!(
            "cluster_std must be positive, got {cluster_std}"
        )));
    }
    if !(0.0..1.0).contains(&label_flip_prob) {
        return Err(Error::Parameter(format!(
            "label_flip_prob must be in [0, 1), got {label_flip_prob}"
        )));
    }
    let centers = Tensor::randn(prng, &[classes, dim], 0.0, 1.0)?;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        for &c in centers.row(class) {
            data.push(c + cluster_std * prng.normal());
        }
        let label = if prng.next_f64() < label_flip_prob {
            prng.below(classes)
        } else {
            class
        };
        labels.push(label);
    }
    Dataset::new(Tensor::new(&[n, dim], data)?, labels, classes, split)
}

fn read_u32_be(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Length(format!("{what}: header truncated")))
}

/// Parses an MNIST-style IDX image/label file pair.
///
/// Images become `[N, 1, rows, cols]` scaled to `[0, 1]`.
pub fn load_idx(images: &[u8], labels: &[u8], split: Split) -> Result<Dataset> {
    let magic = read_u32_be(images, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let magic = read_u32_be(labels, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n = read_u32_be(images, 4, "images")? as usize;
    let rows = read_u32_be(images, 8, "images")? as usize;
    let cols = read_u32_be(images, 12, "images")? as usize;
    let n_labels = read_u32_be(labels, 4, "labels")? as usize;
    if n != n_labels {
        return Err(Error::Consistency(format!("{n} images but {n_labels} labels")));
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format(format!("degenerate image dims {n}x{rows}x{cols}")));
    }
    let pixels = &images[16..];
    let need = n * rows * cols;
    if pixels.len() != need {
        return Err(Error::Length(format!(
            "image payload has {} bytes, header implies {need}",
            pixels.len()
        )));
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() != n {
        return Err(Error::Length(format!(
            "label payload has {} bytes, header implies {n}",
            label_bytes.len()
        )));
    }
    let data = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| usize::from(b)).collect();
    let classes = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    Dataset::new(Tensor::new(&[n, 1, rows, cols], data)?, labels, classes, split)
}

/// Serializes `[N, 1, rows, cols]` inputs in `[0, 1]` to an IDX pair.
pub fn write_idx(data: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let s = data.inputs.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape(format!("IDX needs [N, 1, rows, cols], got {s:?}")));
    }
    let mut images = Vec::with_capacity(16 + data.inputs.len());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [s[0], s[2], s[3]] {
        images.extend_from_slice(&(d as u32).to_be_bytes());
    }
    images.extend(data.inputs.data().iter().map(|&v| to_byte(v)));
    let mut labels = Vec::with_capacity(8 + data.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(data.len() as u32).to_be_bytes());
    for &l in &data.labels {
        labels.push(u8::try_from(l).map_err(|_| Error::Format(format!("label {l} exceeds a byte")))?);
    }
    Ok((images, labels))
}

fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Parses CIFAR-10 binary records: one label byte followed by the R, G and B
/// planes of a 32×32 image. Output is `[N, 3, 32, 32]` scaled to `[0, 1]`.
pub fn load_cifar10_bin(bytes: &[u8], split: Split) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR10_RECORD_BYTES) {
        return Err(Error::Length(format!(
            "{} bytes is not a positive multiple of {CIFAR10_RECORD_BYTES}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR10_RECORD_BYTES;
    let mut data = Vec::with_capacity(n * (CIFAR10_RECORD_BYTES - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, record) in bytes.chunks_exact(CIFAR10_RECORD_BYTES).enumerate() {
        let label = record[0];
        if label > 9 {
            return Err(Error::Format(format!("record {i} has label byte {label}")));
        }
        labels.push(usize::from(label));
        data.extend(record[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Dataset::new(Tensor::new(&[n, 3, 32, 32], data)?, labels, 10, split)
}

/// Inverse of [`load_cifar10_bin`] for pixel values on the 1/255 grid.
pub fn write_cifar10_bin(data: &Dataset) -> Result<Vec<u8>> {
    if data.inputs.shape()[1..] != [3, 32, 32] {
        return Err(Error::shape(format!(
            "CIFAR-10 needs [N, 3, 32, 32], got {:?}",
            data.inputs.shape()
        )));
    }
    let mut out = Vec::with_capacity(data.len() * CIFAR10_RECORD_BYTES);
    for (i, &label) in data.labels.iter().enumerate() {
        if label > 9 {
            return Err(Error::Format(format!("label {label} does not fit CIFAR-10")));
        }
        out.push(label as u8);
        out.extend(data.inputs.row(i).iter().map(|&v| to_byte(v)));
    }
    Ok(out)
}

/// Per-channel statistics taken from a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-6;

/// Channel count and the number of contiguous values per channel per sample.
/// Channels are dimension 1; rank-2 inputs treat every feature as a channel.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(format!(
            "cannot standardize rank-1 inputs {shape:?}"
        )));
    }
    Ok((shape[1], shape[2..].iter().product()))
}

pub fn channel_stats(data: &Dataset) -> Result<ChannelStats> {
    let (channels, plane) = channel_layout(data.inputs.shape())?;
    let x = data.inputs.data();
    let per_sample = channels * plane;
    let count = (data.len() * plane) as f64;
    let values = |c: usize| {
        (0..data.len()).flat_map(move |i| {
            let base = i * per_sample + c * plane;
            x[base..base + plane].iter().copied()
        })
    };
    let mut mean = Vec::with_capacity(channels);
    let mut std = Vec::with_capacity(channels);
    for c in 0..channels {
        let (lo, hi) = values(c).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| {
            (l.min(v), h.max(v))
        });
        let m = if lo == hi {
            lo
        } else {
            values(c).sum::<f64>() / count
        };
        let var = values(c).map(|v| (v - m) * (v - m)).sum::<f64>() / count;
        mean.push(m);
        std.push(var.sqrt().max(STD_FLOOR));
    }
    Ok(ChannelStats { mean, std })
}

pub fn apply_stats(data: &mut Dataset, stats: &ChannelStats) -> Result<()> {
    let (channels, plane) = channel_layout(data.inputs.shape())?;
    if channels != stats.mean.len() {
        return Err(Error::shape(format!(
            "{channels} channels but statistics for {}",
            stats.mean.len()
        )));
    }
    for sample in data.inputs.data_mut().chunks_exact_mut(channels * plane) {
        for (c, chan) in sample.chunks_exact_mut(plane).enumerate() {
            for v in chan {
                *v = (*v - stats.mean[c]) / stats.std[c];
            }
        }
    }
    Ok(())
}

/// Standardizes both splits with statistics from `train` only.
pub fn standardize(mut train: Dataset, mut test: Dataset) -> Result<(Dataset, Dataset, ChannelStats)> {
    if train.sample_shape() != test.sample_shape() {
        return Err(Error::shape(format!(
            "train samples {:?} vs test samples {:?}",
            train.sample_shape(),
            test.sample_shape()
        )));
    }
    let stats = channel_stats(&train)?;
    apply_stats(&mut train, &stats)?;
    apply_stats(&mut test, &stats)?;
    Ok((train, test, stats))
}

/// Sample order for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub epoch: usize,
    pub batch_size: usize,
    pub permutation: Vec<usize>,
}

impl BatchPlan {
    /// Fisher–Yates permutation seeded from `(run_seed, epoch)` alone.
    pub fn new(n: usize, batch_size: usize, run_seed: u64, epoch: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Parameter("batch size must be at least 1".into()));
        }
        let mut permutation: Vec<usize> = (0..n).collect();
        Prng::derive(run_seed, epoch as u64).shuffle(&mut permutation);
        Ok(BatchPlan {
            epoch,
            batch_size,
            permutation,
        })
    }

    /// Consecutive slices of the permutation; the last may be short.
    pub fn batches(&self) -> std::slice::Chunks<'_, usize> {
        self.permutation.chunks(self.batch_size)
    }
}

/// Ordered index slices for one epoch.
pub fn batches(data: &Dataset, batch_size: usize, run_seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    let plan = BatchPlan::new(data.len(), batch_size, run_seed, epoch)?;
    Ok(plan.batches().map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_fixture(n_header: u32, images: usize, label: u8) -> (Vec<u8>, Vec<u8>) {
        let mut img = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for d in [n_header, 28, 28] {
            img.extend_from_slice(&d.to_be_bytes());
        }
        img.extend(std::iter::repeat_n(0u8, images * 784));
        let mut lab = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        lab.extend_from_slice(&n_header.to_be_bytes());
        lab.extend(std::iter::repeat_n(label, n_header as usize));
        (img, lab)
    }

    #[test]
    fn idx_minimal_fixture() {
        let (img, lab) = idx_fixture(1, 1, 7);
        let d = load_idx(&img, &lab, Split::Train).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.labels, vec![7]);
        assert_eq!(d.inputs.shape(), &[1, 1, 28, 28]);
        assert!(d.inputs.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn idx_errors() {
        let (mut img, lab) = idx_fixture(1, 1, 7);
        img[3] = 0x04;
        assert!(matches!(
            load_idx(&img, &lab, Split::Train),
            Err(Error::Format(_))
        ));
        let (img, mut lab) = idx_fixture(1, 1, 7);
        lab[3] = 0x03;
        assert!(matches!(
            load_idx(&img, &lab, Split::Train),
            Err(Error::Format(_))
        ));

        let (img, lab) = idx_fixture(2, 1, 7);
        assert!(matches!(
            load_idx(&img, &lab, Split::Train),
            Err(Error::Length(_))
        ));

        let (img, _) = idx_fixture(1, 1, 7);
        let (_, lab2) = idx_fixture(2, 2, 7);
        assert!(matches!(
            load_idx(&img, &lab2, Split::Train),
            Err(Error::Consistency(_))
        ));

        assert!(matches!(
            load_idx(&[0, 0], &lab2, Split::Train),
            Err(Error::Length(_))
        ));
    }

    #[test]
    fn cifar_lengths_and_labels() {
        let mut bytes = vec![0u8; 10 * CIFAR10_RECORD_BYTES];
        for i in 0..10 {
            bytes[i * CIFAR10_RECORD_BYTES] = i as u8;
            bytes[i * CIFAR10_RECORD_BYTES + 1] = 255;
        }
        assert_eq!(bytes.len(), 30730);
        let d = load_cifar10_bin(&bytes, Split::Test).unwrap();
        assert_eq!(d.len(), 10);
        assert_eq!(d.inputs.shape(), &[10, 3, 32, 32]);
        assert_eq!(d.labels, (0..10).collect::<Vec<_>>());
        assert_eq!(d.inputs.row(3)[0], 1.0);

        assert!(matches!(
            load_cifar10_bin(&[0u8; 3072], Split::Test),
            Err(Error::Length(_))
        ));
        assert!(matches!(
            load_cifar10_bin(&[], Split::Test),
            Err(Error::Length(_))
        ));
        bytes[CIFAR10_RECORD_BYTES] = 11;
        assert!(matches!(
            load_cifar10_bin(&bytes, Split::Test),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn cifar_round_trip() {
        let mut r = Prng::new(3);
        let pixels: Vec<f64> = (0..4 * 3072).map(|_| r.below(256) as f64 / 255.0).collect();
        let d = Dataset::new(
            Tensor::new(&[4, 3, 32, 32], pixels).unwrap(),
            vec![9, 0, 4, 4],
            10,
            Split::Train,
        )
        .unwrap();
        let bytes = write_cifar10_bin(&d).unwrap();
        assert_eq!(load_cifar10_bin(&bytes, Split::Train).unwrap(), d);
    }

    #[test]
    fn blobs_are_deterministic_and_validated() {
        let a = synth_blobs(&mut Prng::new(1), 100, 4, 5, 0.5, 0.1, Split::Train).unwrap();
        let b = synth_blobs(&mut Prng::new(1), 100, 4, 5, 0.5, 0.1, Split::Train).unwrap();
        assert_eq!(a, b);
        assert!(synth_blobs(&mut Prng::new(1), 3, 4, 5, 0.5, 0.0, Split::Train).is_err());
        assert!(synth_blobs(&mut Prng::new(1), 10, 4, 5, 0.0, 0.0, Split::Train).is_err());
        assert!(synth_blobs(&mut Prng::new(1), 10, 4, 5, 0.5, 1.0, Split::Train).is_err());
    }

    #[test]
    fn blobs_flip_rate() {
        let n = 20000;
        let d = synth_blobs(&mut Prng::new(2), n, 2, 10, 0.5, 0.1, Split::Train).unwrap();
        let differ = d.labels.iter().enumerate().filter(|(i, &l)| l != i % 10).count();
        let rate = differ as f64 / n as f64;
        // Expected 0.1 * 9/10; binomial sd ≈ 0.002.
        assert!((rate - 0.09).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn blobs_tight_clusters_are_separable() {
        let mut prng = Prng::new(7);
        let d = synth_blobs(&mut prng, 500, 8, 5, 1e-6, 0.0, Split::Train).unwrap();
        let centers: Vec<&[f64]> = (0..5).map(|c| d.inputs.row(c)).collect();
        for i in 0..d.len() {
            let x = d.inputs.row(i);
            let nearest = (0..5)
                .min_by(|&a, &b| {
                    let da: f64 = x.iter().zip(centers[a]).map(|(p, q)| (p - q).powi(2)).sum();
                    let db: f64 = x.iter().zip(centers[b]).map(|(p, q)| (p - q).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(nearest, d.labels[i]);
        }
    }

    #[test]
    fn standardize_uses_train_stats() {
        let mut r = Prng::new(5);
        let train = Dataset::new(
            Tensor::randn(&mut r, &[50, 3, 2, 2], 4.0, 3.0).unwrap(),
            vec![0; 50],
            2,
            Split::Train,
        )
        .unwrap();
        let test = Dataset::new(
            Tensor::randn(&mut r, &[20, 3, 2, 2], -1.0, 0.5).unwrap(),
            vec![1; 20],
            2,
            Split::Test,
        )
        .unwrap();
        let expected = channel_stats(&train).unwrap();
        let (tr, te, stats) = standardize(train, test.clone()).unwrap();
        assert_eq!(stats, expected);
        assert_ne!(stats, channel_stats(&test).unwrap());

        let post = channel_stats(&tr).unwrap();
        for c in 0..3 {
            assert!(post.mean[c].abs() < 1e-10);
            assert!((post.std[c] - 1.0).abs() < 1e-6);
        }
        // Test set transformed with the train statistics.
        let v = te.inputs.data()[0];
        assert_eq!(v, (test.inputs.data()[0] - stats.mean[0]) / stats.std[0]);

        // Re-standardizing is a near no-op.
        let again_stats = channel_stats(&tr).unwrap();
        let mut again = tr.clone();
        apply_stats(&mut again, &again_stats).unwrap();
        for (a, b) in again.inputs.data().iter().zip(tr.inputs.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let mut data = vec![0.3; 40];
        for (i, v) in data.iter_mut().enumerate().filter(|(i, _)| i % 2 == 1) {
            *v = i as f64;
        }
        let train = Dataset::new(Tensor::new(&[20, 2], data).unwrap(), vec![0; 20], 2, Split::Train).unwrap();
        let stats = channel_stats(&train).unwrap();
        assert_eq!(stats.std[0], STD_FLOOR);
        let (tr, _, _) = standardize(train.clone(), train).unwrap();
        assert!(tr.inputs.data().iter().step_by(2).all(|&v| v == 0.0));
    }

    #[test]
    fn batches_partition_and_reseed() {
        let d = synth_blobs(&mut Prng::new(1), 5, 2, 2, 1.0, 0.0, Split::Train).unwrap();
        let b = batches(&d, 2, 9, 1).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);

        let big = synth_blobs(&mut Prng::new(1), 50, 2, 2, 1.0, 0.0, Split::Train).unwrap();
        let e1 = batches(&big, 8, 9, 1).unwrap();
        assert_eq!(e1, batches(&big, 8, 9, 1).unwrap());
        assert_ne!(e1, batches(&big, 8, 9, 2).unwrap());
        assert_ne!(e1, batches(&big, 8, 10, 1).unwrap());
        assert!(batches(&big, 0, 9, 1).is_err());
    }

    #[test]
    fn split_at_keeps_order() {
        let d = synth_blobs(&mut Prng::new(1), 12, 3, 4, 1.0, 0.0, Split::Train).unwrap();
        let (tr, te) = d.clone().split_at(8).unwrap();
        assert_eq!(tr.len(), 8);
        assert_eq!(te.len(), 4);
        assert_eq!(te.inputs.row(0), d.inputs.row(8));
        assert_eq!(te.split, Split::Test);
        assert!(d.split_at(12).is_err());
    }
}
