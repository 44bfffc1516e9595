//! Datasets: IDX files, synthetic Gaussian blobs, splits and accuracy.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{DressError, Result};
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Pixel normalization applied after scaling bytes to `[0, 1]`.
pub const MNIST_MEAN: f32 = 0.1307;
pub const MNIST_STD: f32 = 0.3081;

/// Labelled samples stored flat, `[len, sample_len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Per-sample shape, e.g. `[1, 28, 28]`.
    pub sample_shape: Vec<usize>,
    /// `(mean, std)` already applied to `images`.
    pub normalization: (f32, f32),
}

impl Dataset {
    pub fn new(images: Vec<f32>, sample_shape: &[usize], labels: Vec<usize>, classes: usize) -> Result<Self> {
        let d: usize = sample_shape.iter().product();
        if d == 0 || images.len() != d * labels.len() {
            return Err(DressError::shape(format!(
                "{} values for {} samples of shape {:?}",
                images.len(),
                labels.len(),
                sample_shape
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DressError::shape(format!("label {} outside {} classes", bad, classes)));
        }
        Ok(Dataset {
            images: Tensor::from_vec(&[labels.len(), d], images)?,
            labels,
            classes,
            sample_shape: sample_shape.to_vec(),
            normalization: (0.0, 1.0),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.images.row_len()
    }

    /// Gathers `indices` into a batch of shape `[n] ++ input_shape`.
    pub fn batch(&self, indices: &[usize], input_shape: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        if input_shape.iter().product::<usize>() != self.sample_len() {
            return Err(DressError::shape(format!(
                "samples of {} values do not fit input shape {:?}",
                self.sample_len(),
                input_shape
            )));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(input_shape);
        let x = self.images.gather_rows(indices).reshape(&shape)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            sample_shape: self.sample_shape.clone(),
            normalization: self.normalization,
        })
    }

    /// Consecutive index batches over `order`.
    pub fn batches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
        order.chunks(batch_size.max(1))
    }

    /// SHA-256 over shape, labels and pixel bits, as a hex string.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for &d in self.images.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        for v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{:02x}", b)).collect()
    }
}

fn read_be_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => DressError::format("truncated IDX header"),
        _ => DressError::Io(e),
    })?;
    Ok(u32::from_be_bytes(b))
}

fn read_payload(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(n);
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(DressError::format(format!(
            "truncated IDX payload: {} of {} bytes",
            buf.len(),
            n
        )));
    }
    Ok(buf)
}

/// Reads an IDX image file (`0x00000803`): returns `(count, rows, cols, bytes)`.
pub fn read_idx_images(r: &mut impl Read) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_be_u32(r)?;
    if magic != IDX_IMAGES {
        return Err(DressError::format(format!("bad IDX image magic {:#010x}", magic)));
    }
    let n = read_be_u32(r)? as usize;
    let rows = read_be_u32(r)? as usize;
    let cols = read_be_u32(r)? as usize;
    let bytes = read_payload(r, n * rows * cols)?;
    Ok((n, rows, cols, bytes))
}

/// Reads an IDX label file (`0x00000801`).
pub fn read_idx_labels(r: &mut impl Read) -> Result<Vec<u8>> {
    let magic = read_be_u32(r)?;
    if magic != IDX_LABELS {
        return Err(DressError::format(format!("bad IDX label magic {:#010x}", magic)));
    }
    let n = read_be_u32(r)? as usize;
    read_payload(r, n)
}

pub fn write_idx_images(w: &mut impl Write, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let per = rows * cols;
    if per == 0 || pixels.len() % per != 0 {
        return Err(DressError::shape("pixel count is not a multiple of the image size"));
    }
    for v in [IDX_IMAGES, (pixels.len() / per) as u32, rows as u32, cols as u32] {
        w.write_all(&v.to_be_bytes())?;
    }
    w.write_all(pixels)?;
    Ok(())
}

pub fn write_idx_labels(w: &mut impl Write, labels: &[u8]) -> Result<()> {
    w.write_all(&IDX_LABELS.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    w.write_all(labels)?;
    Ok(())
}

/// Builds a dataset from IDX bytes: pixels scaled to `[0, 1]`, then
/// `(x - mean) / std`.
pub fn dataset_from_idx(
    images: &mut impl Read,
    labels: &mut impl Read,
    classes: usize,
    normalization: (f32, f32),
) -> Result<Dataset> {
    let (n, rows, cols, pixels) = read_idx_images(images)?;
    let labels = read_idx_labels(labels)?;
    if labels.len() != n {
        return Err(DressError::format(format!("{} labels for {} images", labels.len(), n)));
    }
    let (mean, std) = normalization;
    let values = pixels.iter().map(|&p| (p as f32 / 255.0 - mean) / std).collect();
    let mut ds = Dataset::new(values, &[1, rows, cols], labels.into_iter().map(usize::from).collect(), classes)?;
    ds.normalization = normalization;
    Ok(ds)
}

/// Loads an IDX image/label file pair with MNIST normalization.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, classes: usize) -> Result<Dataset> {
    let mut fi = std::io::BufReader::new(std::fs::File::open(images)?);
    let mut fl = std::io::BufReader::new(std::fs::File::open(labels)?);
    dataset_from_idx(&mut fi, &mut fl, classes, (MNIST_MEAN, MNIST_STD))
}

/// Distance scale of the class means.
pub const BLOB_SEPARATION: f64 = 5.0;

/// Gaussian class blobs: class means are fixed by `seed`, each sample is its
/// class mean plus isotropic noise of standard deviation `spread`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blobs {
    pub classes: usize,
    pub dim: usize,
    pub spread: f64,
    pub seed: u64,
}

impl Blobs {
    fn means(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let scale = BLOB_SEPARATION / (self.dim as f64).sqrt();
        (0..self.classes * self.dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect()
    }

    /// `n` samples from independent stream `stream`, classes balanced and shuffled.
    pub fn sample(&self, n: usize, stream: u64) -> Result<Dataset> {
        if self.classes < 2 || self.dim == 0 {
            return Err(DressError::config("synthetic data needs at least 2 classes and dim > 0"));
        }
        let means = self.means();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream + 1);
        let mut labels: Vec<usize> = (0..n).map(|i| i % self.classes).collect();
        labels.shuffle(&mut rng);
        let mut images = Vec::with_capacity(n * self.dim);
        for &c in &labels {
            let m = &means[c * self.dim..(c + 1) * self.dim];
            for &mu in m {
                let z: f64 = StandardNormal.sample(&mut rng);
                images.push((mu + self.spread * z) as f32);
            }
        }
        Dataset::new(images, &[self.dim], labels, self.classes)
    }
}

/// `n` samples of [`Blobs`] with unit spread, stream 0.
pub fn gen_synthetic(classes: usize, dim: usize, n: usize, seed: u64) -> Result<Dataset> {
    Blobs {
        classes,
        dim,
        spread: 1.0,
        seed,
    }
    .sample(n, 0)
}

/// Random disjoint split: the first part holds `round(fraction * len)` samples.
pub fn split_val(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DressError::config(format!("split fraction {} outside (0, 1)", fraction)));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (fraction * ds.len() as f64).round() as usize;
    Ok((ds.subset(&order[..cut])?, ds.subset(&order[cut..])?))
}

/// Fraction of rows whose argmax (ties to the lower class) equals the label.
pub fn accuracy(logits: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    if logits.rank() != 2 || logits.rows() != labels.len() {
        return Err(DressError::shape("logits and labels disagree"));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = logits
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Accuracy of `predict` over `ds` in batches of `batch_size`.
pub fn eval_accuracy(
    ds: &Dataset,
    classes: usize,
    input_shape: &[usize],
    batch_size: usize,
    mut predict: impl FnMut(&Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<f64> {
    if classes != ds.classes {
        return Err(DressError::shape(format!(
            "model has {} classes, data has {}",
            classes, ds.classes
        )));
    }
    let order: Vec<usize> = (0..ds.len()).collect();
    let mut hits = 0usize;
    for idx in Dataset::batches(&order, batch_size) {
        let (x, y) = ds.batch(idx, input_shape)?;
        let logits = predict(&x)?;
        if logits.row_len() != classes {
            return Err(DressError::shape("logit width differs from class count"));
        }
        hits += logits.argmax_rows().iter().zip(&y).filter(|(p, l)| p == l).count();
    }
    Ok(if ds.is_empty() { 0.0 } else { hits as f64 / ds.len() as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let pixels: Vec<u8> = (0..4 * 28 * 28).map(|i| (i % 256) as u8).collect();
        let mut img = Vec::new();
        write_idx_images(&mut img, 28, 28, &pixels).unwrap();
        let mut lab = Vec::new();
        write_idx_labels(&mut lab, &[3, 1, 4, 1]).unwrap();
        (img, lab)
    }

    #[test]
    fn idx_fixture_shape_and_values() {
        let (img, lab) = fixture();
        let ds = dataset_from_idx(&mut img.as_slice(), &mut lab.as_slice(), 10, (0.0, 1.0)).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.sample_shape, vec![1, 28, 28]);
        let (x, y) = ds.batch(&[0, 1, 2, 3], &[1, 28, 28]).unwrap();
        assert_eq!(x.shape(), &[4, 1, 28, 28]);
        assert_eq!(y, vec![3, 1, 4, 1]);
        assert_eq!(x.data()[255], 1.0);
        assert_eq!(x.data()[256], 0.0);
    }

    #[test]
    fn idx_rejects_bad_input() {
        let (img, lab) = fixture();
        let mut short_labels = Vec::new();
        write_idx_labels(&mut short_labels, &[1, 2, 3]).unwrap();
        assert!(dataset_from_idx(&mut img.as_slice(), &mut short_labels.as_slice(), 10, (0.0, 1.0)).is_err());
        assert!(dataset_from_idx(&mut lab.as_slice(), &mut img.as_slice(), 10, (0.0, 1.0)).is_err());
        assert!(dataset_from_idx(&mut &img[..img.len() - 1], &mut lab.as_slice(), 10, (0.0, 1.0)).is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = gen_synthetic(3, 5, 30, 7).unwrap();
        let b = gen_synthetic(3, 5, 30, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_synthetic(3, 5, 30, 8).unwrap());
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn streams_share_means() {
        let blobs = Blobs { classes: 2, dim: 4, spread: 0.0, seed: 3 };
        let a = blobs.sample(10, 0).unwrap();
        let b = blobs.sample(10, 1).unwrap();
        let row_of = |ds: &Dataset, class: usize| {
            let i = ds.labels.iter().position(|&l| l == class).unwrap();
            ds.images.row(i).to_vec()
        };
        assert_eq!(row_of(&a, 1), row_of(&b, 1));
    }

    #[test]
    fn split_sizes_and_union() {
        let ds = gen_synthetic(4, 2, 10_000, 1).unwrap();
        let (val, test) = split_val(&ds, 0.2, 5).unwrap();
        assert_eq!((val.len(), test.len()), (2000, 8000));
        let (val2, _) = split_val(&ds, 0.2, 5).unwrap();
        assert_eq!(val, val2);
        let mut all: Vec<usize> = val.labels.iter().chain(&test.labels).copied().collect();
        let mut orig = ds.labels.clone();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);
        assert!(split_val(&ds, 1.0, 0).is_err());
    }

    #[test]
    fn accuracy_extremes() {
        let logits = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(accuracy(&logits, &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&logits, &[1, 0]).unwrap(), 0.0);
        let tie = Tensor::from_vec(&[1, 2], vec![0.5, 0.5]).unwrap();
        assert_eq!(accuracy(&tie, &[0]).unwrap(), 1.0);
    }
}
