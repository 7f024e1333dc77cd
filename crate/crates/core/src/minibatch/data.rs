//! Classification datasets: synthetic Gaussian blobs or an IDX (MNIST-format) subset.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeds::rng_from_seed;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    GaussianBlobs { seed: u64, separation: f64 },
    Idx { images: String, labels: String, seed: u64 },
    Explicit,
}

/// `M` labelled samples with inputs stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    inputs: Vec<T>,
    labels: Vec<usize>,
    input_dim: usize,
    classes: usize,
    source: DataSource,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(rows: Vec<Vec<T>>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if rows.is_empty() || rows.len() != labels.len() {
            return Err(Error::Argument(format!("need M >= 1 rows with one label each ({} rows, {} labels)", rows.len(), labels.len())));
        }
        let input_dim = rows[0].len();
        if input_dim == 0 || rows.iter().any(|r| r.len() != input_dim) {
            return Err(Error::Argument("all inputs must share one positive width".into()));
        }
        let inputs: Vec<T> = rows.into_iter().flatten().collect();
        Self::from_parts(inputs, labels, input_dim, classes, DataSource::Explicit)
    }

    fn from_parts(inputs: Vec<T>, labels: Vec<usize>, input_dim: usize, classes: usize, source: DataSource) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Argument(format!("label {bad} outside [0, {classes})")));
        }
        if inputs.iter().any(|x| !x.is_finite()) {
            return Err(Error::Argument("inputs must be finite".into()));
        }
        Ok(Self { inputs, labels, input_dim, classes, source })
    }

    /// `m` points, labels cycling through the classes, each drawn from a unit
    /// Gaussian around a class centre. Centres are standard normal draws scaled
    /// by `separation`.
    pub fn gaussian_blobs(m: usize, input_dim: usize, classes: usize, separation: f64, seed: u64) -> Result<Self> {
        if m == 0 || input_dim == 0 || classes < 2 {
            return Err(Error::Argument("blobs need m >= 1, input_dim >= 1 and at least 2 classes".into()));
        }
        let mut rng = rng_from_seed(seed);
        let sep = T::lit(separation);
        let centres: Vec<Vec<T>> =
            (0..classes).map(|_| (0..input_dim).map(|_| sep * T::standard_normal(&mut rng)).collect()).collect();
        let labels: Vec<usize> = (0..m).map(|k| k % classes).collect();
        let inputs = labels
            .iter()
            .flat_map(|&y| centres[y].iter().map(|&c| c + T::standard_normal(&mut rng)).collect::<Vec<_>>())
            .collect();
        Self::from_parts(inputs, labels, input_dim, classes, DataSource::GaussianBlobs { seed, separation })
    }

    /// A seeded random subset of `count` samples from IDX image and label files,
    /// pixels scaled to `[0, 1]`, ten classes.
    pub fn from_idx(images: &Path, labels: &Path, count: usize, seed: u64) -> Result<Self> {
        let (n, rows, cols, pixels) = read_idx_images(images)?;
        let ys = read_idx_labels(labels)?;
        if ys.len() != n {
            return Err(Error::Argument(format!("{n} images but {} labels", ys.len())));
        }
        if count == 0 || count > n {
            return Err(Error::Argument(format!("subset size {count} must lie in [1, {n}]")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from_seed(seed));
        order.truncate(count);
        let width = rows * cols;
        let scale = T::lit(1.0 / 255.0);
        let inputs = order
            .iter()
            .flat_map(|&k| pixels[k * width..(k + 1) * width].iter().map(|&p| T::from_usize_lossy(p as usize) * scale).collect::<Vec<_>>())
            .collect();
        let source = DataSource::Idx { images: images.display().to_string(), labels: labels.display().to_string(), seed };
        let ys = order.iter().map(|&k| ys[k] as usize).collect();
        Self::from_parts(inputs, ys, width, 10, source)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn source(&self) -> &DataSource {
        &self.source
    }

    pub fn input(&self, k: usize) -> &[T] {
        &self.inputs[k * self.input_dim..(k + 1) * self.input_dim]
    }

    pub fn label(&self, k: usize) -> usize {
        self.labels[k]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Argument("truncated IDX header".into()))
}

/// `(count, rows, cols, pixels)` from an IDX3 unsigned-byte file.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let magic = be_u32(&bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Argument(format!("{}: bad IDX image magic {magic:#010x}", path.display())));
    }
    let (n, rows, cols) = (be_u32(&bytes, 4)? as usize, be_u32(&bytes, 8)? as usize, be_u32(&bytes, 12)? as usize);
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Argument(format!("{}: expected {} pixel bytes, found {}", path.display(), n * rows * cols, body.len())));
    }
    Ok((n, rows, cols, body.to_vec()))
}

/// Labels from an IDX1 unsigned-byte file.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    let magic = be_u32(&bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Argument(format!("{}: bad IDX label magic {magic:#010x}", path.display())));
    }
    let n = be_u32(&bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Argument(format!("{}: expected {n} labels, found {}", path.display(), body.len())));
    }
    Ok(body.to_vec())
}
