//! Datasets: IDX image/label files and synthetic 2D point sets rendered as
//! two-channel coordinate images.
//!
//! A synthetic point `(p_x, p_y)` becomes an image of size `S×S` with
//! channel 0 = `p_x − u_j` and channel 1 = `p_y − v_i`, where `u_j` and `v_i`
//! run over `linspace(−1, 1, S)` along columns and rows.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled images stored as one `N×C×H×W` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::Dimension(format!(
                "dataset images must be N×C×H×W, got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Index(format!("label {bad} with {num_classes} classes")));
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

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `(C, H, W)` of one sample.
    pub fn sample_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Gathers the given samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let (c, h, w) = self.sample_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index(format!("sample {i} of {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(&[indices.len(), c, h, w], data)?, labels))
    }

    /// First `min(n, len)` samples.
    pub fn head(&self, n: usize) -> Result<(Tensor, Vec<usize>)> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.batch(&idx)
    }

    /// Deterministic `(train, held_out)` split; at least one sample on each side.
    pub fn split(&self, held_out_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if self.len() < 2 {
            return Err(Error::Contract("cannot split fewer than 2 samples".into()));
        }
        if !(0.0..1.0).contains(&held_out_fraction) {
            return Err(Error::Config(format!(
                "held-out fraction must lie in [0, 1), got {held_out_fraction}"
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = ((self.len() as f64 * held_out_fraction).round() as usize).clamp(1, self.len() - 1);
        let (val, train) = idx.split_at(n_val);
        let mut train = train.to_vec();
        let mut val = val.to_vec();
        train.sort_unstable();
        val.sort_unstable();
        let build = |ix: &[usize]| -> Result<Dataset> {
            let (x, y) = self.batch(ix)?;
            Dataset::new(x, y, self.num_classes)
        };
        Ok((build(&train)?, build(&val)?))
    }
}

fn read_u32(bytes: &[u8], at: usize, section: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated { section })
}

fn check_magic(bytes: &[u8], expected: u32, file: &'static str, header: &'static str) -> Result<()> {
    let magic = read_u32(bytes, 0, header)?;
    if magic != expected {
        return Err(Error::BadMagic {
            file,
            found: magic.to_be_bytes().to_vec(),
        });
    }
    Ok(())
}

/// Parses an IDX image file: returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    check_magic(bytes, IDX_IMAGES_MAGIC, "idx images", "idx images header")?;
    let n = read_u32(bytes, 4, "idx images header")? as usize;
    let rows = read_u32(bytes, 8, "idx images header")? as usize;
    let cols = read_u32(bytes, 12, "idx images header")? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format(format!("idx images: empty dimensions {n}×{rows}×{cols}")));
    }
    let need = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Format("idx images: dimensions overflow".into()))?;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Truncated {
            section: "idx images body",
        });
    }
    Ok((n, rows, cols, &body[..need]))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    check_magic(bytes, IDX_LABELS_MAGIC, "idx labels", "idx labels header")?;
    let n = read_u32(bytes, 4, "idx labels header")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Truncated {
            section: "idx labels body",
        });
    }
    Ok(&body[..n])
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a dataset from raw IDX bytes: pixels scaled to `[0, 1]`, then
/// standardized to zero mean and unit standard deviation over the whole set.
pub fn idx_dataset(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != n {
        return Err(Error::Consistency(format!("{n} images but {} labels", labels.len())));
    }
    let scaled: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let mean = scaled.iter().sum::<f64>() / scaled.len() as f64;
    let std = (scaled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / scaled.len() as f64).sqrt();
    let denom = if std > 0.0 { std } else { 1.0 };
    let data = scaled.iter().map(|v| (v - mean) / denom).collect();
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(Tensor::new(&[n, 1, rows, cols], data)?, labels, num_classes)
}

/// Reads an IDX image file and its label file.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    idx_dataset(&images, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// Gaussian blobs around `classes` centers on the unit circle.
    Blobs,
    /// Two interleaved half circles.
    Moons,
}

/// Raw synthetic points `(x, y, label)`, `n` per class.
pub fn synth_points(kind: SynthKind, n: usize, classes: usize, noise: f64, seed: u64) -> Result<Vec<(f64, f64, usize)>> {
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 samples per class, got {n}")));
    }
    let classes = match kind {
        SynthKind::Moons => 2,
        SynthKind::Blobs if classes < 2 => {
            return Err(Error::Config(format!("blobs need ≥ 2 classes, got {classes}")))
        }
        SynthKind::Blobs => classes,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::with_capacity(n * classes);
    for c in 0..classes {
        for i in 0..n {
            let (x, y) = match kind {
                SynthKind::Blobs => {
                    let a = 2.0 * PI * c as f64 / classes as f64;
                    (a.cos(), a.sin())
                }
                SynthKind::Moons => {
                    let t = PI * i as f64 / (n - 1) as f64;
                    if c == 0 {
                        (t.cos() - 0.5, t.sin() - 0.25)
                    } else {
                        (0.5 - t.cos(), 0.25 - t.sin())
                    }
                }
            };
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            pts.push((x + noise * nx, y + noise * ny, c));
        }
    }
    Ok(pts)
}

/// Synthetic dataset rendered as `2×size×size` coordinate images.
pub fn synth_dataset(kind: SynthKind, n: usize, classes: usize, noise: f64, size: usize, seed: u64) -> Result<Dataset> {
    if size == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    let pts = synth_points(kind, n, classes, noise, seed)?;
    let grid: Vec<f64> = if size == 1 {
        vec![0.0]
    } else {
        (0..size).map(|i| -1.0 + 2.0 * i as f64 / (size - 1) as f64).collect()
    };
    let mut data = Vec::with_capacity(pts.len() * 2 * size * size);
    for &(px, py, _) in &pts {
        for _row in 0..size {
            data.extend(grid.iter().map(|u| px - u));
        }
        for v in &grid {
            data.extend(std::iter::repeat(py - v).take(size));
        }
    }
    let num_classes = pts.iter().map(|p| p.2).max().unwrap_or(0) + 1;
    let labels = pts.iter().map(|p| p.2).collect();
    Dataset::new(Tensor::new(&[pts.len(), 2, size, size], data)?, labels, num_classes)
}

/// Epoch-wise shuffled mini-batch order.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchCursor {
    pub order: Vec<usize>,
    pub position: usize,
}

impl BatchCursor {
    pub fn new(len: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        Self { order, position: 0 }
    }

    /// Next `batch` indices; reshuffles with `rng` whenever the epoch runs out.
    /// A batch never straddles two epochs.
    pub fn next_batch(&mut self, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let batch = batch.min(self.order.len());
        if self.position + batch > self.order.len() {
            self.order.shuffle(rng);
            self.position = 0;
        }
        let out = self.order[self.position..self.position + batch].to_vec();
        self.position += batch;
        out
    }
}
