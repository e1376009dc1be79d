//! Training diagnostics for binary networks: channel-wise absolute mean (CAM)
//! and its spread (SDAM), flip-flop (FF) and correlation-to-initialization
//! (C2I) ratios, activation saturation, update statistics, weight histograms.
//!
//! Sign conventions match the forward pass: `sign(0) = +1`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn is_neg(v: f64) -> bool {
    v < 0.0
}

/// Mean of `|w|` per output channel (leading axis).
pub fn cam(w: &Tensor) -> Vec<f64> {
    let (rows, per) = w.rows();
    (0..rows)
        .map(|r| {
            w.data()[r * per..(r + 1) * per]
                .iter()
                .map(|v| v.abs())
                .sum::<f64>()
                / per as f64
        })
        .collect()
}

/// Population standard deviation of a CAM vector.
pub fn sdam(cam_values: &[f64]) -> Result<f64> {
    if cam_values.is_empty() {
        return Err(Error::Contract("SDAM of an empty CAM vector".into()));
    }
    let n = cam_values.len() as f64;
    let mean = cam_values.iter().sum::<f64>() / n;
    let var = cam_values.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt())
}

fn check_pairs(a: &[&Tensor], b: &[&Tensor], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "{what}: {} layers vs {} layers",
            a.len(),
            b.len()
        )));
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x.shape() != y.shape() {
            return Err(Error::Dimension(format!(
                "{what}: layer {i} shapes {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
    }
    Ok(())
}

/// Number of weights whose sign differs between two tensors of equal shape.
pub fn sign_changes(before: &Tensor, after: &Tensor) -> Result<usize> {
    check_pairs(&[before], &[after], "sign_changes")?;
    Ok(before
        .data()
        .iter()
        .zip(after.data())
        .filter(|(a, b)| is_neg(**a) != is_neg(**b))
        .count())
}

/// Per-layer sign-flip counts and layer sizes.
pub fn flip_counts(before: &[&Tensor], after: &[&Tensor]) -> Result<Vec<(usize, usize)>> {
    check_pairs(before, after, "ff_ratio")?;
    before
        .iter()
        .zip(after)
        .map(|(b, a)| Ok((sign_changes(b, a)?, b.numel())))
        .collect()
}

/// Fraction of weights, over all measured layers, whose sign changed.
pub fn ff_ratio(before: &[&Tensor], after: &[&Tensor]) -> Result<f64> {
    let counts = flip_counts(before, after)?;
    let flips: usize = counts.iter().map(|c| c.0).sum();
    let total: usize = counts.iter().map(|c| c.1).sum();
    if total == 0 {
        return Err(Error::Contract("FF ratio over zero weights".into()));
    }
    Ok(flips as f64 / total as f64)
}

/// Signs of the measured layers captured at the start of a training phase.
#[derive(Debug, Clone, PartialEq)]
pub struct InitSnapshot {
    shapes: Vec<Vec<usize>>,
    signs: Vec<Vec<i8>>,
}

impl InitSnapshot {
    pub fn capture(layers: &[&Tensor]) -> Self {
        Self {
            shapes: layers.iter().map(|t| t.shape().to_vec()).collect(),
            signs: layers
                .iter()
                .map(|t| {
                    t.data()
                        .iter()
                        .map(|&v| if is_neg(v) { -1 } else { 1 })
                        .collect()
                })
                .collect(),
        }
    }

    pub fn from_parts(shapes: Vec<Vec<usize>>, signs: Vec<Vec<i8>>) -> Result<Self> {
        if shapes.len() != signs.len() {
            return Err(Error::Consistency("snapshot shape/sign count differs".into()));
        }
        for (s, v) in shapes.iter().zip(&signs) {
            if s.iter().product::<usize>() != v.len() || v.iter().any(|&x| x != 1 && x != -1) {
                return Err(Error::Consistency(format!(
                    "snapshot layer {s:?} has {} entries or non-±1 values",
                    v.len()
                )));
            }
        }
        Ok(Self { shapes, signs })
    }

    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn signs(&self) -> &[Vec<i8>] {
        &self.signs
    }

    pub fn numel(&self) -> usize {
        self.signs.iter().map(Vec::len).sum()
    }

    /// Number of weights whose current sign differs from the snapshot.
    pub fn disagreements(&self, current: &[&Tensor]) -> Result<usize> {
        if current.len() != self.signs.len() {
            return Err(Error::Dimension(format!(
                "snapshot has {} layers, got {}",
                self.signs.len(),
                current.len()
            )));
        }
        let mut n = 0;
        for (i, (shape, (signs, t))) in self.shapes.iter().zip(self.signs.iter().zip(current)).enumerate() {
            if shape.as_slice() != t.shape() {
                return Err(Error::Dimension(format!(
                    "snapshot layer {i} is {shape:?}, live tensor {:?}",
                    t.shape()
                )));
            }
            n += signs
                .iter()
                .zip(t.data())
                .filter(|(&s, &v)| (s < 0) != is_neg(v))
                .count();
        }
        Ok(n)
    }
}

/// Fraction of weights whose final sign equals the initial sign.
pub fn c2i_ratio(snapshot: &InitSnapshot, w_final: &[&Tensor]) -> Result<f64> {
    let d = snapshot.disagreements(w_final)?;
    Ok(1.0 - d as f64 / snapshot.numel() as f64)
}

/// The C2I formula read literally: `1 − ½·(flipped / N_total)`.
pub fn c2i_literal(snapshot: &InitSnapshot, w_final: &[&Tensor]) -> Result<f64> {
    let d = snapshot.disagreements(w_final)?;
    Ok(1.0 - 0.5 * d as f64 / snapshot.numel() as f64)
}

/// Fraction of entries with `|a| > 1` (exactly ±1 is not saturated).
pub fn saturation_ratio(a_r: &Tensor) -> f64 {
    let n = a_r.numel();
    a_r.data().iter().filter(|v| v.abs() > 1.0).count() as f64 / n as f64
}

/// `after − before` for each layer.
pub fn weight_deltas(before: &[&Tensor], after: &[&Tensor]) -> Result<Vec<Tensor>> {
    check_pairs(before, after, "weight_deltas")?;
    before
        .iter()
        .zip(after)
        .map(|(b, a)| {
            let d = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
            Tensor::new(b.shape(), d)
        })
        .collect()
}

/// CAM of the update values of each layer.
pub fn update_cam(delta_w: &[Tensor]) -> Vec<Vec<f64>> {
    delta_w.iter().map(cam).collect()
}

pub const HIST_BINS: usize = 80;
pub const HIST_RANGE: (f64, f64) = (-2.0, 2.0);

/// Fixed-range histogram with out-of-range values clamped into the edge bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(hi > lo) {
            return Err(Error::Contract(format!(
                "histogram needs bins > 0 and hi > lo, got {bins} over [{lo}, {hi}]"
            )));
        }
        Ok(Self {
            lo,
            hi,
            counts: vec![0; bins],
        })
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    /// Bin `b` with `edge(b) ≤ v < edge(b + 1)`, clamped to the end bins.
    pub fn bin_of(&self, v: f64) -> usize {
        let last = self.counts.len() - 1;
        let b = ((v - self.lo) / self.bin_width()).floor();
        let mut b = if b.is_nan() || b < 0.0 { 0 } else { (b as usize).min(last) };
        // The division can land one bin off right at an edge.
        while b < last && v >= self.edge(b + 1) {
            b += 1;
        }
        while b > 0 && v < self.edge(b) {
            b -= 1;
        }
        b
    }

    pub fn add(&mut self, v: f64) {
        let b = self.bin_of(v);
        self.counts[b] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Lower edge of bin `b`.
    pub fn edge(&self, b: usize) -> f64 {
        self.lo + b as f64 * self.bin_width()
    }

    /// Counts in bins lying entirely outside `[-threshold, threshold]`.
    pub fn tail_mass(&self, threshold: f64) -> u64 {
        let w = self.bin_width();
        self.counts
            .iter()
            .enumerate()
            .filter(|(b, _)| {
                let lo = self.edge(*b);
                let hi = lo + w;
                lo >= threshold - 1e-12 || hi <= -threshold + 1e-12
            })
            .map(|(_, c)| c)
            .sum()
    }
}

/// 80-bin histogram of latent weights over `[-2, 2]`.
pub fn weight_histogram(w: &[&Tensor]) -> Histogram {
    let mut h = Histogram::new(HIST_RANGE.0, HIST_RANGE.1, HIST_BINS).expect("fixed range");
    for t in w {
        for &v in t.data() {
            h.add(v);
        }
    }
    h
}

/// Linear-interpolated quantile of unsorted data; `None` when empty.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Running FF statistics over a training phase.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FlipTracker {
    pub flips: u64,
    pub steps: u64,
    pub weights: u64,
}

impl FlipTracker {
    pub fn record(&mut self, flips: usize, weights: usize) {
        self.flips += flips as u64;
        self.steps += 1;
        self.weights = weights as u64;
    }

    /// FF ratio averaged over every recorded iteration.
    pub fn mean(&self) -> f64 {
        if self.steps == 0 || self.weights == 0 {
            0.0
        } else {
            self.flips as f64 / (self.steps * self.weights) as f64
        }
    }
}

/// One logged row of diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub phase: String,
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub ff_ratio: f64,
    pub ff_ratio_mean: f64,
    pub c2i_ratio: f64,
    pub c2i_literal: f64,
    /// One CAM vector per measured layer.
    pub cam: Vec<Vec<f64>>,
    /// One SDAM per measured layer.
    pub sdam: Vec<f64>,
    /// One saturation ratio per activation site.
    pub saturation: Vec<f64>,
    /// Update-value CAM per measured layer, for the latest step.
    pub update_cam: Vec<Vec<f64>>,
}

impl MetricsRecord {
    /// CSV header for `layers` measured layers and `sites` activation sites.
    pub fn csv_header(sites: usize) -> String {
        let mut h = String::from(
            "phase,iteration,lr,loss,train_acc,val_acc,ff_ratio,ff_ratio_mean,c2i_ratio,c2i_literal,\
             cam_mean,cam_min,cam_first_min,sdam_mean,sdam_first",
        );
        for s in 0..sites {
            let _ = write!(h, ",sat_{s}");
        }
        h.push_str(",ucam_min,ucam_q25,ucam_median,ucam_q75,ucam_max");
        h
    }

    pub fn csv_row(&self) -> String {
        let all_cam: Vec<f64> = self.cam.iter().flatten().copied().collect();
        let mean = |v: &[f64]| {
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let min = |v: &[f64]| v.iter().copied().fold(f64::NAN, f64::min);
        let cam_first_min = self.cam.first().map(|c| min(c)).unwrap_or(f64::NAN);
        let mut row = format!(
            "{},{},{:.6e},{:.9e},{:.6},{:.6},{:.9e},{:.9e},{:.9},{:.9},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.phase,
            self.iteration,
            self.lr,
            self.loss,
            self.train_acc,
            self.val_acc,
            self.ff_ratio,
            self.ff_ratio_mean,
            self.c2i_ratio,
            self.c2i_literal,
            mean(&all_cam),
            min(&all_cam),
            cam_first_min,
            mean(&self.sdam),
            self.sdam.first().copied().unwrap_or(f64::NAN),
        );
        for s in &self.saturation {
            let _ = write!(row, ",{s:.6}");
        }
        let ucam: Vec<f64> = self.update_cam.iter().flatten().copied().collect();
        for q in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let _ = write!(row, ",{:.9e}", quantile(&ucam, q).unwrap_or(f64::NAN));
        }
        row
    }
}
