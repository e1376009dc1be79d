//! Loss landscapes: the two-node toy problem with optimizer trajectories, and
//! filter-normalized 2D slices of a network's loss.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Network;
use crate::optim::{OptimizerConfig, OptimizerKind, OptimizerState};
use crate::tensor::Tensor;

const DIVERGENCE_LIMIT: f64 = 1e6;

fn clip(z: f64) -> f64 {
    z.clamp(-1.0, 1.0)
}

fn sign(z: f64) -> f64 {
    if z < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// How a coordinate outside `[-1, 1]` receives gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaturationModel {
    /// In-range gradient times κ on every step.
    #[default]
    Scaled,
    /// Full in-range gradient with probability κ, zero otherwise. Same
    /// expectation as `Scaled`, but the magnitude seen on any one step is
    /// either 0 or the full in-range value.
    Bernoulli,
}

/// `L(x, y) = (clip(x) + clip(y) − target)²` with κ-attenuated gradients in
/// saturated coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyLandscape {
    pub target: f64,
    pub kappa: f64,
    #[serde(default)]
    pub saturation: SaturationModel,
}

impl Default for ToyLandscape {
    fn default() -> Self {
        Self {
            target: 2.0,
            kappa: 0.05,
            saturation: SaturationModel::Scaled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyEval {
    pub loss: f64,
    pub gx: f64,
    pub gy: f64,
}

impl ToyLandscape {
    pub fn new(target: f64, kappa: f64) -> Result<Self> {
        let t = Self {
            target,
            kappa,
            ..Self::default()
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(Error::Config(format!("kappa must lie in (0, 1], got {}", self.kappa)));
        }
        if !self.target.is_finite() {
            return Err(Error::Config("target must be finite".into()));
        }
        Ok(())
    }

    pub fn loss(&self, x: f64, y: f64) -> f64 {
        (clip(x) + clip(y) - self.target).powi(2)
    }

    /// Loss with `sign` in place of `clip`.
    pub fn discrete_loss(&self, x: f64, y: f64) -> f64 {
        (sign(x) + sign(y) - self.target).powi(2)
    }

    /// Expected surrogate gradient: the clip-derivative chain rule with
    /// slope κ instead of 0 outside `[-1, 1]`.
    pub fn expected_grad(&self, x: f64, y: f64) -> (f64, f64) {
        let g = 2.0 * (clip(x) + clip(y) - self.target);
        let slope = |z: f64| if z.abs() <= 1.0 { 1.0 } else { self.kappa };
        (g * slope(x), g * slope(y))
    }

    /// Surrogate gradient at `(x, y)` with a fresh saturation draw per
    /// coordinate. Two uniforms are consumed on every call so optimizers that
    /// share a seed see the same noise stream.
    pub fn loss_and_grad(&self, x: f64, y: f64, rng: &mut impl Rng) -> ToyEval {
        let r = clip(x) + clip(y) - self.target;
        let g = 2.0 * r;
        let draws: [f64; 2] = [rng.gen(), rng.gen()];
        let coord = |z: f64, u: f64| {
            if z.abs() <= 1.0 {
                g
            } else {
                match self.saturation {
                    SaturationModel::Bernoulli => {
                        if u < self.kappa {
                            g
                        } else {
                            0.0
                        }
                    }
                    SaturationModel::Scaled => self.kappa * g,
                }
            }
        };
        ToyEval {
            loss: r * r,
            gx: coord(x, draws[0]),
            gy: coord(y, draws[1]),
        }
    }
}

/// One trajectory row. Row 0 is the start point with zero gradient and update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub x: f64,
    pub y: f64,
    pub gx: f64,
    pub gy: f64,
    pub ux: f64,
    pub uy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub optimizer: OptimizerKind,
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn start(&self) -> &TrajectoryPoint {
        &self.points[0]
    }

    pub fn end(&self) -> &TrajectoryPoint {
        self.points.last().expect("trajectory is never empty")
    }

    /// `|Δx| / |Δy|` between the first and last point.
    pub fn displacement_ratio(&self) -> f64 {
        let (s, e) = (self.start(), self.end());
        (e.x - s.x).abs() / (e.y - s.y).abs()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,x,y,g_x,g_y,u_x,u_y,loss\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
                p.step, p.x, p.y, p.gx, p.gy, p.ux, p.uy, p.loss
            );
        }
        out
    }
}

/// Learning rates for the toy comparison: Adam 0.01, SGD 0.1, otherwise the
/// framework default.
pub fn toy_default_lr(kind: OptimizerKind) -> f64 {
    match kind {
        OptimizerKind::Adam => 0.01,
        k => OptimizerConfig::comparison_defaults(k).lr,
    }
}

/// Runs `steps` optimizer updates on the toy landscape.
pub fn simulate(
    landscape: &ToyLandscape,
    optimizer: OptimizerKind,
    start: (f64, f64),
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<Trajectory> {
    landscape.validate()?;
    let config = OptimizerConfig::comparison_defaults(optimizer).with_lr(lr);
    config.validate()?;
    let mut state = OptimizerState::new(config, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Tensor::from_vec(vec![start.0, start.1]);
    let mut points = Vec::with_capacity(steps + 1);
    points.push(TrajectoryPoint {
        step: 0,
        x: start.0,
        y: start.1,
        gx: 0.0,
        gy: 0.0,
        ux: 0.0,
        uy: 0.0,
        loss: landscape.loss(start.0, start.1),
    });
    for step in 1..=steps {
        let (x, y) = (w.data()[0], w.data()[1]);
        let e = landscape.loss_and_grad(x, y, &mut rng);
        state.step(&mut w, &Tensor::from_vec(vec![e.gx, e.gy]))?;
        let (nx, ny) = (w.data()[0], w.data()[1]);
        if !(nx.abs() <= DIVERGENCE_LIMIT && ny.abs() <= DIVERGENCE_LIMIT) {
            return Err(Error::Divergence { step, x: nx, y: ny });
        }
        points.push(TrajectoryPoint {
            step,
            x: nx,
            y: ny,
            gx: e.gx,
            gy: e.gy,
            ux: nx - x,
            uy: ny - y,
            loss: landscape.loss(nx, ny),
        });
    }
    Ok(Trajectory { optimizer, points })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurfaceKind {
    Discrete,
    Surrogate,
}

/// Row-major grid: `values[i * xs.len() + j]` is the value at `(xs[j], ys[i])`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.xs.len() + col]
    }

    /// Largest absolute difference between horizontally or vertically adjacent cells.
    pub fn max_adjacent_diff(&self) -> f64 {
        self.adjacent_diffs().fold(0.0, f64::max)
    }

    /// Sum of absolute differences between adjacent cells.
    pub fn total_variation(&self) -> f64 {
        self.adjacent_diffs().sum()
    }

    fn adjacent_diffs(&self) -> impl Iterator<Item = f64> + '_ {
        let (rows, cols) = (self.ys.len(), self.xs.len());
        let horiz = (0..rows).flat_map(move |i| (1..cols).map(move |j| (self.at(i, j) - self.at(i, j - 1)).abs()));
        let vert = (1..rows).flat_map(move |i| (0..cols).map(move |j| (self.at(i, j) - self.at(i - 1, j)).abs()));
        horiz.chain(vert)
    }

    /// Two axis lines (`x,...` and `y,...`) followed by one line per grid row.
    pub fn to_csv(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:.12e}")).collect::<Vec<_>>().join(",");
        let mut out = format!("x,{}\ny,{}\n", join(&self.xs), join(&self.ys));
        for row in self.values.chunks(self.xs.len()) {
            out.push_str(&join(row));
            out.push('\n');
        }
        out
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![(lo + hi) / 2.0];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Toy loss on a square grid over `[range.0, range.1]²`.
pub fn surface_grid(
    landscape: &ToyLandscape,
    kind: SurfaceKind,
    range: (f64, f64),
    resolution: usize,
) -> Result<Grid> {
    if resolution < 2 {
        return Err(Error::Contract(format!("surface resolution must be ≥ 2, got {resolution}")));
    }
    let xs = linspace(range.0, range.1, resolution);
    let ys = xs.clone();
    let values = ys
        .iter()
        .flat_map(|&y| {
            xs.iter().map(move |&x| match kind {
                SurfaceKind::Discrete => landscape.discrete_loss(x, y),
                SurfaceKind::Surrogate => landscape.loss(x, y),
            })
        })
        .collect();
    Ok(Grid { xs, ys, values })
}

/// Random direction with each filter (leading-axis slice) rescaled to the norm
/// of the matching filter of `w`. One-dimensional tensors get a zero direction.
fn filter_normalized_direction(w: &Tensor, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut d: Vec<f64> = (0..w.numel()).map(|_| rng.sample(StandardNormal)).collect();
    if w.ndim() < 2 {
        d.iter_mut().for_each(|v| *v = 0.0);
        return d;
    }
    let (rows, per) = w.rows();
    for r in 0..rows {
        let ws = &w.data()[r * per..(r + 1) * per];
        let ds = &mut d[r * per..(r + 1) * per];
        let wn = ws.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dn = ds.iter().map(|v| v * v).sum::<f64>().sqrt();
        let k = if dn > 0.0 { wn / dn } else { 0.0 };
        ds.iter_mut().for_each(|v| *v *= k);
    }
    d
}

/// Loss of `net` on a fixed batch over `θ + α·δ + β·η`, `α, β ∈ [−radius, radius]`.
///
/// Parameters are restored bit-for-bit afterwards. Non-finite losses are
/// recorded as `+∞`.
pub fn loss_slice(
    net: &mut Network,
    images: &Tensor,
    labels: &[usize],
    resolution: usize,
    radius: f64,
    seed: u64,
) -> Result<Grid> {
    if resolution < 1 {
        return Err(Error::Contract("slice resolution must be ≥ 1".into()));
    }
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(Error::Contract(format!("slice radius must be finite and ≥ 0, got {radius}")));
    }
    let origin: Vec<Tensor> = net.params().into_iter().cloned().collect();
    let bn_backup: Vec<_> = net.batchnorms().into_iter().map(|b| b.stats.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let delta: Vec<Vec<f64>> = origin.iter().map(|w| filter_normalized_direction(w, &mut rng)).collect();
    let eta: Vec<Vec<f64>> = origin.iter().map(|w| filter_normalized_direction(w, &mut rng)).collect();
    let coords = linspace(-radius, radius, resolution);
    let mut values = Vec::with_capacity(resolution * resolution);
    let result = (|| -> Result<()> {
        for &beta in &coords {
            for &alpha in &coords {
                for ((p, o), (d, e)) in net.params_mut().into_iter().zip(&origin).zip(delta.iter().zip(&eta)) {
                    let dst = p.data_mut();
                    dst.copy_from_slice(o.data());
                    if alpha != 0.0 || beta != 0.0 {
                        for ((w, dv), ev) in dst.iter_mut().zip(d).zip(e) {
                            *w += alpha * dv + beta * ev;
                        }
                    }
                }
                let loss = net.eval_loss(images, labels)?;
                values.push(if loss.is_finite() { loss } else { f64::INFINITY });
            }
        }
        Ok(())
    })();
    for (p, o) in net.params_mut().into_iter().zip(&origin) {
        p.data_mut().copy_from_slice(o.data());
    }
    for (bn, s) in net.batchnorms_mut().into_iter().zip(bn_backup) {
        bn.stats = s;
    }
    result?;
    Ok(Grid {
        xs: coords.clone(),
        ys: coords,
        values,
    })
}
