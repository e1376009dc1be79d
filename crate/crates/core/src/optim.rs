//! SGD with momentum and the adaptive optimizer family, with signed weight decay.
//!
//! Every update rule works on one parameter tensor and its own
//! [`OptimizerState`]; [`Optimizer`] drives a whole parameter list.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Rmsprop,
    Adagrad,
    Adadelta,
    Amsgrad,
    Adabound,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 7] = [
        OptimizerKind::Sgd,
        OptimizerKind::Adam,
        OptimizerKind::Rmsprop,
        OptimizerKind::Adagrad,
        OptimizerKind::Adadelta,
        OptimizerKind::Amsgrad,
        OptimizerKind::Adabound,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Rmsprop => "rmsprop",
            OptimizerKind::Adagrad => "adagrad",
            OptimizerKind::Adadelta => "adadelta",
            OptimizerKind::Amsgrad => "amsgrad",
            OptimizerKind::Adabound => "adabound",
        }
    }

    pub(crate) fn code(self) -> u8 {
        Self::ALL.iter().position(|&k| k == self).expect("listed") as u8
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown optimizer {s:?}")))
    }
}

/// Hyperparameters. Fields irrelevant to `kind` are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// Initial learning rate.
    pub lr: f64,
    /// SGD momentum γ.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// RMSprop smoothing constant.
    pub alpha: f64,
    /// AdaDelta decay ρ.
    pub rho: f64,
    /// AdaBound target SGD rate.
    pub final_lr: f64,
    /// AdaBound convergence speed of the bounds.
    pub bound_gamma: f64,
    /// Signed L2 coefficient on decayed parameters.
    pub weight_decay: f64,
    /// Apply decay directly to weights instead of through the gradient.
    pub decoupled: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::training_defaults(OptimizerKind::Adam)
    }
}

impl OptimizerConfig {
    /// Framework defaults used for the adaptive-optimizer comparison.
    pub fn comparison_defaults(kind: OptimizerKind) -> Self {
        let (lr, eps) = match kind {
            OptimizerKind::Sgd => (0.1, 1e-8),
            OptimizerKind::Adam | OptimizerKind::Amsgrad | OptimizerKind::Adabound => (0.001, 1e-8),
            OptimizerKind::Rmsprop => (0.01, 1e-8),
            OptimizerKind::Adagrad => (0.01, 1e-10),
            OptimizerKind::Adadelta => (1.0, 1e-6),
        };
        Self {
            kind,
            lr,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps,
            alpha: 0.99,
            rho: 0.9,
            final_lr: 0.1,
            bound_gamma: 1e-3,
            weight_decay: 0.0,
            decoupled: false,
        }
    }

    /// Training-run defaults: SGD 0.1, Adam 0.0025, everything else as
    /// [`OptimizerConfig::comparison_defaults`].
    pub fn training_defaults(kind: OptimizerKind) -> Self {
        let mut c = Self::comparison_defaults(kind);
        if kind == OptimizerKind::Adam {
            c.lr = 0.0025;
        }
        c
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{}: {what}", self.kind)));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and ≥ 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.eps <= 0.0 {
            return bad("eps must be > 0");
        }
        if !self.weight_decay.is_finite() {
            return bad("weight_decay must be finite");
        }
        Ok(())
    }
}

/// Per-tensor accumulator state.
///
/// Buffers unused by `hyper.kind` stay empty. `lr` is the current
/// (scheduled) learning rate; `hyper.lr` is the initial one.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub hyper: OptimizerConfig,
    pub lr: f64,
    pub t: u64,
    /// First moment `v` (SGD momentum buffer or Adam-family EMA).
    pub first: Vec<f64>,
    /// Second moment `m` (Adam family, RMSprop), AdaGrad sum, or AdaDelta
    /// squared-gradient average.
    pub second: Vec<f64>,
    /// AMSGrad running max of bias-corrected `m̂`.
    pub second_max: Vec<f64>,
    /// AdaDelta squared-update average.
    pub delta_acc: Vec<f64>,
}

impl OptimizerState {
    pub fn new(hyper: OptimizerConfig, numel: usize) -> Self {
        use OptimizerKind::*;
        let zeros = || vec![0.0; numel];
        let (first, second, second_max, delta_acc) = match hyper.kind {
            Sgd => (zeros(), vec![], vec![], vec![]),
            Adam | Adabound => (zeros(), zeros(), vec![], vec![]),
            Amsgrad => (zeros(), zeros(), zeros(), vec![]),
            Rmsprop | Adagrad => (vec![], zeros(), vec![], vec![]),
            Adadelta => (vec![], zeros(), vec![], zeros()),
        };
        Self {
            hyper,
            lr: hyper.lr,
            t: 0,
            first,
            second,
            second_max,
            delta_acc,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.hyper.kind
    }

    fn numel(&self) -> usize {
        [&self.first, &self.second]
            .iter()
            .map(|b| b.len())
            .max()
            .unwrap_or(0)
    }

    /// Dispatches to the update rule for `hyper.kind`.
    pub fn step(&mut self, w: &mut Tensor, g: &Tensor) -> Result<()> {
        match self.hyper.kind {
            OptimizerKind::Sgd => sgd_momentum_step(w, g, self),
            OptimizerKind::Adam => adam_step(w, g, self),
            OptimizerKind::Rmsprop => rmsprop_step(w, g, self),
            OptimizerKind::Adagrad => adagrad_step(w, g, self),
            OptimizerKind::Adadelta => adadelta_step(w, g, self),
            OptimizerKind::Amsgrad => amsgrad_step(w, g, self),
            OptimizerKind::Adabound => adabound_step(w, g, self),
        }
    }
}

fn check(w: &Tensor, g: &Tensor, state: &OptimizerState, kind: OptimizerKind) -> Result<()> {
    if w.shape() != g.shape() {
        return Err(Error::Dimension(format!(
            "{kind} step: weight {:?} vs gradient {:?}",
            w.shape(),
            g.shape()
        )));
    }
    if state.numel() != w.numel() {
        return Err(Error::Dimension(format!(
            "{kind} state sized {} for a tensor of {} elements",
            state.numel(),
            w.numel()
        )));
    }
    if state.hyper.kind != kind {
        return Err(Error::Contract(format!(
            "{kind} step on {} state",
            state.hyper.kind
        )));
    }
    Ok(())
}

/// `g + weight_decay · w`. Negative decay pushes latent magnitudes up.
pub fn apply_weight_decay(w: &Tensor, g: &Tensor, weight_decay: f64) -> Result<Tensor> {
    if w.shape() != g.shape() {
        return Err(Error::Dimension(format!(
            "weight decay: weight {:?} vs gradient {:?}",
            w.shape(),
            g.shape()
        )));
    }
    if weight_decay == 0.0 {
        return Ok(g.clone());
    }
    let data = g
        .data()
        .iter()
        .zip(w.data())
        .map(|(gi, wi)| gi + weight_decay * wi)
        .collect();
    Tensor::new(g.shape(), data)
}

/// `v ← γ·v + g; w ← w − lr·v`
pub fn sgd_momentum_step(w: &mut Tensor, g: &Tensor, state: &mut OptimizerState) -> Result<()> {
    check(w, g, state, OptimizerKind::Sgd)?;
    state.t += 1;
    let (lr, gamma) = (state.lr, state.hyper.momentum);
    for ((wi, gi), v) in w.data_mut().iter_mut().zip(g.data()).zip(&mut state.first) {
        *v = gamma * *v + gi;
        *wi -= lr * *v;
    }
    Ok(())
}

/// Bias-corrected Adam: `w ← w − lr · v̂ / (√m̂ + ε)`.
pub fn adam_step(w: &mut Tensor, g: &Tensor, state: &mut OptimizerState) -> Result<()> {
    check(w, g, state, OptimizerKind::Adam)?;
    state.t += 1;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(state.t as i32);
    let bc2 = 1.0 - h.beta2.powi(state.t as i32);
    let lr = state.lr;
    for (((wi, gi), v), m) in w
        .data_mut()
        .iter_mut()
        .zip(g.data())
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        *v = h.beta1 * *v + (1.0 - h.beta1) * gi;
        *m = h.beta2 * *m + (1.0 - h.beta2) * gi * gi;
        let v_hat = *v / bc1;
        let m_hat = *m / bc2;
        *wi -= lr * v_hat / (m_hat.sqrt() + h.eps);
    }
    Ok(())
}

/// Adam with the running maximum of `m̂` in the denominator.
pub fn amsgrad_step(w: &mut Tensor, g: &Tensor, state: &mut OptimizerState) -> Result<()> {
    check(w, g, state, OptimizerKind::Amsgrad)?;
    state.t += 1;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(state.t as i32);
    let bc2 = 1.0 - h.beta2.powi(state.t as i32);
    let lr = state.lr;
    for ((((wi, gi), v), m), m_max) in w
        .data_mut()
        .iter_mut()
        .zip(g.data())
        .zip(&mut state.first)
        .zip(&mut state.second)
        .zip(&mut state.second_max)
    {
        *v = h.beta1 * *v + (1.0 - h.beta1) * gi;
        *m = h.beta2 * *m + (1.0 - h.beta2) * gi * gi;
        *m_max = m_max.max(*m / bc2);
        *wi -= lr * (*v / bc1) / (m_max.sqrt() + h.eps);
    }
    Ok(())
}

/// `m ← α·m + (1−α)·g²; w ← w − lr·g/(√m + ε)`
pub fn rmsprop_step(w: &mut Tensor, g: &Tensor, state: &mut OptimizerState) -> Result<()> {
    check(w, g, state, OptimizerKind::Rmsprop)?;
    state.t += 1;
    let h = state.hyper;
    let lr = state.lr;
    for ((wi, gi), m) in w.data_mut().iter_mut().zip(g.data()).zip(&mut state.second) {
        *m = h.alpha * *m + (1.0 - h.alpha) * gi * gi;
        *wi -= lr * gi / (m.sqrt() + h.eps);
    }
    Ok(())
}

/// `s ← s + g²; w ← w − lr·g/(√s + ε)`
pub fn adagrad_step(w: &mut Tensor, g: &Tensor, state: &mut OptimizerState) -> Result<()> {
    check(w, g, state, OptimizerKind::Adagrad)?;
    state.t += 1;
    let h = state.hyper;
    let lr = state.lr;
    for ((wi, gi), s) in w.data_mut().iter_mut().zip(g.data()).zip(&mut state.second) {
        *s += gi * gi;
        *wi -= lr * gi / (s.sqrt() + h.eps);
    }
    Ok(())
}

/// AdaDelta: `Δ = √(u + ε)/√(m + ε) · g`, with `m`, `u` decaying averages of
/// `g²` and `Δ²`; `w ← w − lr·Δ`.
pub fn adadelta_step(w: &mut Tensor, g: &Tensor, state: &mut OptimizerState) -> Result<()> {
    check(w, g, state, OptimizerKind::Adadelta)?;
    state.t += 1;
    let h = state.hyper;
    let lr = state.lr;
    for (((wi, gi), m), u) in w
        .data_mut()
        .iter_mut()
        .zip(g.data())
        .zip(&mut state.second)
        .zip(&mut state.delta_acc)
    {
        *m = h.rho * *m + (1.0 - h.rho) * gi * gi;
        let delta = (*u + h.eps).sqrt() / (*m + h.eps).sqrt() * gi;
        *u = h.rho * *u + (1.0 - h.rho) * delta * delta;
        *wi -= lr * delta;
    }
    Ok(())
}

/// AdaBound: Adam step size clipped per coordinate into bounds that converge
/// to `final_lr` (scaled with the current lr schedule).
pub fn adabound_step(w: &mut Tensor, g: &Tensor, state: &mut OptimizerState) -> Result<()> {
    check(w, g, state, OptimizerKind::Adabound)?;
    state.t += 1;
    let h = state.hyper;
    let t = state.t as f64;
    let bc1 = 1.0 - h.beta1.powi(state.t as i32);
    let bc2 = 1.0 - h.beta2.powi(state.t as i32);
    let step_size = state.lr * bc2.sqrt() / bc1;
    let final_lr = if h.lr > 0.0 {
        h.final_lr * state.lr / h.lr
    } else {
        h.final_lr
    };
    let lower = final_lr * (1.0 - 1.0 / (h.bound_gamma * t + 1.0));
    let upper = final_lr * (1.0 + 1.0 / (h.bound_gamma * t));
    for (((wi, gi), v), m) in w
        .data_mut()
        .iter_mut()
        .zip(g.data())
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        *v = h.beta1 * *v + (1.0 - h.beta1) * gi;
        *m = h.beta2 * *m + (1.0 - h.beta2) * gi * gi;
        let rate = (step_size / (m.sqrt() + h.eps)).clamp(lower, upper);
        *wi -= rate * *v;
    }
    Ok(())
}

/// Optimizer over an ordered parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub states: Vec<OptimizerState>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, sizes: &[usize]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            states: sizes.iter().map(|&n| OptimizerState::new(config, n)).collect(),
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        for s in &mut self.states {
            s.lr = lr;
        }
    }

    /// One update of every parameter. `decay[i]` selects which tensors get
    /// weight decay.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], decay: &[bool]) -> Result<()> {
        if params.len() != self.states.len() || grads.len() != params.len() || decay.len() != params.len() {
            return Err(Error::Dimension(format!(
                "optimizer holds {} states, got {} params / {} grads / {} decay flags",
                self.states.len(),
                params.len(),
                grads.len(),
                decay.len()
            )));
        }
        let wd = self.config.weight_decay;
        for (((w, g), state), &dec) in params.iter_mut().zip(grads).zip(&mut self.states).zip(decay) {
            let w: &mut Tensor = w;
            if dec && wd != 0.0 && self.config.decoupled {
                let shrink = state.lr * wd;
                w.data_mut().iter_mut().for_each(|x| *x -= shrink * *x);
                state.step(w, g)?;
            } else if dec && wd != 0.0 {
                let g = apply_weight_decay(w, g, wd)?;
                state.step(w, &g)?;
            } else {
                state.step(w, g)?;
            }
        }
        Ok(())
    }
}
