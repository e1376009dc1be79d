//! Binarization primitives and binary residual blocks.
//!
//! Activations are binarized with `sign` (zero maps to `+1`) and trained through
//! the clip-derivative straight-through estimator. Weights are binarized per
//! output channel as `mean|w_r| · sign(w_r)`; the latent `w_r` is only ever
//! changed by the optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{channel_abs_mean, BnStats, Tape, Var, WeightGradMode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Elementwise `-1` for negative input, `+1` otherwise.
pub fn sign_ste_forward(a_r: &Tensor) -> Tensor {
    a_r.map(|v| if v < 0.0 { -1.0 } else { 1.0 })
}

/// Clip-derivative STE: passes `upstream` where `|a_r| ≤ 1`, zero elsewhere.
pub fn sign_ste_backward(a_r: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if a_r.shape() != upstream.shape() {
        return Err(Error::Dimension(format!(
            "STE backward: activation {:?} vs upstream {:?}",
            a_r.shape(),
            upstream.shape()
        )));
    }
    let data = a_r
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&a, &g)| if a.abs() <= 1.0 { g } else { 0.0 })
        .collect();
    Tensor::new(a_r.shape(), data)
}

/// Per-output-channel absolute mean of a weight tensor (leading axis = channel).
pub fn channel_scales(w_r: &Tensor) -> Vec<f64> {
    let (rows, per) = w_r.rows();
    channel_abs_mean(w_r.data(), rows, per)
}

/// `w_b = (‖W_r‖₁ / n) · sign(w_r)` per output channel.
pub fn binarize_weights(w_r: &Tensor) -> Tensor {
    let (_, per) = w_r.rows();
    let scale = channel_scales(w_r);
    let data = w_r
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| scale[i / per] * if v < 0.0 { -1.0 } else { 1.0 })
        .collect();
    Tensor::new(w_r.shape(), data).expect("same shape as input")
}

/// Which halves of a binary block are binarized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinarizeConfig {
    pub binarize_weights: bool,
    pub binarize_activations: bool,
    #[serde(default)]
    pub weight_grad_mode: WeightGradMode,
}

impl BinarizeConfig {
    pub const REAL: Self = Self {
        binarize_weights: false,
        binarize_activations: false,
        weight_grad_mode: WeightGradMode::SteScaled,
    };
    pub const BINARY: Self = Self {
        binarize_weights: true,
        binarize_activations: true,
        weight_grad_mode: WeightGradMode::SteScaled,
    };
}

/// Forward-pass options shared by every layer.
#[derive(Debug, Clone, Copy)]
pub struct ForwardCtx<'a> {
    pub training: bool,
    /// Replace `sign` by `clip(−1,·,1)` everywhere, with the given frozen
    /// per-channel weight scales (one entry per binary conv, in order).
    pub surrogate: Option<&'a [Vec<f64>]>,
}

impl ForwardCtx<'_> {
    pub fn train() -> Self {
        Self {
            training: true,
            surrogate: None,
        }
    }

    pub fn eval() -> Self {
        Self {
            training: false,
            surrogate: None,
        }
    }
}

/// Pulls parameter vars off a pre-registered list in declaration order.
pub struct ParamCursor<'v> {
    vars: std::slice::Iter<'v, Var>,
    binary_conv_index: usize,
}

impl<'v> ParamCursor<'v> {
    pub fn new(vars: &'v [Var]) -> Self {
        Self {
            vars: vars.iter(),
            binary_conv_index: 0,
        }
    }

    pub fn next(&mut self) -> Var {
        *self.vars.next().expect("parameter list shorter than layer graph")
    }
}

/// Stateless sign activation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BinaryActivation;

impl BinaryActivation {
    pub fn forward(&self, tape: &mut Tape, a_r: Var, ctx: &ForwardCtx) -> Result<Var> {
        if ctx.surrogate.is_some() {
            tape.clip(a_r)
        } else {
            tape.sign_ste(a_r)
        }
    }
}

/// Convolution over latent real weights, optionally binarized in the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarizedConv {
    pub latent_weights: Tensor,
    pub stride: usize,
    pub pad: usize,
    pub binarize_weights: bool,
    pub binarize_activations: bool,
    pub weight_grad_mode: WeightGradMode,
}

impl BinarizedConv {
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: Var,
        weight: Var,
        frozen_scale: Option<&[f64]>,
    ) -> Result<Var> {
        let w = match (self.binarize_weights, frozen_scale) {
            (false, _) => weight,
            (true, Some(scale)) => tape.clip_weights(weight, self.weight_grad_mode, Some(scale))?,
            (true, None) => tape.binarize_weights(weight, self.weight_grad_mode, None)?,
        };
        tape.conv2d(input, w, self.stride, self.pad)
    }
}

/// Affine batchnorm with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: BnStats,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            stats: BnStats::new(channels),
            eps: 1e-5,
        }
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        x: Var,
        cursor: &mut ParamCursor,
        ctx: &ForwardCtx,
    ) -> Result<Var> {
        let gamma = cursor.next();
        let beta = cursor.next();
        tape.batchnorm(x, gamma, beta, self.eps, ctx.training, &mut self.stats)
    }
}

/// Real-valued shortcut path.
#[derive(Debug, Clone, PartialEq)]
pub enum Shortcut {
    Identity,
    /// `k×k` average pool, real 1×1 conv, batchnorm.
    Downsample {
        pool: usize,
        weight: Tensor,
        bn: BatchNorm,
    },
}

/// One residual unit: `sign|clip → conv(w_b) → BN → + shortcut(x)`.
///
/// Blocks with real activations use `clip(−1,·,1)` in place of `sign`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub activation: Option<BinaryActivation>,
    pub conv: BinarizedConv,
    pub bn: BatchNorm,
    pub shortcut: Shortcut,
}

/// Uniform `±1/√fan_in`, matching the common framework default for conv layers.
pub fn init_conv_weight(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let bound = 1.0 / (fan_in as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("valid conv shape")
}

/// Builds a 3×3 binary residual block.
pub fn build_block(
    in_ch: usize,
    out_ch: usize,
    stride: usize,
    cfg: BinarizeConfig,
    rng: &mut impl Rng,
) -> Result<Block> {
    if in_ch == 0 || out_ch == 0 {
        return Err(Error::Contract(format!(
            "block channels must be positive, got {in_ch}→{out_ch}"
        )));
    }
    if stride == 0 {
        return Err(Error::Contract("block stride must be ≥ 1".into()));
    }
    let latent_weights = init_conv_weight(&[out_ch, in_ch, 3, 3], rng);
    let shortcut = if in_ch == out_ch && stride == 1 {
        Shortcut::Identity
    } else {
        Shortcut::Downsample {
            pool: stride,
            weight: init_conv_weight(&[out_ch, in_ch, 1, 1], rng),
            bn: BatchNorm::new(out_ch),
        }
    };
    Ok(Block {
        activation: cfg.binarize_activations.then_some(BinaryActivation),
        conv: BinarizedConv {
            latent_weights,
            stride,
            pad: 1,
            binarize_weights: cfg.binarize_weights,
            binarize_activations: cfg.binarize_activations,
            weight_grad_mode: cfg.weight_grad_mode,
        },
        bn: BatchNorm::new(out_ch),
        shortcut,
    })
}

/// Output of one block forward.
pub struct BlockOutput {
    pub out: Var,
    /// Pre-binarization input to the conv (the saturation measurement site).
    pub site: Var,
    /// Tensor actually fed to the conv.
    pub conv_input: Var,
}

impl Block {
    pub fn set_binarization(&mut self, cfg: BinarizeConfig) {
        self.activation = cfg.binarize_activations.then_some(BinaryActivation);
        self.conv.binarize_weights = cfg.binarize_weights;
        self.conv.binarize_activations = cfg.binarize_activations;
        self.conv.weight_grad_mode = cfg.weight_grad_mode;
    }

    /// Parameter tensors in registration order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = vec![&self.conv.latent_weights, &self.bn.gamma, &self.bn.beta];
        if let Shortcut::Downsample { weight, bn, .. } = &self.shortcut {
            p.extend([weight, &bn.gamma, &bn.beta]);
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![
            &mut self.conv.latent_weights,
            &mut self.bn.gamma,
            &mut self.bn.beta,
        ];
        if let Shortcut::Downsample { weight, bn, .. } = &mut self.shortcut {
            p.extend([weight, &mut bn.gamma, &mut bn.beta]);
        }
        p
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        x: Var,
        cursor: &mut ParamCursor,
        ctx: &ForwardCtx,
    ) -> Result<BlockOutput> {
        let weight = cursor.next();
        let frozen = ctx
            .surrogate
            .map(|scales| scales[cursor.binary_conv_index].as_slice());
        cursor.binary_conv_index += 1;
        let conv_input = match &self.activation {
            Some(act) => act.forward(tape, x, ctx)?,
            None => tape.clip(x)?,
        };
        let c = self.conv.forward(tape, conv_input, weight, frozen)?;
        let b = self.bn.forward(tape, c, cursor, ctx)?;
        let s = match &mut self.shortcut {
            Shortcut::Identity => x,
            Shortcut::Downsample { pool, bn, .. } => {
                let w = cursor.next();
                let pooled = if *pool > 1 {
                    tape.avg_pool2d(x, *pool)?
                } else {
                    x
                };
                let proj = tape.conv2d(pooled, w, 1, 0)?;
                bn.forward(tape, proj, cursor, ctx)?
            }
        };
        Ok(BlockOutput {
            out: tape.add(b, s)?,
            site: x,
            conv_input,
        })
    }
}
