//! The fixed small CNN: real 3×3 stem conv + BN, a stack of binary residual
//! blocks, global average pooling and a real linear classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::binary::{build_block, init_conv_weight, BatchNorm, BinarizeConfig, Block, ForwardCtx, ParamCursor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Channels of the stem and of every binary block.
    pub channels: usize,
    pub blocks: usize,
    /// Binary-conv latent weights start uniform in `±bound` when set,
    /// otherwise uniform in `±1/√fan_in`.
    pub latent_init_bound: Option<f64>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_channels: 2,
            height: 8,
            width: 8,
            num_classes: 4,
            channels: 32,
            blocks: 4,
            latent_init_bound: None,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("in_channels", self.in_channels),
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("blocks", self.blocks),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("arch.{name} must be positive")));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("arch.num_classes must be ≥ 2".into()));
        }
        if let Some(b) = self.latent_init_bound {
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::Config(format!("arch.latent_init_bound must be finite and > 0, got {b}")));
            }
        }
        Ok(())
    }

    /// 64-bit FNV-1a over the architecture fields; identifies compatible checkpoints.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let fields = [
            self.in_channels,
            self.height,
            self.width,
            self.num_classes,
            self.channels,
            self.blocks,
        ];
        for byte in b"binopt-cnn-v1"
            .iter()
            .copied()
            .chain(fields.iter().flat_map(|f| (*f as u64).to_le_bytes()))
            .chain(self.latent_init_bound.map_or(0, f64::to_bits).to_le_bytes())
        {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch: ArchConfig,
    pub stem_weight: Tensor,
    pub stem_bn: BatchNorm,
    pub blocks: Vec<Block>,
    /// `channels × num_classes`
    pub fc_weight: Tensor,
    pub fc_bias: Tensor,
    binarize: BinarizeConfig,
}

/// Values produced by one forward pass.
pub struct ForwardOut {
    pub logits: Var,
    /// One var per parameter, in [`Network::params`] order.
    pub params: Vec<Var>,
    /// Pre-binarization input of each block.
    pub sites: Vec<Var>,
}

impl Network {
    pub fn new(arch: ArchConfig, binarize: BinarizeConfig, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let c = arch.channels;
        let stem_weight = init_conv_weight(&[c, arch.in_channels, 3, 3], rng);
        let mut blocks = (0..arch.blocks)
            .map(|_| build_block(c, c, 1, binarize, rng))
            .collect::<Result<Vec<_>>>()?;
        if let Some(bound) = arch.latent_init_bound {
            for b in &mut blocks {
                b.conv
                    .latent_weights
                    .data_mut()
                    .iter_mut()
                    .for_each(|w| *w = rng.gen_range(-bound..bound));
            }
        }
        let bound = 1.0 / (c as f64).sqrt();
        let fc = (0..c * arch.num_classes)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let bias = (0..arch.num_classes)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Ok(Self {
            arch,
            stem_weight,
            stem_bn: BatchNorm::new(c),
            blocks,
            fc_weight: Tensor::new(&[c, arch.num_classes], fc)?,
            fc_bias: Tensor::new(&[arch.num_classes], bias)?,
            binarize,
        })
    }

    pub fn binarization(&self) -> BinarizeConfig {
        self.binarize
    }

    pub fn set_binarization(&mut self, cfg: BinarizeConfig) {
        self.binarize = cfg;
        for b in &mut self.blocks {
            b.set_binarization(cfg);
        }
    }

    /// All trainable tensors in a fixed order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = vec![&self.stem_weight, &self.stem_bn.gamma, &self.stem_bn.beta];
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend([&self.fc_weight, &self.fc_bias]);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![
            &mut self.stem_weight,
            &mut self.stem_bn.gamma,
            &mut self.stem_bn.beta,
        ];
        for b in &mut self.blocks {
            p.extend(b.params_mut());
        }
        p.extend([&mut self.fc_weight, &mut self.fc_bias]);
        p
    }

    /// Weight decay applies to conv and linear weights, not to BN affine
    /// parameters or the classifier bias.
    pub fn decay_mask(&self) -> Vec<bool> {
        self.params().iter().map(|t| t.ndim() >= 2).collect()
    }

    /// Latent weights of the binary convolutions, in depth order.
    pub fn binary_weights(&self) -> Vec<&Tensor> {
        self.blocks.iter().map(|b| &b.conv.latent_weights).collect()
    }

    /// Per-channel scales of every binary conv, for surrogate forwards.
    pub fn frozen_scales(&self) -> Vec<Vec<f64>> {
        self.binary_weights()
            .into_iter()
            .map(crate::binary::channel_scales)
            .collect()
    }

    pub fn batchnorms(&self) -> Vec<&BatchNorm> {
        let mut v = vec![&self.stem_bn];
        for b in &self.blocks {
            v.push(&b.bn);
            if let crate::binary::Shortcut::Downsample { bn, .. } = &b.shortcut {
                v.push(bn);
            }
        }
        v
    }

    pub fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm> {
        let mut v = vec![&mut self.stem_bn];
        for b in &mut self.blocks {
            v.push(&mut b.bn);
            if let crate::binary::Shortcut::Downsample { bn, .. } = &mut b.shortcut {
                v.push(bn);
            }
        }
        v
    }

    /// Records the forward pass of `x` (`N×C×H×W`) on `tape`.
    pub fn forward(&mut self, tape: &mut Tape, x: &Tensor, ctx: &ForwardCtx) -> Result<ForwardOut> {
        let a = &self.arch;
        let want = [a.in_channels, a.height, a.width];
        if x.ndim() != 4 || x.shape()[1..] != want {
            return Err(Error::Dimension(format!(
                "network expects N×{}×{}×{} input, got {:?}",
                want[0],
                want[1],
                want[2],
                x.shape()
            )));
        }
        let params: Vec<Var> = self
            .params()
            .into_iter()
            .map(|t| tape.param(t.clone()))
            .collect();
        let input = tape.constant(x.clone());
        let mut cursor = ParamCursor::new(&params);
        let stem_w = cursor.next();
        let h = tape.conv2d(input, stem_w, 1, 1)?;
        let mut h = self.stem_bn.forward(tape, h, &mut cursor, ctx)?;
        let mut sites = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let o = block.forward(tape, h, &mut cursor, ctx)?;
            sites.push(o.site);
            h = o.out;
        }
        let pooled = tape.global_avg_pool(h)?;
        let fc_w = cursor.next();
        let fc_b = cursor.next();
        let z = tape.matmul(pooled, fc_w)?;
        let logits = tape.add_row_bias(z, fc_b)?;
        Ok(ForwardOut {
            logits,
            params,
            sites,
        })
    }

    /// Mean cross-entropy of a batch without touching BN running statistics.
    pub fn eval_loss(&mut self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, x, &ForwardCtx::eval())?;
        let loss = tape.softmax_cross_entropy(out.logits, labels)?;
        tape.value(loss).item()
    }

    /// Eval-mode logits as a plain tensor.
    pub fn predict_logits(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, x, &ForwardCtx::eval())?;
        Ok(tape.value(out.logits).clone())
    }
}

/// Index of the largest entry of each row (first on ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let (rows, per) = logits.rows();
    (0..rows)
        .map(|r| {
            let row = &logits.data()[r * per..(r + 1) * per];
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let pred = argmax_rows(logits);
    let hit = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hit as f64 / labels.len().max(1) as f64
}
