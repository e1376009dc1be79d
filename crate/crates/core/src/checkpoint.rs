//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic `BNNCKPT1`, a little-endian `u32` version, then
//! the sections `arch`, `params`, `bn_stats`, `optimizer`, `rng`, `progress`,
//! `snapshot`, `metrics` in that order. Each section is a `u64` byte length
//! followed by its payload. Every number is little-endian; floats are stored
//! as raw IEEE-754 bits so a reload is exact.

use std::path::Path;

use crate::autograd::{BnStats, WeightGradMode};
use crate::binary::BinarizeConfig;
use crate::data::BatchCursor;
use crate::diagnostics::{FlipTracker, InitSnapshot};
use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind, OptimizerState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BNNCKPT1";
pub const VERSION: u32 = 1;

/// Serialized ChaCha generator position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

/// Where a run stands.
#[derive(Debug, Clone, PartialEq)]
pub struct Progress {
    pub phase: usize,
    pub phase_iteration: usize,
    pub iteration: usize,
    pub flips: FlipTracker,
    pub cursor: BatchCursor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    pub binarize: BinarizeConfig,
    pub params: Vec<Tensor>,
    pub bn_stats: Vec<BnStats>,
    pub optimizer: Optimizer,
    pub rng: RngState,
    pub progress: Progress,
    pub snapshot: InitSnapshot,
    /// Metrics CSV lines written so far, header first.
    pub metrics: Vec<String>,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }
    fn usizes(&mut self, v: &[usize]) {
        self.usize(v.len());
        v.iter().for_each(|&x| self.usize(x));
    }
    fn bytes(&mut self, v: &[u8]) {
        self.usize(v.len());
        self.0.extend_from_slice(v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Truncated {
                section: self.section,
            });
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format(format!("{}: length overflow", self.section)))
    }
    /// A length that must fit in the remaining bytes at `unit` bytes per item.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.checked_mul(unit).map_or(true, |b| b > self.buf.len()) {
            return Err(Error::Truncated {
                section: self.section,
            });
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.usize()).collect()
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Format(format!("{}: bad flag byte {v}", self.section))),
        }
    }
    fn finish(self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.section,
                self.buf.len()
            )))
        }
    }
}

fn grad_mode_code(m: WeightGradMode) -> u8 {
    match m {
        WeightGradMode::SteScaled => 0,
        WeightGradMode::StePlain => 1,
    }
}

fn write_optimizer_config(w: &mut Writer, c: &OptimizerConfig) {
    w.u8(c.kind.code());
    for v in [
        c.lr,
        c.momentum,
        c.beta1,
        c.beta2,
        c.eps,
        c.alpha,
        c.rho,
        c.final_lr,
        c.bound_gamma,
        c.weight_decay,
    ] {
        w.f64(v);
    }
    w.u8(c.decoupled as u8);
}

fn read_optimizer_config(r: &mut Reader) -> Result<OptimizerConfig> {
    let code = r.u8()?;
    let kind = OptimizerKind::from_code(code)
        .ok_or_else(|| Error::Format(format!("unknown optimizer code {code}")))?;
    Ok(OptimizerConfig {
        kind,
        lr: r.f64()?,
        momentum: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
        alpha: r.f64()?,
        rho: r.f64()?,
        final_lr: r.f64()?,
        bound_gamma: r.f64()?,
        weight_decay: r.f64()?,
        decoupled: r.bool()?,
    })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut section = |f: &dyn Fn(&mut Writer)| {
            let mut w = Writer::default();
            f(&mut w);
            out.extend_from_slice(&(w.0.len() as u64).to_le_bytes());
            out.extend_from_slice(&w.0);
        };
        section(&|w| {
            let a = &self.arch;
            w.u64(a.digest());
            for v in [a.in_channels, a.height, a.width, a.num_classes, a.channels, a.blocks] {
                w.usize(v);
            }
            w.u8(a.latent_init_bound.is_some() as u8);
            w.f64(a.latent_init_bound.unwrap_or(0.0));
            w.u8(self.binarize.binarize_weights as u8);
            w.u8(self.binarize.binarize_activations as u8);
            w.u8(grad_mode_code(self.binarize.weight_grad_mode));
        });
        section(&|w| {
            w.usize(self.params.len());
            for t in &self.params {
                w.usizes(t.shape());
                w.f64s(t.data());
            }
        });
        section(&|w| {
            w.usize(self.bn_stats.len());
            for s in &self.bn_stats {
                w.f64(s.momentum);
                w.f64s(&s.mean);
                w.f64s(&s.var);
            }
        });
        section(&|w| {
            write_optimizer_config(w, &self.optimizer.config);
            w.usize(self.optimizer.states.len());
            for s in &self.optimizer.states {
                write_optimizer_config(w, &s.hyper);
                w.f64(s.lr);
                w.u64(s.t);
                for buf in [&s.first, &s.second, &s.second_max, &s.delta_acc] {
                    w.f64s(buf);
                }
            }
        });
        section(&|w| {
            w.0.extend_from_slice(&self.rng.seed);
            w.u64(self.rng.stream);
            w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        });
        section(&|w| {
            let p = &self.progress;
            w.usize(p.phase);
            w.usize(p.phase_iteration);
            w.usize(p.iteration);
            w.u64(p.flips.flips);
            w.u64(p.flips.steps);
            w.u64(p.flips.weights);
            w.usizes(&p.cursor.order);
            w.usize(p.cursor.position);
        });
        section(&|w| {
            w.usize(self.snapshot.shapes().len());
            for (shape, signs) in self.snapshot.shapes().iter().zip(self.snapshot.signs()) {
                w.usizes(shape);
                w.bytes(&signs.iter().map(|&s| s as u8).collect::<Vec<_>>());
            }
        });
        section(&|w| {
            w.usize(self.metrics.len());
            for line in &self.metrics {
                w.bytes(line.as_bytes());
            }
        });
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic {
                file: "checkpoint",
                found: bytes[..bytes.len().min(MAGIC.len())].to_vec(),
            });
        }
        let mut top = Reader {
            buf: &bytes[MAGIC.len()..],
            section: "checkpoint header",
        };
        let version = u32::from_le_bytes(top.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let mut open = |name: &'static str| -> Result<Reader> {
            top.section = name;
            let n = top.len(1)?;
            Ok(Reader {
                buf: top.take(n)?,
                section: name,
            })
        };

        let mut r = open("arch")?;
        let stored_digest = r.u64()?;
        let arch = ArchConfig {
            in_channels: r.usize()?,
            height: r.usize()?,
            width: r.usize()?,
            num_classes: r.usize()?,
            channels: r.usize()?,
            blocks: r.usize()?,
            latent_init_bound: {
                let set = r.bool()?;
                let v = r.f64()?;
                set.then_some(v)
            },
        };
        if arch.digest() != stored_digest {
            return Err(Error::DigestMismatch {
                expected: arch.digest(),
                found: stored_digest,
            });
        }
        let binarize = BinarizeConfig {
            binarize_weights: r.bool()?,
            binarize_activations: r.bool()?,
            weight_grad_mode: match r.u8()? {
                0 => WeightGradMode::SteScaled,
                1 => WeightGradMode::StePlain,
                v => return Err(Error::Format(format!("unknown weight grad mode {v}"))),
            },
        };
        r.finish()?;

        let mut r = open("params")?;
        let n = r.len(16)?;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let shape = r.usizes()?;
            let data = r.f64s()?;
            params.push(Tensor::new(&shape, data)?);
        }
        r.finish()?;

        let mut r = open("bn_stats")?;
        let n = r.len(24)?;
        let mut bn_stats = Vec::with_capacity(n);
        for _ in 0..n {
            let momentum = r.f64()?;
            bn_stats.push(BnStats {
                momentum,
                mean: r.f64s()?,
                var: r.f64s()?,
            });
        }
        r.finish()?;

        let mut r = open("optimizer")?;
        let config = read_optimizer_config(&mut r)?;
        let n = r.len(1)?;
        let mut states = Vec::with_capacity(n);
        for _ in 0..n {
            let hyper = read_optimizer_config(&mut r)?;
            states.push(OptimizerState {
                hyper,
                lr: r.f64()?,
                t: r.u64()?,
                first: r.f64s()?,
                second: r.f64s()?,
                second_max: r.f64s()?,
                delta_acc: r.f64s()?,
            });
        }
        r.finish()?;
        let optimizer = Optimizer { config, states };

        let mut r = open("rng")?;
        let rng = RngState {
            seed: r.take(32)?.try_into().expect("32 bytes"),
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes")),
        };
        r.finish()?;

        let mut r = open("progress")?;
        let phase = r.usize()?;
        let phase_iteration = r.usize()?;
        let iteration = r.usize()?;
        let flips = FlipTracker {
            flips: r.u64()?,
            steps: r.u64()?,
            weights: r.u64()?,
        };
        let order = r.usizes()?;
        let position = r.usize()?;
        if position > order.len() {
            return Err(Error::Format("batch cursor past end of epoch".into()));
        }
        r.finish()?;
        let progress = Progress {
            phase,
            phase_iteration,
            iteration,
            flips,
            cursor: BatchCursor { order, position },
        };

        let mut r = open("snapshot")?;
        let n = r.len(16)?;
        let (mut shapes, mut signs) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            shapes.push(r.usizes()?);
            signs.push(r.bytes()?.iter().map(|&b| b as i8).collect());
        }
        r.finish()?;
        let snapshot = InitSnapshot::from_parts(shapes, signs)?;

        let mut r = open("metrics")?;
        let n = r.len(8)?;
        let mut metrics = Vec::with_capacity(n);
        for _ in 0..n {
            let line = std::str::from_utf8(r.bytes()?)
                .map_err(|_| Error::Format("metrics line is not UTF-8".into()))?;
            metrics.push(line.to_owned());
        }
        r.finish()?;
        if !top.buf.is_empty() {
            return Err(Error::Format(format!("{} bytes after last section", top.buf.len())));
        }

        Ok(Self {
            arch,
            binarize,
            params,
            bn_stats,
            optimizer,
            rng,
            progress,
            snapshot,
            metrics,
        })
    }

    /// Refuses checkpoints written for a different architecture.
    pub fn verify_arch(&self, expected: &ArchConfig) -> Result<()> {
        if self.arch.digest() != expected.digest() {
            return Err(Error::DigestMismatch {
                expected: expected.digest(),
                found: self.arch.digest(),
            });
        }
        Ok(())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
