//! Training runs: one-step and two-step schedules, periodic diagnostics,
//! checkpoint/resume, and multi-optimizer comparisons.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Tape;
use crate::binary::ForwardCtx;
use crate::checkpoint::{self, Checkpoint, Progress, RngState};
use crate::config::{PhaseSpec, TrainingConfig};
use crate::data::{BatchCursor, Dataset};
use crate::diagnostics::{self, FlipTracker, InitSnapshot, MetricsRecord};
use crate::error::{Error, Result};
use crate::model::{accuracy, ArchConfig, Network};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 256;
const TRAIN_PROBE: usize = 512;

/// Accuracy, loss and per-site saturation of a dataset in eval mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalStats {
    pub accuracy: f64,
    pub loss: f64,
    pub saturation: Vec<f64>,
}

/// Evaluates `net` in eval mode over `data` in fixed-size chunks.
pub fn evaluate(net: &mut Network, data: &Dataset, limit: Option<usize>) -> Result<EvalStats> {
    let n = limit.map_or(data.len(), |l| l.min(data.len()));
    let mut hits = 0.0;
    let mut loss = 0.0;
    let mut sat_counts = vec![0usize; net.blocks.len()];
    let mut sat_total = vec![0usize; net.blocks.len()];
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let (x, y) = data.batch(&idx)?;
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &x, &ForwardCtx::eval())?;
        let l = tape.softmax_cross_entropy(out.logits, &y)?;
        loss += tape.value(l).item()? * idx.len() as f64;
        hits += accuracy(tape.value(out.logits), &y) * idx.len() as f64;
        for (k, site) in out.sites.iter().enumerate() {
            let v = tape.value(*site);
            sat_counts[k] += v.data().iter().filter(|a| a.abs() > 1.0).count();
            sat_total[k] += v.numel();
        }
        start += idx.len();
    }
    Ok(EvalStats {
        accuracy: hits / n as f64,
        loss: loss / n as f64,
        saturation: sat_counts
            .iter()
            .zip(&sat_total)
            .map(|(&c, &t)| c as f64 / t as f64)
            .collect(),
    })
}

/// End-of-phase diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseSummary {
    pub phase: String,
    pub ff_ratio_mean: f64,
    pub c2i_ratio: f64,
    pub c2i_literal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub seed: u64,
    pub iterations: usize,
    pub final_train_acc: f64,
    pub final_val_acc: f64,
    pub final_val_loss: f64,
    /// FF ratio averaged over the last phase.
    pub ff_ratio_mean: f64,
    pub final_c2i: f64,
    pub final_c2i_literal: f64,
    /// Validation-set saturation per activation site, eval mode.
    pub final_saturation: Vec<f64>,
    /// Minimum CAM of the first binary conv.
    pub first_layer_cam_min: f64,
    pub first_layer_sdam: f64,
    /// 80-bin histogram of all binary-conv latent weights over [-2, 2].
    pub weight_histogram: Vec<u64>,
    pub phases: Vec<PhaseSummary>,
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: RunSummary,
    /// Header plus one line per logged row.
    pub metrics: Vec<String>,
    pub final_checkpoint: Checkpoint,
    /// Checkpoints taken at the end of every phase but the last.
    pub phase_checkpoints: Vec<Checkpoint>,
    pub net: Network,
}

pub struct Trainer {
    config: TrainingConfig,
    phases: Vec<PhaseSpec>,
    pub net: Network,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
    train: Dataset,
    val: Dataset,
    progress: Progress,
    snapshot: InitSnapshot,
    metrics: Vec<String>,
}

/// Effective architecture: input and class dimensions come from the data.
pub fn effective_arch(config: &TrainingConfig, data: &Dataset) -> ArchConfig {
    let (c, h, w) = data.sample_shape();
    ArchConfig {
        in_channels: c,
        height: h,
        width: w,
        num_classes: data.num_classes(),
        ..config.arch
    }
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: rng.get_seed(),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos(),
    }
}

fn restore_rng(s: &RngState) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(s.seed);
    rng.set_stream(s.stream);
    rng.set_word_pos(s.word_pos);
    rng
}

/// Rebuilds the network stored in a checkpoint.
pub fn network_from_checkpoint(ckpt: &Checkpoint) -> Result<Network> {
    let mut net = Network::new(ckpt.arch, ckpt.binarize, &mut ChaCha8Rng::seed_from_u64(0))?;
    let params = net.params_mut();
    if params.len() != ckpt.params.len() {
        return Err(Error::Consistency(format!(
            "checkpoint holds {} tensors, model has {}",
            ckpt.params.len(),
            params.len()
        )));
    }
    for (p, saved) in params.into_iter().zip(&ckpt.params) {
        if p.shape() != saved.shape() {
            return Err(Error::Consistency(format!(
                "checkpoint tensor {:?} vs model {:?}",
                saved.shape(),
                p.shape()
            )));
        }
        p.data_mut().copy_from_slice(saved.data());
    }
    let bns = net.batchnorms_mut();
    if bns.len() != ckpt.bn_stats.len() {
        return Err(Error::Consistency("batchnorm count differs".into()));
    }
    for (bn, s) in bns.into_iter().zip(&ckpt.bn_stats) {
        bn.stats = s.clone();
    }
    Ok(net)
}

fn split(config: &TrainingConfig) -> Result<(Dataset, Dataset)> {
    config.dataset.load()?.split(config.val_fraction.max(f64::MIN_POSITIVE), config.seed)
}

impl Trainer {
    pub fn new(config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let (train, val) = split(&config)?;
        let arch = effective_arch(&config, &train);
        let phases = config.phase_specs();
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = Network::new(arch, phases[0].binarize, &mut init_rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let cursor = BatchCursor::new(train.len(), &mut rng);
        let sizes: Vec<usize> = net.params().iter().map(|t| t.numel()).collect();
        let optimizer = Optimizer::new(config.optimizer, &sizes)?;
        let snapshot = InitSnapshot::capture(&net.binary_weights());
        let mut t = Self {
            metrics: vec![MetricsRecord::csv_header(net.blocks.len())],
            config,
            phases,
            net,
            optimizer,
            rng,
            train,
            val,
            progress: Progress {
                phase: 0,
                phase_iteration: 0,
                iteration: 0,
                flips: FlipTracker::default(),
                cursor,
            },
            snapshot,
        };
        t.begin_phase(0)?;
        Ok(t)
    }

    /// Rebuilds a trainer from `ckpt`; the data comes from `config` again.
    pub fn resume(config: TrainingConfig, ckpt: Checkpoint) -> Result<Self> {
        config.validate()?;
        let (train, val) = split(&config)?;
        let arch = effective_arch(&config, &train);
        ckpt.verify_arch(&arch)?;
        let phases = config.phase_specs();
        if ckpt.progress.phase >= phases.len() {
            return Err(Error::Consistency(format!(
                "checkpoint is in phase {} of a {}-phase schedule",
                ckpt.progress.phase,
                phases.len()
            )));
        }
        let net = network_from_checkpoint(&ckpt)?;
        if ckpt.progress.cursor.order.len() != train.len() {
            return Err(Error::Consistency("batch order does not match the training set".into()));
        }
        Ok(Self {
            config,
            phases,
            net,
            optimizer: ckpt.optimizer,
            rng: restore_rng(&ckpt.rng),
            train,
            val,
            progress: ckpt.progress,
            snapshot: ckpt.snapshot,
            metrics: ckpt.metrics,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            arch: self.net.arch,
            binarize: self.net.binarization(),
            params: self.net.params().into_iter().cloned().collect(),
            bn_stats: self.net.batchnorms().iter().map(|b| b.stats.clone()).collect(),
            optimizer: self.optimizer.clone(),
            rng: rng_state(&self.rng),
            progress: self.progress.clone(),
            snapshot: self.snapshot.clone(),
            metrics: self.metrics.clone(),
        }
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn progress(&self) -> &Progress {
        &self.progress
    }

    pub fn metrics(&self) -> &[String] {
        &self.metrics
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn val_set(&self) -> &Dataset {
        &self.val
    }

    fn phase_spec(&self) -> &PhaseSpec {
        &self.phases[self.progress.phase]
    }

    fn phase_done(&self) -> bool {
        self.progress.phase_iteration >= self.phase_spec().iterations
    }

    pub fn is_done(&self) -> bool {
        self.progress.phase + 1 == self.phases.len() && self.phase_done()
    }

    /// Fresh optimizer, binarization and C2I baseline for phase `p`. Weights
    /// carry over unchanged.
    fn begin_phase(&mut self, p: usize) -> Result<()> {
        let spec = self.phases[p];
        self.net.set_binarization(spec.binarize);
        let config = self.config.optimizer.with_weight_decay(spec.weight_decay);
        let sizes: Vec<usize> = self.net.params().iter().map(|t| t.numel()).collect();
        self.optimizer = Optimizer::new(config, &sizes)?;
        self.snapshot = InitSnapshot::capture(&self.net.binary_weights());
        self.progress.phase = p;
        self.progress.phase_iteration = 0;
        self.progress.flips = FlipTracker::default();
        Ok(())
    }

    /// Moves to the next phase if the current one is finished. Returns false
    /// when the whole schedule is done.
    pub fn advance_phase(&mut self) -> Result<bool> {
        if !self.phase_done() {
            return Ok(true);
        }
        if self.progress.phase + 1 >= self.phases.len() {
            return Ok(false);
        }
        self.begin_phase(self.progress.phase + 1)?;
        Ok(true)
    }

    /// Current learning rate under linear decay to zero over the phase.
    pub fn current_lr(&self) -> f64 {
        let spec = self.phase_spec();
        let frac = self.progress.phase_iteration as f64 / spec.iterations as f64;
        self.config.optimizer.lr * (1.0 - frac)
    }

    /// One optimizer update; logs a metrics row on interval and phase end.
    pub fn step(&mut self) -> Result<()> {
        if !self.advance_phase()? {
            return Err(Error::State("training schedule already finished".into()));
        }
        let lr = self.current_lr();
        self.optimizer.set_lr(lr);
        let idx = self
            .progress
            .cursor
            .next_batch(self.config.batch_size, &mut self.rng);
        let (x, y) = self.train.batch(&idx)?;
        let mut tape = Tape::new();
        let out = self.net.forward(&mut tape, &x, &ForwardCtx::train())?;
        let loss_var = tape.softmax_cross_entropy(out.logits, &y)?;
        let loss = tape.value(loss_var).item()?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.progress.iteration + 1,
                last_row: self.metrics.last().cloned().unwrap_or_default(),
            });
        }
        tape.backward(loss_var)?;
        let grads = out
            .params
            .iter()
            .zip(self.net.params())
            .map(|(v, p)| Tensor::new(p.shape(), tape.grad_or_zeros(*v)))
            .collect::<Result<Vec<_>>>()?;
        let before: Vec<Tensor> = self.net.binary_weights().into_iter().cloned().collect();
        let mask = self.net.decay_mask();
        self.optimizer
            .step(&mut self.net.params_mut(), &grads, &mask)?;
        let before_refs: Vec<&Tensor> = before.iter().collect();
        let counts = diagnostics::flip_counts(&before_refs, &self.net.binary_weights())?;
        let flips: usize = counts.iter().map(|c| c.0).sum();
        let total: usize = counts.iter().map(|c| c.1).sum();
        self.progress.flips.record(flips, total);
        self.progress.phase_iteration += 1;
        self.progress.iteration += 1;
        if self.progress.phase_iteration % self.config.log_interval == 0 || self.phase_done() {
            let record = self.measure(lr, loss, flips as f64 / total as f64, &before_refs)?;
            self.metrics.push(record.csv_row());
        }
        Ok(())
    }

    fn measure(&mut self, lr: f64, loss: f64, ff: f64, before: &[&Tensor]) -> Result<MetricsRecord> {
        let train_stats = evaluate(&mut self.net, &self.train, Some(TRAIN_PROBE))?;
        let val_stats = evaluate(&mut self.net, &self.val, None)?;
        let weights = self.net.binary_weights();
        let cam: Vec<Vec<f64>> = weights.iter().map(|w| diagnostics::cam(w)).collect();
        let sdam = cam
            .iter()
            .map(|c| diagnostics::sdam(c))
            .collect::<Result<Vec<_>>>()?;
        let deltas = diagnostics::weight_deltas(before, &weights)?;
        Ok(MetricsRecord {
            phase: self.phase_spec().name.to_owned(),
            iteration: self.progress.iteration,
            lr,
            loss,
            train_acc: train_stats.accuracy,
            val_acc: val_stats.accuracy,
            ff_ratio: ff,
            ff_ratio_mean: self.progress.flips.mean(),
            c2i_ratio: diagnostics::c2i_ratio(&self.snapshot, &weights)?,
            c2i_literal: diagnostics::c2i_literal(&self.snapshot, &weights)?,
            cam,
            sdam,
            saturation: val_stats.saturation,
            update_cam: diagnostics::update_cam(&deltas),
        })
    }

    /// Steps until the schedule ends or `limit` further steps ran, crossing
    /// phase boundaries.
    pub fn run_steps(&mut self, limit: usize) -> Result<usize> {
        let mut n = 0;
        while n < limit && !self.is_done() {
            self.step()?;
            n += 1;
        }
        Ok(n)
    }

    fn finish_phase(&mut self) -> Result<()> {
        while !self.phase_done() {
            self.step()?;
        }
        Ok(())
    }

    /// End-of-run summary from the current state.
    pub fn summary(&mut self) -> Result<RunSummary> {
        let train_stats = evaluate(&mut self.net, &self.train, None)?;
        let val_stats = evaluate(&mut self.net, &self.val, None)?;
        let weights = self.net.binary_weights();
        let first_cam = diagnostics::cam(weights[0]);
        Ok(RunSummary {
            optimizer: self.config.optimizer.kind,
            lr: self.config.optimizer.lr,
            seed: self.config.seed,
            iterations: self.progress.iteration,
            final_train_acc: train_stats.accuracy,
            final_val_acc: val_stats.accuracy,
            final_val_loss: val_stats.loss,
            ff_ratio_mean: self.progress.flips.mean(),
            final_c2i: diagnostics::c2i_ratio(&self.snapshot, &weights)?,
            final_c2i_literal: diagnostics::c2i_literal(&self.snapshot, &weights)?,
            final_saturation: val_stats.saturation,
            first_layer_cam_min: first_cam.iter().copied().fold(f64::INFINITY, f64::min),
            first_layer_sdam: diagnostics::sdam(&first_cam)?,
            weight_histogram: diagnostics::weight_histogram(&weights).counts,
            phases: phase_summaries(&self.metrics),
        })
    }

    /// Runs the remaining schedule and writes artifacts under the output directory.
    pub fn run(mut self) -> Result<RunOutcome> {
        let out_dir = self.config.output_dir.clone();
        if let Some(dir) = &out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut phase_checkpoints = Vec::new();
        loop {
            if let Err(e) = self.finish_phase() {
                if let Some(dir) = &out_dir {
                    let _ = write_metrics(&dir.join("metrics.csv"), &self.metrics);
                }
                return Err(e);
            }
            if self.is_done() {
                break;
            }
            let ckpt = self.checkpoint();
            if let Some(dir) = &out_dir {
                let name = format!("{}.ckpt", self.phase_spec().name);
                checkpoint::save_checkpoint(&ckpt, &dir.join(name))?;
            }
            phase_checkpoints.push(ckpt);
            self.advance_phase()?;
        }
        let summary = self.summary()?;
        let final_checkpoint = self.checkpoint();
        if let Some(dir) = &out_dir {
            write_metrics(&dir.join("metrics.csv"), &self.metrics)?;
            checkpoint::save_checkpoint(&final_checkpoint, &dir.join("final.ckpt"))?;
            let json = serde_json::to_string_pretty(&summary)?;
            let path = dir.join("summary.json");
            std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        }
        Ok(RunOutcome {
            summary,
            metrics: self.metrics,
            final_checkpoint,
            phase_checkpoints,
            net: self.net,
        })
    }
}

fn phase_summaries(metrics: &[String]) -> Vec<PhaseSummary> {
    let Some(header) = metrics.first() else {
        return Vec::new();
    };
    let col = |name: &str| header.split(',').position(|h| h == name);
    let (Some(ph), Some(ff), Some(c2i), Some(lit)) =
        (col("phase"), col("ff_ratio_mean"), col("c2i_ratio"), col("c2i_literal"))
    else {
        return Vec::new();
    };
    let mut out: Vec<PhaseSummary> = Vec::new();
    for row in &metrics[1..] {
        let f: Vec<&str> = row.split(',').collect();
        let parse = |i: usize| f.get(i).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN);
        let s = PhaseSummary {
            phase: f.get(ph).copied().unwrap_or("").to_owned(),
            ff_ratio_mean: parse(ff),
            c2i_ratio: parse(c2i),
            c2i_literal: parse(lit),
        };
        match out.last_mut() {
            Some(last) if last.phase == s.phase => *last = s,
            _ => out.push(s),
        }
    }
    out
}

pub fn write_metrics(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains `config` to completion.
pub fn train(config: TrainingConfig) -> Result<RunOutcome> {
    Trainer::new(config)?.run()
}

/// Learning rates of the accuracy-vs-learning-rate sweep.
pub fn default_lr_grid(kind: OptimizerKind) -> Vec<f64> {
    match kind {
        OptimizerKind::Adam => vec![0.0005, 0.0025, 0.01, 0.05],
        OptimizerKind::Sgd => vec![0.02, 0.1, 0.5],
        k => vec![OptimizerConfig::training_defaults(k).lr],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub seed: u64,
    pub final_train_acc: f64,
    pub final_val_acc: f64,
    pub ff_ratio_mean: f64,
    pub final_c2i: f64,
    pub saturation_first: f64,
    pub saturation_mean: f64,
    pub first_layer_cam_min: f64,
    pub first_layer_sdam: f64,
}

impl ComparisonRow {
    pub const HEADER: &'static str = "optimizer,lr,seed,final_train_acc,final_val_acc,ff_ratio_mean,final_c2i,\
saturation_first,saturation_mean,first_layer_cam_min,first_layer_sdam";

    fn from_summary(s: &RunSummary) -> Self {
        let sat = &s.final_saturation;
        Self {
            optimizer: s.optimizer,
            lr: s.lr,
            seed: s.seed,
            final_train_acc: s.final_train_acc,
            final_val_acc: s.final_val_acc,
            ff_ratio_mean: s.ff_ratio_mean,
            final_c2i: s.final_c2i,
            saturation_first: sat.first().copied().unwrap_or(f64::NAN),
            saturation_mean: sat.iter().sum::<f64>() / sat.len().max(1) as f64,
            first_layer_cam_min: s.first_layer_cam_min,
            first_layer_sdam: s.first_layer_sdam,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.9e},{:.9},{:.6},{:.6},{:.9e},{:.9e}",
            self.optimizer,
            self.lr,
            self.seed,
            self.final_train_acc,
            self.final_val_acc,
            self.ff_ratio_mean,
            self.final_c2i,
            self.saturation_first,
            self.saturation_mean,
            self.first_layer_cam_min,
            self.first_layer_sdam
        )
    }
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from(ComparisonRow::HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Trains `config` once per `(optimizer, lr)` pair with identical seed and
/// data order. Run `i` writes into `<output_dir>/<i>_<optimizer>_lr<lr>/`.
pub fn compare_optimizers(config: &TrainingConfig, runs: &[(OptimizerKind, f64)]) -> Result<Vec<ComparisonRow>> {
    if runs.len() < 2 {
        return Err(Error::Config("compare needs at least two optimizer runs".into()));
    }
    let mut rows = Vec::with_capacity(runs.len());
    for (i, &(kind, lr)) in runs.iter().enumerate() {
        let mut c = config.clone();
        let mut opt = OptimizerConfig::training_defaults(kind).with_lr(lr);
        opt.decoupled = config.optimizer.decoupled;
        c.optimizer = opt;
        c.output_dir = config
            .output_dir
            .as_ref()
            .map(|d| d.join(format!("{i:02}_{kind}_lr{lr}")));
        rows.push(ComparisonRow::from_summary(&train(c)?.summary));
    }
    if let Some(dir) = &config.output_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path: PathBuf = dir.join("comparison.csv");
        std::fs::write(&path, comparison_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(rows)
}

/// Every optimizer paired with its default learning rate, or with each rate
/// of its sweep grid when `sweep` is set.
pub fn comparison_runs(kinds: &[OptimizerKind], sweep: bool) -> Vec<(OptimizerKind, f64)> {
    kinds
        .iter()
        .flat_map(|&k| {
            if sweep {
                default_lr_grid(k)
            } else {
                vec![OptimizerConfig::training_defaults(k).lr]
            }
            .into_iter()
            .map(move |lr| (k, lr))
        })
        .collect()
}
