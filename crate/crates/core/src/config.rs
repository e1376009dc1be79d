//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::WeightGradMode;
use crate::binary::BinarizeConfig;
use crate::data::{self, Dataset, SynthKind};
use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::optim::OptimizerConfig;

pub const SEED_ENV: &str = "BINOPT_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DatasetConfig {
    IdxFiles {
        images: PathBuf,
        labels: PathBuf,
    },
    Synthetic {
        kind: SynthKind,
        /// Samples per class.
        n: usize,
        noise: f64,
        seed: u64,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_image_size")]
        image_size: usize,
    },
}

fn default_classes() -> usize {
    4
}

fn default_image_size() -> usize {
    8
}

impl DatasetConfig {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetConfig::IdxFiles { images, labels } => data::load_idx(images, labels),
            DatasetConfig::Synthetic {
                kind,
                n,
                noise,
                seed,
                classes,
                image_size,
            } => data::synth_dataset(*kind, *n, *classes, *noise, *image_size, *seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TwoStepOrder {
    /// Binarize activations first, then weights.
    #[serde(rename = "BABW")]
    Babw,
    /// Binarize weights first, then activations.
    #[serde(rename = "BWBA")]
    Bwba,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PhasesConfig {
    OneStep {
        weight_decay: f64,
    },
    TwoStep {
        order: TwoStepOrder,
        step1_wd: f64,
        step2_wd: f64,
        step1_iters: usize,
        step2_iters: usize,
    },
}

/// One training phase after expanding [`PhasesConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseSpec {
    pub name: &'static str,
    pub binarize: BinarizeConfig,
    pub weight_decay: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub arch: ArchConfig,
    /// Optimizer kind and hyperparameters. Its `weight_decay` is replaced by
    /// the active phase's value.
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub weight_grad_mode: WeightGradMode,
    /// Iterations of a one-step run; two-step runs use their per-step counts.
    pub iterations: usize,
    pub batch_size: usize,
    pub phases: PhasesConfig,
    pub seed: u64,
    #[serde(default = "default_log_interval")]
    pub log_interval: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_log_interval() -> usize {
    100
}

fn default_val_fraction() -> f64 {
    0.1
}

impl TrainingConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Replaces the seed with `BINOPT_SEED` when that variable is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log_interval must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        self.arch.validate()?;
        self.optimizer.validate()?;
        match self.phases {
            PhasesConfig::OneStep { weight_decay } => {
                if self.iterations == 0 {
                    return Err(Error::Config("iterations must be positive".into()));
                }
                check_wd(weight_decay)?;
            }
            PhasesConfig::TwoStep {
                step1_wd,
                step2_wd,
                step1_iters,
                step2_iters,
                ..
            } => {
                if step1_iters == 0 || step2_iters == 0 {
                    return Err(Error::Config("two-step iteration counts must be positive".into()));
                }
                check_wd(step1_wd)?;
                check_wd(step2_wd)?;
            }
        }
        Ok(())
    }

    pub fn phase_specs(&self) -> Vec<PhaseSpec> {
        let mode = self.weight_grad_mode;
        let cfg = |w: bool, a: bool| BinarizeConfig {
            binarize_weights: w,
            binarize_activations: a,
            weight_grad_mode: mode,
        };
        match self.phases {
            PhasesConfig::OneStep { weight_decay } => vec![PhaseSpec {
                name: "one_step",
                binarize: cfg(true, true),
                weight_decay,
                iterations: self.iterations,
            }],
            PhasesConfig::TwoStep {
                order,
                step1_wd,
                step2_wd,
                step1_iters,
                step2_iters,
            } => {
                let first = match order {
                    TwoStepOrder::Babw => cfg(false, true),
                    TwoStepOrder::Bwba => cfg(true, false),
                };
                vec![
                    PhaseSpec {
                        name: "step1",
                        binarize: first,
                        weight_decay: step1_wd,
                        iterations: step1_iters,
                    },
                    PhaseSpec {
                        name: "step2",
                        binarize: cfg(true, true),
                        weight_decay: step2_wd,
                        iterations: step2_iters,
                    },
                ]
            }
        }
    }

    pub fn total_iterations(&self) -> usize {
        self.phase_specs().iter().map(|p| p.iterations).sum()
    }
}

fn check_wd(wd: f64) -> Result<()> {
    if wd.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("weight decay must be finite, got {wd}")))
    }
}
