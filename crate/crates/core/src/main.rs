use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use binopt::checkpoint::load_checkpoint;
use binopt::config::TrainingConfig;
use binopt::diagnostics;
use binopt::landscape::{self, SaturationModel, SurfaceKind, ToyLandscape};
use binopt::optim::OptimizerKind;
use binopt::train::{self, comparison_csv, comparison_runs, Trainer};
use binopt::{Error, Result};

#[derive(Parser)]
#[command(name = "binopt", version, about = "Binary neural network optimization lab")]
struct Cli {
    /// Output directory for every artifact.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LandscapeMode {
    Toy,
    Surface,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the same configuration with several optimizers.
    CompareOptimizers {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated optimizer names.
        #[arg(long, value_delimiter = ',', default_value = "adam,sgd")]
        opt: Vec<OptimizerKind>,
        /// Run each optimizer over its learning-rate grid.
        #[arg(long)]
        sweep: bool,
    },
    /// Toy two-node landscape: trajectories or loss surfaces.
    Landscape {
        #[arg(long, value_enum)]
        mode: LandscapeMode,
        #[arg(long, value_delimiter = ',', default_value = "adam,sgd")]
        opt: Vec<OptimizerKind>,
        #[arg(long, default_value_t = -2.5, allow_hyphen_values = true)]
        start_x: f64,
        #[arg(long, default_value_t = 0.5, allow_hyphen_values = true)]
        start_y: f64,
        #[arg(long, default_value_t = 5000)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        kappa: f64,
        #[arg(long, default_value_t = 2.0, allow_hyphen_values = true)]
        target: f64,
        /// Saturated coordinates get the full gradient with probability κ
        /// instead of κ times the gradient on every step.
        #[arg(long)]
        bernoulli: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Surface kind for `--mode surface`.
        #[arg(long, default_value = "surrogate")]
        kind: String,
        #[arg(long, default_value_t = 81)]
        resolution: usize,
        #[arg(long, default_value_t = 2.0)]
        range: f64,
    },
    /// Filter-normalized 2D loss slice around a checkpoint.
    Slice {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config whose dataset provides the evaluation batch.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 21)]
        resolution: usize,
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Weight diagnostics of a checkpoint.
    Metrics {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_owned(),
        source: e,
    })
}

fn load_config(path: &Path, out: &Path) -> Result<TrainingConfig> {
    let mut c = TrainingConfig::load(path)?;
    c.apply_env()?;
    c.output_dir = Some(out.to_owned());
    Ok(c)
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.out;
    match cli.command {
        Command::Train { config, resume } => {
            let c = load_config(&config, &out)?;
            let trainer = match resume {
                Some(p) => Trainer::resume(c, load_checkpoint(&p)?)?,
                None => Trainer::new(c)?,
            };
            let outcome = trainer.run()?;
            println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
        }
        Command::CompareOptimizers { config, opt, sweep } => {
            let c = load_config(&config, &out)?;
            let rows = train::compare_optimizers(&c, &comparison_runs(&opt, sweep))?;
            print!("{}", comparison_csv(&rows));
        }
        Command::Landscape {
            mode,
            opt,
            start_x,
            start_y,
            steps,
            kappa,
            target,
            bernoulli,
            seed,
            kind,
            resolution,
            range,
        } => {
            let mut toy = ToyLandscape::new(target, kappa)?;
            if bernoulli {
                toy.saturation = SaturationModel::Bernoulli;
            }
            create_dir(&out)?;
            match mode {
                LandscapeMode::Toy => {
                    for k in opt {
                        let lr = landscape::toy_default_lr(k);
                        let t = landscape::simulate(&toy, k, (start_x, start_y), steps, lr, seed)?;
                        let path = out.join(format!("trajectory_{k}.csv"));
                        write(&path, &t.to_csv())?;
                        let e = t.end();
                        println!(
                            "{k}: lr={lr} final=({:.6}, {:.6}) loss={:.3e} |dx|/|dy|={:.4}",
                            e.x,
                            e.y,
                            e.loss,
                            t.displacement_ratio()
                        );
                    }
                }
                LandscapeMode::Surface => {
                    let kind = match kind.as_str() {
                        "discrete" => SurfaceKind::Discrete,
                        "surrogate" => SurfaceKind::Surrogate,
                        other => return Err(Error::Config(format!("unknown surface kind {other:?}"))),
                    };
                    let g = landscape::surface_grid(&toy, kind, (-range, range), resolution)?;
                    let path = out.join(format!("surface_{kind:?}.csv").to_lowercase());
                    write(&path, &g.to_csv())?;
                    println!("wrote {}", path.display());
                }
            }
        }
        Command::Slice {
            checkpoint,
            config,
            resolution,
            radius,
            batch,
            seed,
        } => {
            let c = load_config(&config, &out)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let data = c.dataset.load()?;
            ckpt.verify_arch(&train::effective_arch(&c, &data))?;
            let mut net = train::network_from_checkpoint(&ckpt)?;
            let (x, y) = data.head(batch)?;
            let g = landscape::loss_slice(&mut net, &x, &y, resolution, radius, seed)?;
            create_dir(&out)?;
            let path = out.join("slice.csv");
            write(&path, &g.to_csv())?;
            println!(
                "wrote {} (total variation {:.6e})",
                path.display(),
                g.total_variation()
            );
        }
        Command::Metrics { checkpoint } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let net = train::network_from_checkpoint(&ckpt)?;
            let weights = net.binary_weights();
            let cams: Vec<Vec<f64>> = weights.iter().map(|w| diagnostics::cam(w)).collect();
            let sdams = cams
                .iter()
                .map(|c| diagnostics::sdam(c))
                .collect::<Result<Vec<_>>>()?;
            let report = serde_json::json!({
                "iteration": ckpt.progress.iteration,
                "phase": ckpt.progress.phase,
                "c2i_ratio": diagnostics::c2i_ratio(&ckpt.snapshot, &weights)?,
                "c2i_literal": diagnostics::c2i_literal(&ckpt.snapshot, &weights)?,
                "ff_ratio_mean": ckpt.progress.flips.mean(),
                "cam": cams,
                "sdam": sdams,
                "weight_histogram": diagnostics::weight_histogram(&weights).counts,
            });
            let text = serde_json::to_string_pretty(&report)?;
            create_dir(&out)?;
            write(&out.join("checkpoint_metrics.json"), &text)?;
            println!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
