use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pfenet_cli::commands::{self, AblateOpts, GridKind};
use pfenet_cli::config::{Overrides, RunConfig, Variant};
use pfenet_cli::error::Result;

/// Few-shot segmentation workbench: synthetic episodes, training-free
/// prior masks and multi-scale feature enrichment.
#[derive(Parser)]
#[command(name = "pfenet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Cross-validation fold index (0..=3).
    #[arg(long)]
    fold: Option<usize>,
    /// Fold scheme: contiguous | strided.
    #[arg(long)]
    scheme: Option<String>,
    /// Output directory.
    #[arg(long)]
    output: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        Overrides {
            seed: self.seed,
            fold: self.fold,
            scheme: self.scheme.clone(),
            output: self.output.clone(),
            ..Overrides::default()
        }
        .apply(&mut config);
        commands::validate_config(&config)?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset tree (PPM images, PGM masks).
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the backbone on base classes and write its weights.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Train one ablation arm episodically; writes checkpoint + loss CSV.
    Train {
        #[command(flatten)]
        common: Common,
        /// Ablation arm: baseline | prior | fem | full.
        #[arg(long, default_value = "full")]
        variant: String,
        /// Training iterations (one episode per iteration).
        #[arg(long)]
        max_iter: Option<usize>,
        /// Shots per training episode.
        #[arg(long)]
        shot: Option<usize>,
    },
    /// Evaluate a checkpoint on the test fold; writes a metrics CSV.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Support shots per episode (1 or 5 in the standard protocol).
        #[arg(long)]
        shot: Option<usize>,
        /// Episodes per evaluation run.
        #[arg(long)]
        episodes: Option<usize>,
        /// Repeated runs with distinct seeds (adds mean/std columns).
        #[arg(long)]
        repeat: Option<usize>,
    },
    /// Export one episode's query, support and prior mask as images.
    Prior {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to take the backbone from (otherwise pretrain/load).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Episode id within the evaluation stream.
        #[arg(long, default_value_t = 0)]
        episode: usize,
        /// Support shots per episode.
        #[arg(long)]
        shot: Option<usize>,
    },
    /// Run an ablation grid and write one combined CSV.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Grid: variants | paths | scales | all.
        #[arg(long, default_value = "variants")]
        grid: String,
        /// Folds to run (repeatable).
        #[arg(long)]
        folds: Vec<usize>,
        /// Seeds per (fold, arm) cell.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Episodes per evaluation.
        #[arg(long)]
        episodes: Option<usize>,
        /// Training iterations per arm.
        #[arg(long)]
        max_iter: Option<usize>,
    },
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Generate { common } => {
            let config = common.resolve()?;
            let dir = commands::cmd_generate(&config)?;
            println!("dataset written to {}", dir.display());
        }
        Command::Pretrain { common } => {
            let config = common.resolve()?;
            let (path, report) = commands::cmd_pretrain(&config)?;
            match report {
                Some(r) => println!(
                    "backbone written to {} (holdout loss {:.4} -> {:.4}, pixel acc {:.3} vs majority {:.3})",
                    path.display(),
                    r.initial_loss,
                    r.final_loss,
                    r.pixel_accuracy,
                    r.majority_baseline
                ),
                None => println!("backbone already present at {}", path.display()),
            }
        }
        Command::Train {
            common,
            variant,
            max_iter,
            shot,
        } => {
            let mut config = common.resolve()?;
            Overrides {
                max_iter,
                shot,
                ..Overrides::default()
            }
            .apply(&mut config);
            let variant = Variant::parse(&variant)?;
            let out = commands::cmd_train(&config, variant)?;
            let last = out.report.rows.last().map(|r| r.loss).unwrap_or(f64::NAN);
            println!(
                "checkpoint {} written ({} iterations, final loss {last:.4})",
                out.checkpoint.display(),
                out.report.rows.len()
            );
        }
        Command::Eval {
            common,
            checkpoint,
            shot,
            episodes,
            repeat,
        } => {
            let mut config = common.resolve()?;
            Overrides {
                shot,
                episodes,
                repeat,
                ..Overrides::default()
            }
            .apply(&mut config);
            let out = commands::cmd_eval(&config, &checkpoint)?;
            println!(
                "mIoU {:.4} (std {:.4} over {} runs), report at {}",
                out.miou_mean,
                out.miou_std,
                out.rows.len(),
                out.csv.display()
            );
        }
        Command::Prior {
            common,
            checkpoint,
            episode,
            shot,
        } => {
            let mut config = common.resolve()?;
            Overrides {
                shot,
                ..Overrides::default()
            }
            .apply(&mut config);
            let out = commands::cmd_prior(&config, checkpoint.as_deref(), episode)?;
            println!(
                "wrote {}, {}, {}",
                out.query_ppm.display(),
                out.support_ppm.display(),
                out.prior_pgm.display()
            );
        }
        Command::Ablate {
            common,
            grid,
            folds,
            seeds,
            episodes,
            max_iter,
        } => {
            let mut config = common.resolve()?;
            Overrides {
                episodes,
                max_iter,
                ..Overrides::default()
            }
            .apply(&mut config);
            let opts = AblateOpts {
                grid: GridKind::parse(&grid)?,
                folds: if folds.is_empty() {
                    vec![0, 1, 2, 3]
                } else {
                    folds
                },
                seeds,
            };
            let out = commands::cmd_ablate(&config, &opts)?;
            println!("{} rows written to {}", out.rows.len(), out.csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
