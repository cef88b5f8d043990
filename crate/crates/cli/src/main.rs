use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lgcaa_core::commands;
use lgcaa_core::config::RunConfig;
use lgcaa_core::gradcheck::DEFAULT_TOLERANCE;

/// Diffusion super-resolution experiments on synthetic data.
#[derive(Parser)]
#[command(name = "lgcaa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options every run-producing subcommand accepts.
#[derive(Args)]
struct Common {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; runs go to <out>/<run_name>/<command>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate().context("invalid configuration")?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &RunConfig) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| PathBuf::from(&cfg.output_dir))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize HR/LR pairs and write them with a manifest.
    Degrade {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes a checkpoint and the loss log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset written by `degrade`; synthesized from the config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Upscale LR images (a .ppm file or a directory of them).
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint against HR targets and the bicubic baseline.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Perception-distortion sweep over sampling steps and seeds.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated step counts; defaults to the config.
        #[arg(long, value_delimiter = ',')]
        steps: Vec<usize>,
        /// Comma-separated sampler seeds; defaults to the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Train and score the attention and loss ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of every registered op.
    Gradcheck {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tol: f64,
    },
}

fn out_or_default(out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| PathBuf::from(RunConfig::default().output_dir))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Degrade { common } => {
            let cfg = common.load()?;
            let dir = commands::cmd_degrade(&cfg, &common.out_dir(&cfg), common.force)?;
            println!("{}", dir.display());
        }
        Command::Train { common, data } => {
            let cfg = common.load()?;
            let res =
                commands::cmd_train(&cfg, data.as_deref(), &common.out_dir(&cfg), common.force)?;
            println!(
                "{} (eval loss {:.5} -> {:.5})",
                res.checkpoint.display(),
                res.report.initial_eval.loss_total,
                res.report.final_eval.loss_total
            );
        }
        Command::Sample {
            checkpoint,
            input,
            steps,
            seed,
            out,
            force,
        } => {
            let dir = commands::cmd_sample(
                &checkpoint,
                &input,
                steps,
                seed,
                &out_or_default(out),
                force,
            )?;
            println!("{}", dir.display());
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            force,
        } => {
            let s = commands::cmd_eval(&checkpoint, data.as_deref(), &out_or_default(out), force)?;
            println!(
                "psnr {:.3} dB (bicubic {:.3} dB)  ssim {:.4} (bicubic {:.4})  latent W1 {:.5}",
                s.psnr_db, s.bicubic_psnr_db, s.ssim, s.bicubic_ssim, s.hist_w1
            );
        }
        Command::Sweep {
            checkpoint,
            data,
            steps,
            seeds,
            out,
            force,
        } => {
            let (dir, records) = commands::cmd_sweep(
                &checkpoint,
                data.as_deref(),
                &steps,
                &seeds,
                &out_or_default(out),
                force,
            )?;
            for r in &records {
                println!(
                    "steps={:<4} seed={:<3} psnr={:.3} dB perc={:.5}",
                    r.steps, r.seed, r.psnr_db, r.perc_dist
                );
            }
            println!("{}", dir.join("sweep.csv").display());
        }
        Command::Ablate { common, data } => {
            let cfg = common.load()?;
            let (dir, rows) =
                commands::cmd_ablate(&cfg, data.as_deref(), &common.out_dir(&cfg), common.force)?;
            for r in &rows {
                println!(
                    "{:<9} {:<13} psnr={:.3} dB ssim={:.4} W1={:.5}",
                    r.group, r.label, r.psnr_db, r.ssim, r.hist_w1
                );
            }
            println!("{}", dir.join("ablation.csv").display());
        }
        Command::Gradcheck { seeds, tol } => {
            let reports = commands::cmd_gradcheck(&seeds, tol)?;
            for r in &reports {
                println!("{r}");
            }
            let failed = reports.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                bail!("{failed} of {} gradient checks failed", reports.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
