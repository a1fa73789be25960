//! Argument parsing and verb dispatch.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::RawConfig;
use crate::experiment::{self, metrics_csv, ExperimentConfig, METRICS_FILE};
use crate::synth;
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "padis", version, about = "Patch diffusion priors for inverse problems at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory (default: `$PADIS_OUT/<verb>`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Checkpoint to read (reconstruct, generate, ablate) or write (train).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,

    /// Use a per-pixel Gaussian fitted to the training set instead of a network.
    #[arg(long, global = true)]
    pub oracle: bool,

    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic phantom dataset.
    Synth,
    /// Train the patch denoiser.
    Train,
    /// Solve the configured inverse problem on the test images.
    Reconstruct,
    /// Draw unconditional samples.
    Generate,
    /// Sweep one setting (`ablate.axis`) and tabulate the results.
    Ablate,
    /// Recompute PSNR/SSIM for a directory of `<id>_<method>` images.
    Metrics {
        /// Directory holding the images (default: `<out>/images`).
        dir: Option<PathBuf>,
    },
}

impl Command {
    fn verb(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Reconstruct => "reconstruct",
            Command::Generate => "generate",
            Command::Ablate => "ablate",
            Command::Metrics { .. } => "metrics",
        }
    }
}

/// Loads the config file and applies command-line overrides.
pub fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut raw = match &cli.config {
        Some(path) => RawConfig::load(path)?,
        None => RawConfig::default(),
    };
    let path_str = |p: &PathBuf| p.to_string_lossy().into_owned();
    if let Some(seed) = cli.seed {
        raw.set("seed", seed.to_string());
    }
    if let Some(out) = &cli.out {
        raw.set("out", path_str(out));
    }
    if let Some(ckpt) = &cli.checkpoint {
        raw.set("checkpoint", path_str(ckpt));
    }
    if cli.oracle {
        raw.set("oracle", "true");
    }
    if let Some(t) = cli.threads {
        raw.set("threads", t.to_string());
    }
    ExperimentConfig::from_raw(&raw)
}

/// Runs one verb and returns a short report for stdout.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = load_config(cli)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cfg.threads {
        if t == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        pool = pool.num_threads(t);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Config(format!("cannot start thread pool: {e}")))?;
    pool.install(|| dispatch(cli, &cfg))
}

fn dispatch(cli: &Cli, cfg: &ExperimentConfig) -> Result<String, CliError> {
    let out = cfg.out_dir(cli.command.verb());
    match &cli.command {
        Command::Synth => {
            synth::write_dataset(&out, &cfg.phantoms, cfg.data_seed, cfg.synth_count)?;
            Ok(format!("wrote {} phantoms to {}", cfg.synth_count, out.display()))
        }
        Command::Train => {
            let ckpt = experiment::train_model(cfg, &out, cfg.checkpoint.as_deref())?;
            Ok(format!(
                "trained {} steps ({} parameters); output in {}",
                ckpt.iterations,
                ckpt.raw.len(),
                out.display()
            ))
        }
        Command::Reconstruct => {
            let model = experiment::load_model(cfg)?;
            let summary = experiment::run_experiment(cfg, &model, &out)?;
            let mut report = metrics_csv(&summary.rows);
            if !summary.failures.is_empty() {
                return Err(CliError::Numerical(format!(
                    "{} run(s) aborted (see {}): {}",
                    summary.failures.len(),
                    out.join("failures.csv").display(),
                    summary.failures[0].2
                )));
            }
            report.insert_str(0, &format!("results in {}\n", out.display()));
            Ok(report)
        }
        Command::Generate => {
            let model = experiment::load_model(cfg)?;
            let samples = experiment::run_generate(cfg, &model, &out)?;
            Ok(format!("wrote {} samples to {}", samples.len(), out.display()))
        }
        Command::Ablate => {
            let axis = cfg
                .ablate_axis
                .ok_or_else(|| CliError::Config("ablate needs ablate.axis in the config".into()))?;
            let rows = experiment::ablate(cfg, axis, &out)?;
            Ok(format!("{} settings; table in {}", rows.len(), out.join(experiment::ABLATION_FILE).display()))
        }
        Command::Metrics { dir } => {
            let dir = dir.clone().unwrap_or_else(|| out.join("images"));
            let rows = experiment::metrics_for_dir(&dir)?;
            let csv = metrics_csv(&rows);
            let target = cfg.out.clone().unwrap_or(out).join(METRICS_FILE);
            if let Some(parent) = target.parent() {
                std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
            }
            std::fs::write(&target, &csv).map_err(|e| CliError::io(&target, e))?;
            Ok(csv)
        }
    }
}
