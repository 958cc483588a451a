//! `dmpm`: train, sample and analyse discrete-state diffusion on `{0,1}^d`.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use dmpm::sampler::{SamplerKind, ScheduleKind};

use crate::commands::SampleSource;
use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "dmpm", version, about = "Discrete-state diffusion on the hypercube")]
struct Cli {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the data law and a sample file.
    GenData,
    /// Train the denoiser and write a checkpoint and loss log.
    Train {
        /// Continue from this checkpoint; step numbering carries on.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Draw samples with a trained model or the exact oracle.
    Sample {
        /// Use exact scores of the data law instead of a checkpoint.
        #[arg(long)]
        exact_oracle: bool,
        /// Checkpoint to load (default: the run's own checkpoint).
        #[arg(long, conflicts_with = "exact_oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        sampler: Option<SamplerKind>,
        /// Number of time steps K.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        schedule: Option<ScheduleKind>,
        /// Number of samples.
        #[arg(long)]
        n: Option<usize>,
        /// Early-stopping time.
        #[arg(long)]
        early_stop: Option<f64>,
        /// Dump path (default: <out>/samples/samples.txt).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare a sample dump with the data law.
    Eval {
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Evaluate even if the dump was produced for different data.
        #[arg(long)]
        allow_lineage_mismatch: bool,
    },
    /// Check the KL and early-stopping TV bounds on exactly solvable instances.
    ValidateBounds,
    /// Forward-process diagnostics at the given times.
    ForwardDiag {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.5, 1.0, 2.0, 3.0])]
        times: Vec<f64>,
    },
    /// Print the resolved configuration.
    ShowConfig,
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Command::Sample { sampler, steps, schedule, n, early_stop, .. } = &cli.command {
        if let Some(k) = sampler {
            cfg.sampler.kind = *k;
        }
        if let Some(k) = steps {
            cfg.sampler.steps = *k;
        }
        if let Some(s) = schedule {
            cfg.sampler.schedule = *s;
        }
        if let Some(n) = n {
            cfg.sampler.n = *n;
        }
        if let Some(e) = early_stop {
            cfg.sampler.early_stop = *e;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = resolve(&cli)?;
    match &cli.command {
        Command::GenData => commands::gen_data(&cfg)?,
        Command::Train { resume } => commands::train_cmd(&cfg, resume.as_deref())?,
        Command::Sample { exact_oracle, checkpoint, output, .. } => commands::sample_cmd(
            &cfg,
            SampleSource { exact_oracle: *exact_oracle, checkpoint: checkpoint.as_deref() },
            output.as_deref(),
        )?,
        Command::Eval { samples, allow_lineage_mismatch } => {
            commands::eval_cmd(&cfg, samples.as_deref(), *allow_lineage_mismatch)?
        }
        Command::ValidateBounds => {
            let violations = commands::validate_bounds(&cfg)?;
            if violations > 0 {
                eprintln!("{violations} bound violation(s)");
                return Ok(ExitCode::from(2));
            }
        }
        Command::ForwardDiag { times } => commands::forward_diag(&cfg, times)?,
        Command::ShowConfig => print!("{}", cfg.to_toml()),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
