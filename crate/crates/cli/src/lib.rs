//! Config-driven experiment driver for the dual-encoder video model.
//!
//! Every command is fully determined by an INI file and a seed; see
//! [`config`] for the format and [`commands`] for what each verb writes.

pub mod commands;
pub mod config;
mod error;
pub mod ini;
pub mod record;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::ExperimentConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "dist", version, about = "Train and analyse a frozen-image-encoder video model on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the spatial encoder on shape images.
    Pretrain(RunArgs),
    /// Train the temporal encoder, integration branch and head.
    Train(RunArgs),
    /// Evaluate trained weights on the validation split.
    Eval(RunArgs),
    /// Train every variant of the [ablate] grid.
    Ablate(RunArgs),
    /// Write cost, CKA and feature-magnitude reports.
    Analyze(RunArgs),
}

#[derive(Debug, Clone, clap::Args)]
pub struct RunArgs {
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Overrides [run] seed.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Overrides [run] out.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Pretrained spatial encoder archive (train, ablate).
    #[arg(long, value_name = "PATH")]
    pub spatial_weights: Option<PathBuf>,
    /// Overrides [run] cache.
    #[arg(long, value_name = "DIR")]
    pub cache: Option<PathBuf>,
    /// Trained model archive (eval, analyze); defaults to <out>/model.dtn.
    #[arg(long, value_name = "PATH")]
    pub weights: Option<PathBuf>,
}

impl RunArgs {
    /// The config file with command-line overrides applied.
    pub fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::from_file(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.run.out = out.clone();
        }
        if let Some(cache) = &self.cache {
            cfg.run.cache = Some(cache.clone());
        }
        Ok(cfg)
    }

    fn spatial_weights(&self) -> Result<&PathBuf, CliError> {
        self.spatial_weights
            .as_ref()
            .ok_or_else(|| CliError::config("this command needs --spatial-weights PATH"))
    }

    fn weights(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.weights.clone().unwrap_or_else(|| cfg.run.out.join(commands::MODEL_ARCHIVE))
    }
}

/// Runs one command and prints a short summary to stdout.
pub fn run(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Pretrain(a) => {
            let cfg = a.load()?;
            let rec = commands::cmd_pretrain(&cfg)?;
            let acc = rec.metrics.last().map_or(f64::NAN, |m| m.acc);
            println!("pretrain: train acc {acc:.4}, weights {}", rec.weights_hash);
        }
        Command::Train(a) => {
            let cfg = a.load()?;
            let rec = commands::cmd_train(&cfg, a.spatial_weights()?)?;
            let acc = rec.metrics.iter().rev().find(|m| m.split == "val").map_or(f64::NAN, |m| m.acc);
            println!("train: val acc {acc:.4}, weights {}", rec.weights_hash);
        }
        Command::Eval(a) => {
            let cfg = a.load()?;
            let r = commands::cmd_eval(&cfg, &a.weights(&cfg))?;
            println!("eval: val loss {:.4}, acc {:.4}", r.loss, r.acc);
        }
        Command::Ablate(a) => {
            let cfg = a.load()?;
            let rows = commands::cmd_ablate(&cfg, a.spatial_weights()?)?;
            print!("{}", commands::ablate_csv(&rows));
        }
        Command::Analyze(a) => {
            let cfg = a.load()?;
            let r = commands::cmd_analyze(&cfg, &a.weights(&cfg))?;
            print!("{}", dist_core::analysis::cka_csv(&r.cka));
            print!("{}", commands::motion_csv(&r.motion));
        }
    }
    Ok(())
}
