//! Command-line front end: `synth`, `train`, `eval`, `probe`, `ablate` and
//! `sweep`, driven by a strict TOML config.
//!
//! Exit codes: 0 on success, 1 on internal failure, 2 on usage or
//! configuration errors.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{
    ablate, eval, load_data, probe, sweep, synth, train, EvalReport, CHECKPOINT, LOG, MANIFEST, TIMINGS,
};
pub use config::{AblateSection, AbmilSection, Arch, RunConfig, SweepSection, RESOLVED_CONFIG};

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "srmil", version, about = "Spatially regularized multiple-instance learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run config; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Run seed, overriding the config.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Allow `synth` to write into a non-empty directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Model checkpoint for `eval` and `probe`.
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with train/val/test splits.
    Synth,
    /// Train a model and keep the best validation checkpoint.
    Train,
    /// Score a checkpoint on the validation and test splits.
    Eval,
    /// Instance-level KNN probe and attention-skew report.
    Probe,
    /// Loss-combination ablation grid.
    Ablate,
    /// Mask-ratio sweep.
    Sweep,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Argument(_) => EXIT_USAGE,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

/// Resolves the config and dispatches one command.
pub fn execute(cli: &Cli) -> crate::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    if let Some(ckpt) = &cli.checkpoint {
        cfg.checkpoint = Some(ckpt.clone());
    }
    cfg.validate()?;
    match cli.command {
        Command::Synth => synth(&mut cfg, cli.force).map(drop),
        Command::Train => train(&mut cfg).map(drop),
        Command::Eval => {
            let r = eval(&mut cfg)?;
            let auc = |a: Option<f64>| a.map_or("n/a".to_string(), |a| format!("{a:.4}"));
            println!("split,accuracy,auc,n");
            println!("val,{},{},{}", r.val.accuracy, auc(r.val.auc), r.val.n_samples);
            println!("test,{},{},{}", r.test.accuracy, auc(r.test.auc), r.test.n_samples);
            Ok(())
        }
        Command::Probe => probe(&mut cfg),
        Command::Ablate => ablate(&mut cfg).map(drop),
        Command::Sweep => sweep(&mut cfg).map(drop),
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
