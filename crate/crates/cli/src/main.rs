//! `lmf`: generate the benchmark, train and refine layered fields, render
//! masks and score them.
//!
//! Configuration is layered: benchmark defaults, then the workspace's
//! `config.txt` (or `--config`), then `--set key=value`, then dedicated
//! flags. Exit codes: 0 success, 2 configuration error, 3 missing input,
//! 4 numerical failure (non-finite loss, parameters or render), 1 anything
//! else.

mod commands;
mod workspace;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use lmf_core::config::RunConfig;
use lmf_core::Error;

use commands::{EvalSource, Resolved};
use workspace::Workspace;

#[derive(Parser)]
#[command(name = "lmf", version, about = "Layered motion fusion for dynamic radiance fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write frames, ground-truth masks, pseudo-masks and cameras.
    Generate(Common),
    /// Train a layered field from scratch.
    Train(Common),
    /// Refine the semi-static and dynamic layers on selected frames.
    Refine {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to refine (default: the latest trained one).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render colours, uncertainty and layer masks at the evaluation frames.
    Render {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to render (default: the latest trained or refined one).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score rendered or external masks and print the summary table.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory of external `ss_TTT.pgm` / `dyn_TTT.pgm` predictions.
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        /// Render masks from this checkpoint instead of reading renders.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Row label for external predictions or a checkpoint.
        #[arg(long)]
        label: Option<String>,
    },
    /// generate, train, refine, render both models and eval in one go.
    Run(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "lmf-workspace")]
    workspace: PathBuf,
    #[arg(long)]
    seed: Option<String>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<String>,
    /// Frames to refine on and evaluate, e.g. "3,9,15".
    #[arg(long)]
    frames: Option<String>,
    /// Neighbour window around each refinement frame.
    #[arg(long)]
    neighbors: Option<String>,
    /// Loss terms, e.g. "rgb,pmf,nmf".
    #[arg(long)]
    losses: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long = "lambda-pmf")]
    lambda_pmf: Option<String>,
    #[arg(long = "lambda-nmf")]
    lambda_nmf: Option<String>,
    /// Pseudo-mask binarization threshold.
    #[arg(long)]
    threshold: Option<String>,
    /// Any configuration key, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self, ws: &Workspace) -> Result<Resolved> {
        let (mut cfg, config_file) = match &self.config {
            Some(p) => (read_config(p)?, Some(p.clone())),
            None if ws.config().exists() => (read_config(&ws.config())?, None),
            None => (RunConfig::bench(), None),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let flags = [
            ("seed", &self.seed),
            ("workers", &self.workers),
            ("frames", &self.frames),
            ("neighbors", &self.neighbors),
            ("losses", &self.losses),
            ("epochs", &self.epochs),
            ("lr", &self.lr),
            ("lambda_pmf", &self.lambda_pmf),
            ("lambda_nmf", &self.lambda_nmf),
            ("threshold", &self.threshold),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(Resolved { cfg, config_file })
    }
}

fn read_config(path: &Path) -> Result<RunConfig> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()).into());
    }
    Ok(RunConfig::parse(&std::fs::read_to_string(path)?)?)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::UnknownKey(_) => 2,
                Error::Missing(_) => 3,
                Error::NonFinite { .. } | Error::Render { .. } | Error::Pixel { .. } => 4,
                _ => 1,
            };
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let ws = Workspace::new(&c.workspace);
            commands::generate(&ws, &c.resolve(&ws)?)
        }
        Command::Train(c) => {
            let ws = Workspace::new(&c.workspace);
            commands::train_cmd(&ws, &c.resolve(&ws)?).map(drop)
        }
        Command::Refine { common, checkpoint } => {
            let ws = Workspace::new(&common.workspace);
            commands::refine_cmd(&ws, &common.resolve(&ws)?, checkpoint.as_deref()).map(drop)
        }
        Command::Render { common, checkpoint } => {
            let ws = Workspace::new(&common.workspace);
            commands::render_cmd(&ws, &common.resolve(&ws)?, checkpoint.as_deref()).map(drop)
        }
        Command::Eval {
            common,
            predictions,
            checkpoint,
            label,
        } => {
            let ws = Workspace::new(&common.workspace);
            let src = EvalSource {
                predictions,
                checkpoint,
                label,
            };
            commands::eval_cmd(&ws, &common.resolve(&ws)?, &src).map(drop)
        }
        Command::Run(c) => {
            let ws = Workspace::new(&c.workspace);
            let r = c.resolve(&ws)?;
            commands::generate(&ws, &r)?;
            let trained = commands::train_cmd(&ws, &r)?;
            let refined = commands::refine_cmd(&ws, &r, Some(&trained))?;
            commands::render_cmd(&ws, &r, Some(&trained))?;
            commands::render_cmd(&ws, &r, Some(&refined))?;
            let src = EvalSource {
                predictions: None,
                checkpoint: None,
                label: None,
            };
            commands::eval_cmd(&ws, &r, &src).map(drop)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn exit_codes_follow_the_error_kind() {
        let wrap = |e: Error| Err::<(), _>(e).context("while running").unwrap_err();
        assert_eq!(exit_code(&wrap(Error::UnknownKey("x".into()))), 2);
        assert_eq!(exit_code(&wrap(Error::Config("x".into()))), 2);
        assert_eq!(exit_code(&wrap(Error::Missing("a/b".into()))), 3);
        assert_eq!(exit_code(&wrap(Error::NonFinite { block: "semi.grids".into() })), 4);
        let render = Error::Render { sample: 0, message: "nan".into() };
        assert_eq!(exit_code(&wrap(Error::Pixel { x: 1, y: 2, source: Box::new(render) })), 4);
        assert_eq!(exit_code(&wrap(Error::Data("x".into()))), 1);
        assert_eq!(exit_code(&anyhow::anyhow!("plain")), 1);
    }
}
