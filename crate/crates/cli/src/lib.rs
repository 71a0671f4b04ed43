//! Command-line front end: `train`, `eval`, `ablate`, `gradcheck`, `export`.
//!
//! Settings come from a `key=value` config file, then `--set key=value`
//! overrides, then the dedicated flags. The resolved config is written into
//! every run directory.

pub mod ablation;
pub mod commands;
pub mod config;
pub mod rundir;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ibt_core::{IbtError, Result};

use crate::commands::Scope;
use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "ibt", version, about = "Inductive-bias transformer for point clouds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// key=value config file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Neighbors per point.
    #[arg(long)]
    pub k: Option<usize>,
}

impl ConfigArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut pairs = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| IbtError::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut flag = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        };
        flag("seed", self.seed.map(|v| v.to_string()));
        flag("task", self.task.clone());
        flag("name", self.name.clone());
        flag("output_dir", self.output_dir.as_ref().map(|p| p.display().to_string()));
        flag("train.epochs", self.epochs.map(|v| v.to_string()));
        flag("train.batch_size", self.batch_size.map(|v| v.to_string()));
        flag("train.lr", self.lr.map(|v| v.to_string()));
        flag("model.k", self.k.map(|v| v.to_string()));
        Ok(pairs)
    }

    pub fn resolve(&self, fallback: Option<&Path>) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref().or(fallback), &self.overrides()?)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints, metrics.json and loss.csv.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Use this directory instead of a timestamped one.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the configured dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the config saved in the checkpoint's run directory.
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write the metrics as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train every cell of the ablation grid and tabulate the results.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 1)]
        reps: usize,
        /// Worker threads; results do not depend on this.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, default_value = "model")]
        scope: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Append a check of a deliberately wrong backward rule.
        #[arg(long)]
        inject_fault: bool,
        /// Directory for report.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment one cloud and write a colored PLY.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        /// .xyz or .off cloud.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Object category, as an index or a class name.
        #[arg(long, default_value = "0")]
        category: String,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// 2 config, 3 data or I/O, 4 numeric failure, 1 anything else.
pub fn exit_code(err: &IbtError) -> i32 {
    match err {
        IbtError::Config(_) => 2,
        IbtError::Data(_)
        | IbtError::Parse { .. }
        | IbtError::Io { .. }
        | IbtError::Checkpoint(_)
        | IbtError::Domain(_)
        | IbtError::Index(_) => 3,
        IbtError::Numeric(_) | IbtError::Diverged { .. } => 4,
        _ => 1,
    }
}

pub fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Train { config, run_dir } => {
            let cfg = config.resolve(None)?;
            Ok(commands::train_cmd(&cfg, run_dir.as_deref())?.0)
        }
        Command::Eval {
            checkpoint,
            config,
            split,
            json,
        } => {
            let saved = rundir::config_for_checkpoint(&checkpoint);
            if config.config.is_none() && saved.is_none() {
                return Err(IbtError::Config(format!(
                    "no run config found next to {}; pass --config",
                    checkpoint.display()
                )));
            }
            let cfg = config.resolve(saved.as_deref())?;
            Ok(commands::eval_cmd(&cfg, &checkpoint, &split, json.as_deref())?.0)
        }
        Command::Ablate {
            config,
            reps,
            jobs,
            run_dir,
        } => {
            let cfg = config.resolve(None)?;
            Ok(commands::ablate_cmd(&cfg, reps, jobs, run_dir.as_deref())?.0)
        }
        Command::Gradcheck {
            scope,
            seed,
            inject_fault,
            out,
        } => Ok(commands::gradcheck_cmd(scope.parse::<Scope>()?, seed, inject_fault, out.as_deref())?.0),
        Command::Export {
            checkpoint,
            input,
            output,
            category,
            config,
        } => {
            let saved = rundir::config_for_checkpoint(&checkpoint);
            let cfg = match (&config.config, &saved) {
                (None, None) if config.set.is_empty() => None,
                _ => Some(config.resolve(saved.as_deref())?),
            };
            Ok(commands::export_cmd(&checkpoint, &input, &output, &category, cfg.as_ref())?.0)
        }
    }
}

/// Parses `args` and runs the command, returning the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
