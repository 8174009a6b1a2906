//! `slp` command line. Arguments of the form `--section.key=value` are
//! config overrides; everything else goes to the verb parser.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use slp_core::scenegen::{Dataset, SceneSpec};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::HarnessError;
use crate::evaluate::evaluate;
use crate::sweep::{sweep, Axis};
use crate::train::{build_model, load_dataset, run_training};
use crate::visualize::visualize;

#[derive(Debug, Parser)]
#[command(name = "slp", about = "Slot attention with a spatial locality prior")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a sprite dataset file.
    GenData {
        /// `sprites-easy` or `sprites-tex`.
        #[arg(long, default_value = "sprites-tex")]
        preset: String,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 10_000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes log.jsonl and checkpoint.slpc to output.dir.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from a checkpoint written with the same settings.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on data.eval; writes a metrics report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report path (default: <output.dir>/metrics.txt).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-sample panels and the bias initialization as PNG.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate over a grid of settings and seeds.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Row axis, `section.key=v1,v2,...`.
        #[arg(long)]
        rows: String,
        /// Optional column axis.
        #[arg(long)]
        cols: Option<String>,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value = "fg_ari")]
        metric: String,
    },
}

/// Separates `--section.key=value` overrides from the remaining arguments.
pub fn split_overrides(args: &[String]) -> (Vec<String>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        match a.strip_prefix("--") {
            Some(body) if body.split_once('=').is_some_and(|(k, _)| k.contains('.')) => {
                overrides.push(body.to_string())
            }
            _ => rest.push(a.clone()),
        }
    }
    (rest, overrides)
}

/// Runs the CLI and returns the process exit code.
pub fn main_with_args(args: Vec<String>) -> i32 {
    let (rest, overrides) = split_overrides(&args);
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command, &overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn checkpoint_config(path: &Path, overrides: &[String]) -> Result<(Checkpoint, RunConfig), HarnessError> {
    let ckpt = Checkpoint::load(path)?;
    let config = ckpt.config.with_overrides(overrides)?;
    Ok((ckpt, config))
}

pub fn run(command: Command, overrides: &[String]) -> Result<(), HarnessError> {
    match command {
        Command::GenData {
            preset,
            image_size,
            count,
            seed,
            out,
        } => {
            if !overrides.is_empty() {
                return Err(HarnessError::Config("gen-data takes no config overrides".into()));
            }
            let spec = SceneSpec::preset(&preset, image_size, seed).map_err(|e| HarnessError::Config(e.to_string()))?;
            let ds = Dataset::generate(&spec, count)?;
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir)?;
            }
            ds.write(&out)?;
            println!("wrote {count} samples to {}", out.display());
        }
        Command::Train { config, resume } => {
            let config = RunConfig::load(config.as_deref(), overrides)?;
            let train = load_dataset(&config.data.train)?;
            let eval = if config.training.eval_interval > 0 {
                Some(load_dataset(&config.data.eval)?)
            } else {
                None
            };
            let ckpt = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let outcome = run_training(config, train, eval.as_ref(), ckpt.as_ref())?;
            println!(
                "trained to step {}; checkpoint {}",
                outcome.trainer.step,
                outcome.checkpoint_path.display()
            );
        }
        Command::Eval { checkpoint, out } => {
            let (ckpt, config) = checkpoint_config(&checkpoint, overrides)?;
            let ds = load_dataset(&config.data.eval)?;
            let (model, mut params) = build_model(&config, &ds)?;
            params
                .load_from(&ckpt.params)
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            let report = evaluate(
                &model,
                &params,
                &ds,
                config.eval.max_images,
                config.eval.batch_size,
                config.training.seed,
            )?;
            let out = out.unwrap_or_else(|| config.output.dir.join("metrics.txt"));
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(&out, report.to_text())?;
            print!("{}", report.to_text());
        }
        Command::Viz {
            checkpoint,
            samples,
            out,
        } => {
            let (ckpt, config) = checkpoint_config(&checkpoint, overrides)?;
            let ds = load_dataset(&config.data.eval)?;
            let (model, mut params) = build_model(&config, &ds)?;
            params
                .load_from(&ckpt.params)
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            let indices: Vec<usize> = (0..samples.min(ds.len())).collect();
            for p in visualize(&model, &params, &ds, &indices, &out, config.training.seed)? {
                println!("{}", p.display());
            }
        }
        Command::Sweep {
            config,
            rows,
            cols,
            seeds,
            metric,
        } => {
            let config = RunConfig::load(config.as_deref(), overrides)?;
            let rows = Axis::parse(&rows)?;
            let cols = cols.map(|c| Axis::parse(&c)).transpose()?;
            let train = load_dataset(&config.data.train)?;
            let eval = load_dataset(&config.data.eval)?;
            let table = sweep(&config, &rows, cols.as_ref(), seeds, &metric, &train, &eval)?;
            std::fs::create_dir_all(&config.output.dir)?;
            std::fs::write(config.output.dir.join("sweep.txt"), table.to_text())?;
            print!("{}", table.to_grid());
        }
    }
    Ok(())
}
