//! Pipeline driver: each subcommand runs one stage of an experiment
//! described by a JSON config.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime/training failure.

use clap::{Parser, Subcommand};
use rehrseg::config::{load_config, ExperimentConfig};
use rehrseg::pipeline;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "rehrseg", version, about = "Self-SR assisted segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (JSON).
    #[arg(long, global = true, default_value = "rehrseg.json")]
    config: PathBuf,

    /// Replace the experiment seed (stages get derived seeds).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Edit a config entry before the run, e.g.
    /// `--override segmenter.config.lambda=0.1`. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom benchmark dataset.
    Phantom,
    /// Train the self-supervised super-resolution model (stage one).
    TrainSr {
        /// Continue from the existing checkpoint to the configured
        /// iteration count.
        #[arg(long)]
        resume: bool,
    },
    /// Apply self-SR to every case; write pseudo-HR bundles and the
    /// offset-augmented pseudo-LR training set.
    Superres,
    /// Train the segmentation model (stage two).
    TrainSeg,
    /// Produce LR and HR masks for one case.
    Infer {
        #[arg(long)]
        case: String,
    },
    /// Compute the metric tables for the configured split.
    Eval,
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, String> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| format!("override `{s}` is not KEY=VALUE"))
        })
        .collect()
}

fn run(cli: &Cli, cfg: &ExperimentConfig) -> rehrseg::Result<()> {
    match &cli.command {
        Command::Phantom => {
            let manifest = pipeline::run_phantom(cfg)?;
            println!(
                "wrote {} cases ({} train / {} val) under {}",
                manifest.cases.len(),
                manifest.train_cases().count(),
                manifest.val_cases().count(),
                cfg.out_dir.join("dataset").display()
            );
        }
        Command::TrainSr { resume } => {
            let base = pipeline::run_train_sr(cfg, *resume)?;
            println!("self-SR checkpoint at {}", base.display());
        }
        Command::Superres => {
            let index = pipeline::run_superres(cfg)?;
            let pseudo: usize = index.cases.iter().map(|c| c.pseudo.len()).sum();
            println!(
                "super-resolved {} cases, {} pseudo-LR training samples",
                index.cases.len(),
                pseudo
            );
        }
        Command::TrainSeg => {
            let bases = pipeline::run_train_seg(cfg)?;
            for base in bases {
                println!("segmenter checkpoint at {}", base.display());
            }
        }
        Command::Infer { case } => {
            let (lr, hr) = pipeline::run_infer(cfg, case)?;
            println!("LR mask: {}", lr.display());
            if let Some(hr) = hr {
                println!("HR mask: {}", hr.display());
            }
        }
        Command::Eval => {
            let summary = pipeline::run_eval(cfg)?;
            println!(
                "evaluated {} case(s) on split `{}`:",
                summary.cases, summary.split
            );
            for (name, stat) in &summary.metrics {
                if stat.n > 0 {
                    println!(
                        "  {name:<18} {:.4} +/- {:.4}  (n = {})",
                        stat.mean, stat.std, stat.n
                    );
                }
            }
            if summary.hd95_failures > 0 {
                println!("  hd95 failures: {}", summary.hd95_failures);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let overrides = match parse_overrides(&cli.overrides) {
        Ok(o) => o,
        Err(msg) => {
            eprintln!("config error: {msg}");
            return ExitCode::from(2);
        }
    };
    let cfg = match load_config(&cli.config, cli.seed, &overrides) {
        Ok(cfg) => cfg,
        Err(err) => {
            eprintln!("config error: {err}");
            return ExitCode::from(2);
        }
    };
    match run(&cli, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(3)
        }
    }
}
