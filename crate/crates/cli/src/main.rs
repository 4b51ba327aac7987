mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use ckstn::Result;
use clap::{Parser, Subcommand};
use serde_json::Value;

use config::RunConfig;
use manifest::{write_manifest, RunManifest};

#[derive(Parser)]
#[command(name = "ckstn", version, about = "Style transformer with common knowledge optimization for image-text retrieval")]
struct Cli {
    /// JSON run configuration layered over the defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write a synthetic corpus as train/ and test/ feature directories.
    GenData,
    /// Train a model and write metrics and checkpoints.
    Train,
    /// Score a checkpoint on the held-out split.
    Eval,
    /// Compare analytic gradients with finite differences.
    GradCheck,
    /// Train every ablation variant over several seeds.
    Ablate,
    /// Export word-to-region matches for one held-out pair.
    ExportMatching,
    /// Report trainable parameter counts.
    ParamCount,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::GradCheck => "grad-check",
            Command::Ablate => "ablate",
            Command::ExportMatching => "export-matching",
            Command::ParamCount => "param-count",
        }
    }

    fn run(self, cfg: &RunConfig) -> Result<Value> {
        match self {
            Command::GenData => commands::gen_data(cfg),
            Command::Train => commands::train_cmd(cfg),
            Command::Eval => commands::eval(cfg),
            Command::GradCheck => commands::grad_check(cfg),
            Command::Ablate => commands::ablate(cfg),
            Command::ExportMatching => commands::export_matching_cmd(cfg),
            Command::ParamCount => commands::param_count_cmd(cfg),
        }
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let env_seed = std::env::var(config::SEED_ENV).ok();
    let cfg = match config::load(cli.config.as_deref(), &cli.set, env_seed.as_deref()) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };

    let started = now();
    let outcome = cli.command.run(&cfg);
    let exit_code = match &outcome {
        Ok(_) => 0,
        Err(e) => e.exit_code(),
    };
    let manifest = RunManifest {
        command: cli.command.name(),
        config_path: cli.config.as_deref(),
        overrides: &cli.set,
        seed: cfg.seed,
        output_dir: &cfg.output,
        version: env!("CARGO_PKG_VERSION"),
        started,
        finished: now(),
        exit_code,
        config: &cfg,
    };
    let manifest_result = write_manifest(&cfg.output, &manifest);

    match outcome {
        Ok(result) => {
            println!("RESULT {result}");
            match manifest_result {
                Ok(_) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let Err(m) = manifest_result {
                eprintln!("error: {m}");
            }
            ExitCode::from(exit_code as u8)
        }
    }
}
