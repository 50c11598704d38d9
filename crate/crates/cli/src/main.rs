use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use freeze_core::pipeline::{ExperimentConfig, Pipeline, Stage};
use freeze_core::Error;

/// Early-exit inference with per-layer approximate caches.
#[derive(Debug, Parser)]
#[command(name = "freeze", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory shared by all stages.
    #[arg(long, global = true, default_value = "freeze-out")]
    out: PathBuf,

    /// Override one config key, e.g. `--set cache_mode=kmeans`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate synthetic blobs, train the reference model, write the trace.
    SynthTraces,
    /// Train one reducer per traced layer.
    TrainReduce,
    /// Build the per-layer caches from reduced training activations.
    BuildCache,
    /// Calibrate per-layer thresholds on the validation split.
    Thresholds,
    /// Run the engine over the evaluation split and time it.
    Infer,
    /// Record the earliest layer whose lookup agrees with the model.
    Oracle,
    /// Re-run the engine with scaled thresholds over lambda_grid.
    Sweep,
    /// Cluster purity per layer.
    Purity,
    /// Cache memory per layer.
    Memory,
    /// Write every CSV and a plain-text summary (needs `infer`).
    Report,
}

impl Command {
    fn stage(self) -> Stage {
        match self {
            Command::SynthTraces => Stage::SynthTraces,
            Command::TrainReduce => Stage::TrainReduce,
            Command::BuildCache => Stage::BuildCache,
            Command::Thresholds => Stage::Thresholds,
            Command::Infer => Stage::Infer,
            Command::Oracle => Stage::Oracle,
            Command::Sweep => Stage::Sweep,
            Command::Purity => Stage::Purity,
            Command::Memory => Stage::Memory,
            Command::Report => Stage::Report,
        }
    }
}

fn config_help() -> String {
    let mut s = String::from("Config keys and defaults:\n\n");
    for line in ExperimentConfig::defaults_toml().lines() {
        s.push_str("  ");
        s.push_str(line);
        s.push('\n');
    }
    s.push_str(
        "\n  layers lists the layers allowed to freeze; empty enables all.\n  \
         trace_dir is relative to --out unless absolute. cache_mode is knn or kmeans;\n  \
         eval_split is train, val or test; purity_labels is model or truth.\n\
         \nExit codes: 0 success, 1 usage error, 2 data, format or config error, 3 numerical failure.\n",
    );
    s
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Diverged { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let matches = Cli::command()
        .after_long_help(config_help())
        .try_get_matches()
        .and_then(|m| Cli::from_arg_matches(&m));
    let cli = match matches {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };

    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }

    let stage = cli.command.stage();
    let result = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)
        .and_then(|cfg| Pipeline::new(cfg, &cli.out))
        .and_then(|p| p.run(stage));
    match result {
        Ok(out) => {
            for note in &out.notes {
                println!("{note}");
            }
            println!(
                "{stage}: wrote {} artifacts to {}",
                out.artifacts.len(),
                cli.out.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
