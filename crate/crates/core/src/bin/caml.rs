use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use caml::cli;

#[derive(Parser)]
#[command(name = "caml", version, about = "Meta-learning experiments on synthetic few-shot tasks")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train and write checkpoints plus a metrics log.
    Train {
        config: PathBuf,
        /// Override a config field, e.g. `--set train.lambda=0.1`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Sweep the moving-average coefficient and the distillation weight.
    Ablate {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Spectral analysis of task encodings over a k-NN graph.
    Analyze {
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n_tasks: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train and compare MAML, MuMo-style and CAML under shared seeds.
    CompareBaselines {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { cli::EXIT_USAGE as u8 } else { 0 });
        }
    };
    let result = match &args.command {
        Command::Train { config, overrides, resume } => cli::cmd_train(config, overrides, resume.as_deref()),
        Command::Eval {
            checkpoint,
            config,
            overrides,
        } => cli::cmd_eval(checkpoint, config.as_deref(), overrides),
        Command::Ablate { config, overrides } => cli::cmd_ablate(config, overrides),
        Command::Analyze {
            checkpoint,
            config,
            n_tasks,
            k,
            overrides,
        } => cli::cmd_analyze(checkpoint, config.as_deref(), overrides, *n_tasks, *k),
        Command::CompareBaselines { config, overrides } => cli::cmd_compare_baselines(config, overrides),
    };
    match result {
        Ok(dir) => {
            log::info!("outputs in {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
