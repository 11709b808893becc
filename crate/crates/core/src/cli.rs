//! Subcommand implementations behind the `caml` binary.
//!
//! Output layout under the configured output directory:
//!
//! ```text
//! config.toml            exact configuration of the run
//! metrics.jsonl          one IterationRecord per line
//! ckpt_000500.bin        periodic checkpoints (train.checkpoint_every)
//! final.bin              state after the last iteration
//! eval/                  eval.txt, eval.csv, eval_<protocol>[_kg].json
//! analysis/              encodings.jsonl, spectrum.csv, spectral_report.json
//! ablation/              ablation.txt, ablation.csv, ablation.json
//! baselines/             baselines.txt, baselines.csv, baselines.json
//! ```

use std::fmt::{self, Write as _};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::analysis::encoding_quality_study;
use crate::checkpoint::{self, checkpoint_name};
use crate::config::ExperimentConfig;
use crate::episodes::{make_task_distribution, DistributionConfig, Split};
use crate::error::Error;
use crate::eval::{compare_baselines, evaluate, run_ablation_grid, EvalConfig, EvalReport};
use crate::meta::{init_state, train_from, Architecture, IterationRecord, LearnerState, TrainHooks};
use crate::rng::{streams, RngStream};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const FINAL_CHECKPOINT: &str = "final.bin";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: Error,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(error: Error) -> Self {
        let code = match error {
            Error::Config { .. } | Error::CheckpointVersion { .. } => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        CliError { code, error }
    }
}

fn usage(error: Error) -> CliError {
    CliError {
        code: EXIT_USAGE,
        error,
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Reads the config; a missing or malformed file is a usage error.
pub fn load_config(path: &Path, overrides: &[String]) -> CliResult<ExperimentConfig> {
    ExperimentConfig::load(path, overrides).map_err(usage)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write(path, &(serde_json::to_string_pretty(value).expect("serializes") + "\n"))
}

/// Prepares `dir` and writes the config snapshot into it.
fn output_dir(cfg: &ExperimentConfig, dir: PathBuf) -> CliResult<PathBuf> {
    create_dir(&dir)?;
    cfg.save(&dir.join(CONFIG_SNAPSHOT))?;
    Ok(dir)
}

struct RunHooks {
    metrics: BufWriter<File>,
    metrics_path: PathBuf,
    dir: PathBuf,
    every: u64,
}

impl TrainHooks for RunHooks {
    fn on_iteration(&mut self, state: &LearnerState, record: &IterationRecord) -> crate::Result<()> {
        writeln!(self.metrics, "{}", crate::meta::record_line(record)).map_err(|e| Error::io(&self.metrics_path, e))?;
        if self.every > 0 && state.iteration.is_multiple_of(self.every) {
            self.metrics.flush().map_err(|e| Error::io(&self.metrics_path, e))?;
            checkpoint::save(state, &self.dir.join(checkpoint_name(state.iteration)))?;
        }
        Ok(())
    }
}

fn architecture(cfg: &ExperimentConfig) -> CliResult<Architecture> {
    Ok(Architecture::new(&cfg.model, cfg.distribution.input_dim, &cfg.train)?)
}

/// Runs meta-training. With `resume`, continues from that checkpoint and
/// appends to the existing metrics log. Returns the output directory.
pub fn cmd_train(config: &Path, overrides: &[String], resume: Option<&Path>) -> CliResult<PathBuf> {
    let cfg = load_config(config, overrides)?;
    let dist = cfg.distribution()?;
    let dir = output_dir(&cfg, cfg.resolved_output_dir())?;
    let state = match resume {
        Some(p) => checkpoint::load(p, &architecture(&cfg)?)?,
        None => init_state(&cfg.train, &cfg.model, &dist)?,
    };
    let metrics_path = dir.join("metrics.jsonl");
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut hooks = RunHooks {
        metrics: BufWriter::new(file),
        metrics_path: metrics_path.clone(),
        dir: dir.clone(),
        every: cfg.train.checkpoint_every,
    };
    log::info!(
        "training for {} iterations from iteration {} into {}",
        cfg.train.iterations,
        state.iteration,
        dir.display()
    );
    let (state, _) = train_from(state, &cfg.train, &dist, cfg.train.iterations, &mut hooks)?;
    hooks.metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    checkpoint::save(&state, &dir.join(FINAL_CHECKPOINT))?;
    Ok(dir)
}

/// Config next to a checkpoint unless one is given explicitly.
fn checkpoint_config(checkpoint: &Path, config: Option<&Path>, overrides: &[String]) -> CliResult<ExperimentConfig> {
    let path = match config {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_SNAPSHOT),
    };
    load_config(&path, overrides)
}

fn load_checkpoint(checkpoint: &Path, cfg: &ExperimentConfig) -> CliResult<LearnerState> {
    let arch = architecture(cfg)?;
    checkpoint::load(checkpoint, &arch).map_err(|e| match e {
        Error::Checkpoint { .. } | Error::CheckpointVersion { .. } => usage(e),
        other => other.into(),
    })
}

/// Evaluates a checkpoint on every requested protocol, with and (when
/// `eval.kg_at_test`) without knowledge infusion at test time.
pub fn cmd_eval(checkpoint_path: &Path, config: Option<&Path>, overrides: &[String]) -> CliResult<PathBuf> {
    let cfg = checkpoint_config(checkpoint_path, config, overrides)?;
    let state = load_checkpoint(checkpoint_path, &cfg)?;
    let dir = output_dir(&cfg, cfg.resolved_output_dir().join("eval"))?;
    let protocols = if cfg.eval.protocols.is_empty() {
        vec![cfg.distribution.setting]
    } else {
        cfg.eval.protocols.clone()
    };
    let mut kg_flags = vec![false];
    if cfg.eval.kg_at_test {
        kg_flags.push(true);
    }

    let mut rows: Vec<(String, Vec<EvalReport>)> = Vec::new();
    for setting in protocols {
        let dcfg = DistributionConfig {
            setting,
            ..cfg.distribution.clone()
        };
        let dist = make_task_distribution(&dcfg, cfg.train.n_way, RngStream::new(cfg.train.seed, streams::DISTRIBUTION))?;
        let mut reports = Vec::new();
        for &kg_at_test in &kg_flags {
            let ecfg = EvalConfig {
                kg_at_test,
                ..cfg.eval.clone()
            };
            let report = evaluate(&state, &cfg.train, &dist, Split::Test, &ecfg)?;
            let suffix = if kg_at_test { "_kg" } else { "" };
            write_json(&dir.join(format!("eval_{}{suffix}.json", setting.as_str())), &report)?;
            reports.push(report);
        }
        rows.push((setting.as_str().to_string(), reports));
    }

    let mut table = format!("{:<24} {:>16}", "protocol", "accuracy (%)");
    if kg_flags.len() > 1 {
        let _ = write!(table, " {:>16}", "with KG (%)");
    }
    table.push('\n');
    let mut csv = String::from("protocol,kg_at_test,mean,half_width,n_episodes\n");
    for (name, reports) in &rows {
        let _ = write!(table, "{name:<24}");
        for r in reports {
            let _ = write!(table, " {:>16}", r.summary());
            let _ = writeln!(csv, "{name},{},{},{},{}", r.kg_at_test, r.mean, r.half_width, r.n_episodes);
        }
        table.push('\n');
    }
    write(&dir.join("eval.txt"), &table)?;
    write(&dir.join("eval.csv"), &csv)?;
    print!("{table}");
    Ok(dir)
}

/// Trains one model per `(ema_alpha, lambda)` pair of `ablation`.
pub fn cmd_ablate(config: &Path, overrides: &[String]) -> CliResult<PathBuf> {
    let cfg = load_config(config, overrides)?;
    let dist = cfg.distribution()?;
    let dir = output_dir(&cfg, cfg.resolved_output_dir().join("ablation"))?;
    let grid = run_ablation_grid(&cfg.train, &cfg.model, &dist, &cfg.eval, &cfg.ablation.alphas, &cfg.ablation.lambdas);
    write(&dir.join("ablation.txt"), &grid.to_table())?;
    write(&dir.join("ablation.csv"), &grid.to_csv())?;
    write_json(&dir.join("ablation.json"), &grid)?;
    print!("{}", grid.to_table());
    Ok(dir)
}

/// Graph-spectral study of the task encodings of a checkpoint.
pub fn cmd_analyze(
    checkpoint_path: &Path,
    config: Option<&Path>,
    overrides: &[String],
    n_tasks: Option<usize>,
    k: Option<usize>,
) -> CliResult<PathBuf> {
    let mut overrides = overrides.to_vec();
    if let Some(n) = n_tasks {
        overrides.push(format!("analysis.n_tasks={n}"));
    }
    if let Some(k) = k {
        overrides.push(format!("analysis.k={k}"));
    }
    let cfg = checkpoint_config(checkpoint_path, config, &overrides)?;
    let state = load_checkpoint(checkpoint_path, &cfg)?;
    let dist = cfg.distribution()?;
    let dir = output_dir(&cfg, cfg.resolved_output_dir().join("analysis"))?;
    let study = encoding_quality_study(&state, &cfg.train, &dist, &cfg.analysis)?;
    study.write_encodings(&dir.join("encodings.jsonl"))?;
    write(&dir.join("spectrum.csv"), &study.report.to_csv())?;
    write_json(&dir.join("spectral_report.json"), &study.report)?;
    let mean_acc = study.records.iter().map(|r| r.accuracy).sum::<f64>() / study.records.len() as f64;
    println!(
        "{} tasks, k = {}: mean accuracy {:.4}, c(0.1) = {:.4}, c(0.2) = {:.4}",
        study.records.len(),
        cfg.analysis.k,
        mean_acc,
        study.report.concentration_at(0.1),
        study.report.concentration_at(0.2)
    );
    Ok(dir)
}

/// Trains and evaluates MAML, the modulation-only baseline and CAML.
pub fn cmd_compare_baselines(config: &Path, overrides: &[String]) -> CliResult<PathBuf> {
    let cfg = load_config(config, overrides)?;
    let dist = cfg.distribution()?;
    let dir = output_dir(&cfg, cfg.resolved_output_dir().join("baselines"))?;
    let cmp = compare_baselines(&cfg.train, &cfg.model, &dist, &cfg.eval);
    write(&dir.join("baselines.txt"), &cmp.to_table())?;
    write(&dir.join("baselines.csv"), &cmp.to_csv())?;
    write_json(&dir.join("baselines.json"), &cmp)?;
    print!("{}", cmp.to_table());
    Ok(dir)
}
