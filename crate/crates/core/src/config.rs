//! Experiment configuration file: one TOML document per experiment.
//!
//! Every section is optional and falls back to defaults; unknown keys are
//! rejected. Fields can be overridden with `section.field=value` strings.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::AnalysisConfig;
use crate::episodes::{make_task_distribution, DistributionConfig, TaskDistribution};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, DEFAULT_ALPHAS, DEFAULT_LAMBDAS};
use crate::meta::{ModelConfig, TrainConfig};
use crate::rng::{streams, RngStream};

pub const SCHEMA_VERSION: u32 = 1;
/// Overrides the directory all relative `output_dir` values resolve against.
pub const OUTPUT_ROOT_ENV: &str = "CAML_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub alphas: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            alphas: DEFAULT_ALPHAS.to_vec(),
            lambdas: DEFAULT_LAMBDAS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub output_dir: PathBuf,
    pub distribution: DistributionConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub analysis: AnalysisConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            output_dir: PathBuf::from("runs/default"),
            distribution: DistributionConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            analysis: AnalysisConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// Parses `text` as a TOML value; bare words fall back to strings.
fn parse_scalar(text: &str) -> toml::Value {
    let doc = format!("v = {text}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v"),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

/// Applies one `a.b.c=value` override to a parsed document.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, value) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like section.field=value"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(path, "empty key in override path"));
    }
    let mut table = doc;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(path, format!("{k} is not a section")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_scalar(value.trim()));
    Ok(())
}

/// Names the dotted key a deserialization error points at, when it can.
fn describe(err: &toml::de::Error) -> (String, String) {
    let msg = err.message().to_string();
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        if let Some(end) = rest.find('`') {
            return (rest[..end].to_string(), msg.clone());
        }
    }
    ("config".to_string(), msg)
}

impl ExperimentConfig {
    pub fn from_table(doc: toml::Table) -> Result<Self> {
        let cfg: ExperimentConfig = toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| {
            let (field, reason) = describe(&e);
            Error::config(field, reason)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            let (field, reason) = describe(&e);
            Error::config(field, reason)
        })?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        Self::from_table(doc)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("found {}, this build reads {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        self.train.validate()?;
        self.eval.validate()?;
        if self.analysis.k < 1 {
            return Err(Error::config("analysis.k", "must be at least 1"));
        }
        if self.analysis.n_tasks <= self.analysis.k {
            return Err(Error::config("analysis.n_tasks", "must exceed analysis.k"));
        }
        Ok(())
    }

    /// `output_dir`, placed under `$CAML_OUTPUT_ROOT` when that is set and
    /// the path is relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    /// Task distribution seeded from the training seed.
    pub fn distribution(&self) -> Result<TaskDistribution> {
        make_task_distribution(
            &self.distribution,
            self.train.n_way,
            RngStream::new(self.train.seed, streams::DISTRIBUTION),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_a_fixpoint() {
        let mut cfg = ExperimentConfig::default();
        cfg.train.lambda = 0.1 + 0.2;
        cfg.train.outer_lr = 3e-4;
        cfg.ablation.alphas = vec![0.05, 1.0 / 3.0];
        let text = cfg.to_toml();
        let back = ExperimentConfig::parse(&text, &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(ExperimentConfig::parse("", &[]).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = ExperimentConfig::parse("[train]\nlamda = 0.1\n", &[]).unwrap_err();
        assert!(err.to_string().contains("lamda"), "{err}");
        let err = ExperimentConfig::parse("colour = 1\n", &[]).unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
    }

    #[test]
    fn overrides_by_dot_path() {
        let cfg = ExperimentConfig::parse(
            "[train]\nlambda = 0.5\n",
            &[
                "train.lambda=0.0".into(),
                "train.use_ckd=false".into(),
                "distribution.setting=multi_domain".into(),
                "ablation.alphas=[0.1, 0.9]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.lambda, 0.0);
        assert!(!cfg.train.use_ckd);
        assert_eq!(cfg.distribution.setting, crate::episodes::Setting::MultiDomain);
        assert_eq!(cfg.ablation.alphas, vec![0.1, 0.9]);
        assert!(ExperimentConfig::parse("", &["train.nope=1".into()]).is_err());
        assert!(ExperimentConfig::parse("", &["train.lambda".into()]).is_err());
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = ExperimentConfig::parse("[train]\nema_alpha = 3.0\n", &[]).unwrap_err();
        assert!(err.to_string().contains("train.ema_alpha"));
        let err = ExperimentConfig::parse("schema_version = 9\n", &[]).unwrap_err();
        assert!(err.to_string().contains("schema_version"));
    }
}
