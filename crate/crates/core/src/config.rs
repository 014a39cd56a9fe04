//! Experiment configuration: a TOML document naming a scenario, a strategy,
//! seeds, budgets and metric options.
//!
//! ```toml
//! output_dir = "runs/split"
//! seeds = [0, 1, 2]
//!
//! [model]
//! hidden = [64]
//! log_every = 10
//!
//! [scenario]
//! constructor = "split"        # split | permuted | rotated | nic
//! classes_per_task = 4
//!
//! [scenario.source]
//! kind = "blobs"               # blobs | patterns | idx
//! classes = 20
//! dim = 64
//! per_class = 100
//!
//! [strategy]
//! name = "rehearsal"
//!
//! [strategy.params]
//! epochs = 5
//! buffer_capacity = 200
//!
//! [budgets]
//! memory_relaxation = true
//!
//! [metrics]
//! omega = true
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{self, split_train_test, Dataset, DatasetError};
use crate::harness::{Budgets, RunOptions};
use crate::metrics::{self, MetricOptions};
use crate::scenarios::{self, BaseData, LabelRegime, Scenario, ScenarioError, DEFAULT_SPARSE_KEEP};
use crate::strategies::{TrainConfig, STRATEGY_NAMES};

pub const CONSTRUCTORS: [&str; 4] = ["split", "permuted", "rotated", "nic"];
pub const SOURCES: [&str; 3] = ["blobs", "patterns", "idx"];
/// Criteria a score weight may name.
pub const SCORABLE: [&str; 9] = ["A", "REM", "BWT+", "FWT", "LCA", "Omega", "MS", "SSS", "CE"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn list(errors: &[FieldError]) -> String {
    errors.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n")
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config syntax error: {0}")]
    Syntax(String),
    #[error("invalid config:\n{}", list(.0))]
    Invalid(Vec<FieldError>),
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Failure to materialize the configured scenario.
#[derive(Debug, Error)]
pub enum BuildError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub model: ModelSpec,
    pub scenario: ScenarioSpec,
    pub strategy: StrategySpec,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default)]
    pub metrics: MetricsSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub log_every: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let o = RunOptions::default();
        Self {
            hidden: o.hidden,
            log_every: o.log_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub constructor: String,
    /// split, nic
    pub classes_per_task: Option<usize>,
    /// permuted
    pub n_tasks: Option<usize>,
    /// rotated, in degrees
    pub angles: Option<Vec<f64>>,
    /// nic
    pub revisits: Option<usize>,
    #[serde(default = "default_regime")]
    pub label_regime: LabelRegime,
    #[serde(default = "default_keep")]
    pub sparse_keep: f64,
    #[serde(default)]
    pub test_time_labels: bool,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Seed for data generation and task layout; the run seed when absent.
    pub data_seed: Option<u64>,
    pub source: SourceSpec,
}

fn default_regime() -> LabelRegime {
    LabelRegime::Oracle
}

fn default_keep() -> f64 {
    DEFAULT_SPARSE_KEEP
}

fn default_test_fraction() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub kind: String,
    pub classes: Option<usize>,
    pub per_class: Option<usize>,
    /// blobs: feature dimension
    pub dim: Option<usize>,
    /// blobs: per-feature standard deviation
    pub spread: Option<f32>,
    /// patterns: image side length
    pub side: Option<usize>,
    /// patterns: pixel noise standard deviation
    pub noise: Option<f32>,
    /// idx: image and label files
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    pub name: String,
    #[serde(default)]
    pub params: TrainConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSpec {
    pub beta: Option<usize>,
    pub epsilon: Option<f64>,
    pub weights: Option<BTreeMap<String, f64>>,
    /// Compute `Ω` against a matched-seed cumulative reference run.
    pub omega: bool,
    /// Compute `ρ` against the same reference.
    pub rho: bool,
}

/// Parse and validate a TOML config.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    let errors = cfg.validate();
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::Invalid(errors))
    }
}

/// Read, parse and validate a config file. Relative data paths are resolved
/// against the file's directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut cfg = parse_config(&text)?;
    if let Some(dir) = path.parent() {
        for p in [&mut cfg.scenario.source.images, &mut cfg.scenario.source.labels]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
    Ok(cfg)
}

struct Errors(Vec<FieldError>);

impl Errors {
    fn push(&mut self, field: &str, message: impl Into<String>) {
        self.0.push(FieldError {
            field: field.to_owned(),
            message: message.into(),
        });
    }

    fn require<T>(&mut self, field: &str, value: &Option<T>, why: &str) {
        if value.is_none() {
            self.push(field, format!("required {why}"));
        }
    }

    fn forbid<T>(&mut self, field: &str, value: &Option<T>, why: &str) {
        if value.is_some() {
            self.push(field, format!("not used {why}"));
        }
    }
}

impl ExperimentConfig {
    /// Field-level problems; empty when the config is usable.
    pub fn validate(&self) -> Vec<FieldError> {
        let mut e = Errors(Vec::new());

        if self.seeds.is_empty() {
            e.push("seeds", "at least one seed is required");
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            e.push("seeds", "seeds must be distinct");
        }
        if self.model.hidden.contains(&0) {
            e.push("model.hidden", "layer widths must be >= 1");
        }
        if self.model.log_every == 0 {
            e.push("model.log_every", "must be >= 1");
        }

        self.validate_scenario(&mut e);

        if !STRATEGY_NAMES.contains(&self.strategy.name.as_str()) {
            e.push(
                "strategy.name",
                format!(
                    "unknown strategy \"{}\"; valid names: {}",
                    self.strategy.name,
                    STRATEGY_NAMES.join(", ")
                ),
            );
        }
        if let Err(err) = self.strategy.params.validate() {
            e.push("strategy.params", err.to_string());
        }
        if self.strategy.params.seed != 0 {
            e.push("strategy.params.seed", "set run seeds with the top-level `seeds` list");
        }
        if self.strategy.name == "rehearsal" && self.strategy.params.buffer_capacity == 0 {
            e.push("strategy.params.buffer_capacity", "rehearsal needs a buffer of at least 1");
        }

        for (flag, on) in [("metrics.omega", self.metrics.omega), ("metrics.rho", self.metrics.rho)] {
            if on && !self.budgets.memory_relaxation {
                e.push(
                    flag,
                    "needs a cumulative reference run, which requires Relaxation 1 \
                     (set budgets.memory_relaxation = true)",
                );
            }
        }
        if self.metrics.epsilon.is_some_and(|x| !(x > 0.0 && x.is_finite())) {
            e.push("metrics.epsilon", "must be positive");
        }
        if let Some(w) = &self.metrics.weights {
            for k in w.keys() {
                if !SCORABLE.contains(&k.as_str()) {
                    e.push(
                        &format!("metrics.weights.{k}"),
                        format!("unknown criterion; valid names: {}", SCORABLE.join(", ")),
                    );
                }
            }
            if let Err(err) = metrics::check_weights(w) {
                e.push("metrics.weights", err.to_string());
            }
            if w.contains_key("Omega") && !self.metrics.omega {
                e.push("metrics.weights.Omega", "weighting Omega requires metrics.omega = true");
            }
        }
        e.0
    }

    fn validate_scenario(&self, e: &mut Errors) {
        let s = &self.scenario;
        match s.constructor.as_str() {
            "split" => {
                e.require("scenario.classes_per_task", &s.classes_per_task, "by split");
                e.forbid("scenario.n_tasks", &s.n_tasks, "by split");
                e.forbid("scenario.angles", &s.angles, "by split");
                e.forbid("scenario.revisits", &s.revisits, "by split");
            }
            "permuted" => {
                e.require("scenario.n_tasks", &s.n_tasks, "by permuted");
                e.forbid("scenario.classes_per_task", &s.classes_per_task, "by permuted");
                e.forbid("scenario.angles", &s.angles, "by permuted");
                e.forbid("scenario.revisits", &s.revisits, "by permuted");
            }
            "rotated" => {
                e.require("scenario.angles", &s.angles, "by rotated");
                e.forbid("scenario.classes_per_task", &s.classes_per_task, "by rotated");
                e.forbid("scenario.n_tasks", &s.n_tasks, "by rotated");
                e.forbid("scenario.revisits", &s.revisits, "by rotated");
                if s.source.kind == "blobs" {
                    e.push("scenario.source.kind", "rotated needs square images (patterns or idx)");
                }
            }
            "nic" => {
                e.require("scenario.classes_per_task", &s.classes_per_task, "by nic");
                e.require("scenario.revisits", &s.revisits, "by nic");
                e.forbid("scenario.n_tasks", &s.n_tasks, "by nic");
                e.forbid("scenario.angles", &s.angles, "by nic");
            }
            other => e.push(
                "scenario.constructor",
                format!("unknown constructor \"{other}\"; valid names: {}", CONSTRUCTORS.join(", ")),
            ),
        }
        if s.n_tasks == Some(0) {
            e.push("scenario.n_tasks", "must be >= 1");
        }
        if s.angles.as_ref().is_some_and(|a| a.is_empty() || a.iter().any(|x| !x.is_finite())) {
            e.push("scenario.angles", "must be a non-empty list of finite angles");
        }
        if s.classes_per_task == Some(0) {
            e.push("scenario.classes_per_task", "must be >= 1");
        }
        if !(s.test_fraction > 0.0 && s.test_fraction < 1.0) {
            e.push("scenario.test_fraction", "must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&s.sparse_keep) {
            e.push("scenario.sparse_keep", "must lie in [0, 1]");
        }

        let src = &s.source;
        let generated = |e: &mut Errors, kind: &str| {
            e.require("scenario.source.classes", &src.classes, &format!("by {kind}"));
            e.require("scenario.source.per_class", &src.per_class, &format!("by {kind}"));
            e.forbid("scenario.source.images", &src.images, &format!("by {kind}"));
            e.forbid("scenario.source.labels", &src.labels, &format!("by {kind}"));
        };
        match src.kind.as_str() {
            "blobs" => {
                generated(e, "blobs");
                e.require("scenario.source.dim", &src.dim, "by blobs");
                e.forbid("scenario.source.side", &src.side, "by blobs");
                e.forbid("scenario.source.noise", &src.noise, "by blobs");
            }
            "patterns" => {
                generated(e, "patterns");
                e.require("scenario.source.side", &src.side, "by patterns");
                e.forbid("scenario.source.dim", &src.dim, "by patterns");
                e.forbid("scenario.source.spread", &src.spread, "by patterns");
            }
            "idx" => {
                e.require("scenario.source.images", &src.images, "by idx");
                e.require("scenario.source.labels", &src.labels, "by idx");
                for (field, v) in [
                    ("scenario.source.classes", src.classes),
                    ("scenario.source.per_class", src.per_class),
                    ("scenario.source.dim", src.dim),
                    ("scenario.source.side", src.side),
                ] {
                    e.forbid(field, &v, "by idx");
                }
                e.forbid("scenario.source.spread", &src.spread, "by idx");
                e.forbid("scenario.source.noise", &src.noise, "by idx");
            }
            other => e.push(
                "scenario.source.kind",
                format!("unknown source \"{other}\"; valid names: {}", SOURCES.join(", ")),
            ),
        }
    }

    /// Whether a matched cumulative reference run is needed.
    pub fn needs_reference(&self) -> bool {
        self.metrics.omega || self.metrics.rho
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            hidden: self.model.hidden.clone(),
            log_every: self.model.log_every,
        }
    }

    pub fn metric_options(&self) -> MetricOptions {
        MetricOptions {
            beta: self.metrics.beta,
            epsilon: self.metrics.epsilon,
            weights: self.metrics.weights.clone().unwrap_or_else(metrics::default_weights),
        }
    }

    /// The training config for one seed.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.strategy.params.clone()
        }
    }

    /// Materialize the scenario for a run seed.
    pub fn build_scenario(&self, run_seed: u64) -> Result<Scenario, BuildError> {
        let s = &self.scenario;
        let seed = s.data_seed.unwrap_or(run_seed);
        let full = self.build_source(seed)?;
        let (train, test) = split_train_test(&full, s.test_fraction, seed)?;
        let base = BaseData { train, test };
        let sc = match s.constructor.as_str() {
            "split" => scenarios::make_split(&base, s.classes_per_task.unwrap_or(0), seed)?,
            "permuted" => scenarios::make_permuted(&base, s.n_tasks.unwrap_or(0), seed)?,
            "rotated" => scenarios::make_rotated(&base, s.angles.as_deref().unwrap_or(&[]), seed)?,
            "nic" => scenarios::make_nic(
                &base,
                s.classes_per_task.unwrap_or(0),
                s.revisits.unwrap_or(0),
                seed,
            )?,
            other => {
                return Err(ScenarioError::InvalidParameter(format!("unknown constructor {other}")).into())
            }
        };
        let sc = if s.label_regime == LabelRegime::Oracle {
            sc
        } else {
            scenarios::apply_label_regime_with(&sc, s.label_regime, s.sparse_keep, seed)?
        };
        Ok(sc.with_test_time_labels(s.test_time_labels))
    }

    fn build_source(&self, seed: u64) -> Result<Dataset, DatasetError> {
        let src = &self.scenario.source;
        let n = |v: Option<usize>| v.unwrap_or(0);
        match src.kind.as_str() {
            "blobs" => datasets::gen_blobs(
                n(src.classes),
                n(src.dim),
                n(src.per_class),
                src.spread.unwrap_or(1.0),
                seed,
            ),
            "patterns" => datasets::gen_patterns(
                n(src.classes),
                n(src.side),
                n(src.per_class),
                src.noise.unwrap_or(0.2),
                seed,
            ),
            "idx" => match (&src.images, &src.labels) {
                (Some(images), Some(labels)) => datasets::load_idx(images, labels),
                _ => Err(DatasetError::InvalidParameter("idx source needs images and labels".into())),
            },
            other => Err(DatasetError::InvalidParameter(format!("unknown source {other}"))),
        }
    }
}
