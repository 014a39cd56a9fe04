//! The continual protocol: stream batches through a strategy, fill the
//! accuracy matrix and mini-batch log, meter resources, and check the memory
//! and compute constraints.

use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::Dataset;
use crate::learner::{self, evaluate_accuracy, Hypothesis, LearnerError, OpsCounter};
use crate::metrics::random_stratified_accuracy;
use crate::scenarios::{self, LabelRegime, Scenario, ScenarioDescriptor, ScenarioError};
use crate::strategies::{Strategy, StrategyError, TrainConfig, TrainContext};

pub const RECORD_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error("strategy failed on batch {step}: {source}")]
    Strategy { step: usize, source: StrategyError },
    #[error("budget violated after batch {step}: {detail}")]
    Budget { step: usize, detail: String },
    #[error("invalid run options: {0}")]
    InvalidOptions(String),
}

/// `R[i][j]`: accuracy on `Te_j` after training on `Tr_i`. Rows are training
/// stages, columns test sets; both 0-based here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub n: usize,
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn empty(n: usize) -> Self {
        Self { n, rows: Vec::with_capacity(n) }
    }

    /// A complete square matrix.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Option<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return None;
        }
        Some(Self { n, rows })
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.n && self.rows.iter().all(|r| r.len() == self.n)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i][j]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.len()).map(|i| self.rows[i][i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiniBatchEntry {
    /// Mini-batch number within the task; 0 is before any update.
    pub k: usize,
    /// Accuracy per test set, `None` where not evaluated.
    pub accuracies: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    /// `B_i`, the number of mini-batches used on this task.
    pub batches: usize,
    pub entries: Vec<MiniBatchEntry>,
}

/// `a[i][k][j]`. The diagonal `a[i][k][i]` is recorded for every `k`; the full
/// row every `every`-th mini-batch and at `k = 0` and `k = B_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiniBatchLog {
    pub every: usize,
    pub tasks: Vec<TaskLog>,
}

impl MiniBatchLog {
    /// `a[i][k][j]` with 0-based `i`, `j`.
    pub fn get(&self, i: usize, k: usize, j: usize) -> Option<f64> {
        let task = self.tasks.get(i)?;
        let pos = task.entries.binary_search_by_key(&k, |e| e.k).ok()?;
        task.entries[pos].accuracies.get(j).copied().flatten()
    }

    pub fn batch_count(&self, i: usize) -> Option<usize> {
        self.tasks.get(i).map(|t| t.batches)
    }

    fn put(&mut self, i: usize, k: usize, j: usize, n: usize, acc: f64) {
        let task = &mut self.tasks[i];
        let pos = match task.entries.binary_search_by_key(&k, |e| e.k) {
            Ok(p) => p,
            Err(p) => {
                task.entries.insert(
                    p,
                    MiniBatchEntry {
                        k,
                        accuracies: vec![None; n],
                    },
                );
                p
            }
        };
        task.entries[pos].accuracies[j] = Some(acc);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskResources {
    /// `Mem(θ_i)` in bits.
    pub mem_theta_bits: u64,
    /// Raw-example part of `Mem(M_i)`.
    pub mem_samples_bits: u64,
    /// Anchor/Fisher part of `Mem(M_i)`.
    pub mem_aux_bits: u64,
    /// `Ops(Tr_i)`: multiply-adds spent in the training call.
    pub ops: u64,
    /// `Ops↑↓(Tr_i)`: one forward and one backward pass over `Tr_i`.
    pub ops_unit: u64,
    pub stored_examples: usize,
    /// Training examples seen up to and including this batch.
    pub seen_examples: usize,
    /// `mem(h_{i-1}, M_{i-1})` in bits.
    pub prev_state_bits: u64,
}

impl TaskResources {
    pub fn mem_m_bits(&self) -> u64 {
        self.mem_samples_bits + self.mem_aux_bits
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceLog {
    pub tasks: Vec<TaskResources>,
    /// `Mem(D)`: bits of every training example of the scenario.
    pub mem_dataset_bits: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budgets {
    pub max_ops: Option<u64>,
    pub max_mem_bits: Option<u64>,
    /// Example-storage bound for the memory constraint; defaults to the
    /// strategy's buffer capacity.
    pub max_stored_examples: Option<usize>,
    /// Relaxation 1: lifts the memory bound.
    pub memory_relaxation: bool,
    /// Relaxation 2: lifts the compute bound.
    pub computation_relaxation: bool,
    /// Abort on the first violation instead of only flagging it.
    pub strict: bool,
}

/// 1-based batch indices at which each constraint was violated.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintFlags {
    pub memory_bound: Vec<usize>,
    pub ops_bound: Vec<usize>,
    pub state_mem_bound: Vec<usize>,
}

impl ConstraintFlags {
    pub fn constraint1(&self) -> bool {
        !self.memory_bound.is_empty()
    }

    pub fn constraint2(&self) -> bool {
        !self.ops_bound.is_empty() || !self.state_mem_bound.is_empty()
    }

    pub fn any(&self) -> bool {
        self.constraint1() || self.constraint2()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesiderataFlags {
    pub storage_free: bool,
    pub online: bool,
    pub task_indicator_free: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Aborted { step: usize, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    /// Unix seconds at creation; the only non-reproducible field.
    pub created_at: String,
    pub strategy: String,
    pub config: TrainConfig,
    pub layer_sizes: Vec<usize>,
    pub seed: u64,
    pub scenario: ScenarioDescriptor,
    pub accuracy: AccuracyMatrix,
    pub minibatch_log: MiniBatchLog,
    pub resources: ResourceLog,
    pub budgets: Budgets,
    /// Expected accuracy of a label-frequency-matched random guesser per
    /// test set.
    pub random_baseline: Vec<f64>,
    pub constraint_flags: ConstraintFlags,
    pub desiderata_flags: DesiderataFlags,
    pub status: RunStatus,
}

impl RunRecord {
    pub fn n(&self) -> usize {
        self.accuracy.n
    }

    pub fn is_complete(&self) -> bool {
        self.status == RunStatus::Completed
    }
}

/// A failed run keeps everything recorded before the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub partial: Box<RunRecord>,
    pub error: HarnessError,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for RunFailure {}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    /// Hidden layer widths; input and output sizes come from the scenario.
    pub hidden: Vec<usize>,
    /// Full-row mini-batch logging period.
    pub log_every: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            log_every: 10,
        }
    }
}

/// Evaluation hook; the default computes plain accuracy.
pub trait Evaluator {
    /// `stage` is the 1-based batch the model has just finished (or is
    /// currently training on, during mini-batch logging).
    fn evaluate(
        &mut self,
        stage: usize,
        h: &Hypothesis,
        test_index: usize,
        test: &Dataset,
        allowed: Option<&[usize]>,
    ) -> Result<f64, LearnerError>;
}

#[derive(Debug, Default)]
pub struct AccuracyEvaluator;

impl Evaluator for AccuracyEvaluator {
    fn evaluate(
        &mut self,
        _stage: usize,
        h: &Hypothesis,
        _test_index: usize,
        test: &Dataset,
        allowed: Option<&[usize]>,
    ) -> Result<f64, LearnerError> {
        evaluate_accuracy(h, test, allowed, &mut OpsCounter::default())
    }
}

pub fn run_protocol(
    scenario: &Scenario,
    strategy: &dyn Strategy,
    cfg: &TrainConfig,
    budgets: &Budgets,
    opts: &RunOptions,
) -> Result<RunRecord, RunFailure> {
    run_protocol_with(scenario, strategy, cfg, budgets, opts, &mut AccuracyEvaluator)
}

fn now_string() -> String {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs().to_string())
        .unwrap_or_default()
}

/// Run the protocol with an explicit evaluator.
pub fn run_protocol_with(
    scenario: &Scenario,
    strategy: &dyn Strategy,
    cfg: &TrainConfig,
    budgets: &Budgets,
    opts: &RunOptions,
    evaluator: &mut dyn Evaluator,
) -> Result<RunRecord, RunFailure> {
    let n = scenario.len();
    let first = scenario.batches.first();
    let input_dim = first.map_or(0, |b| b.train.feature_dim);
    let mut layer_sizes = vec![input_dim];
    layer_sizes.extend(&opts.hidden);
    layer_sizes.push(scenario.global_class_count);

    let mut record = RunRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        created_at: now_string(),
        strategy: strategy.name().to_owned(),
        config: cfg.clone(),
        layer_sizes: layer_sizes.clone(),
        seed: cfg.seed,
        scenario: scenario.descriptor(),
        accuracy: AccuracyMatrix::empty(n),
        minibatch_log: MiniBatchLog {
            every: opts.log_every,
            tasks: Vec::with_capacity(n),
        },
        resources: ResourceLog {
            tasks: Vec::with_capacity(n),
            mem_dataset_bits: scenario.lifetime_dataset_bits(),
        },
        budgets: budgets.clone(),
        random_baseline: scenario
            .batches
            .iter()
            .map(|b| random_stratified_accuracy(&b.test))
            .collect(),
        constraint_flags: ConstraintFlags::default(),
        desiderata_flags: DesiderataFlags::default(),
        status: RunStatus::Completed,
    };
    let fail = |mut record: RunRecord, step: usize, error: HarnessError| {
        record.status = RunStatus::Aborted {
            step,
            error: error.to_string(),
        };
        record.constraint_flags = check_constraints(&record, &record.budgets);
        record.desiderata_flags = desiderata_report(&record);
        RunFailure {
            partial: Box::new(record),
            error,
        }
    };

    if opts.log_every == 0 {
        return Err(fail(record, 0, HarnessError::InvalidOptions("log_every must be >= 1".into())));
    }
    if let Err(e) = scenarios::validate(scenario) {
        return Err(fail(record, 0, e.into()));
    }
    if let Err(e) = cfg.validate() {
        return Err(fail(record, 0, HarnessError::Strategy { step: 0, source: e }));
    }
    let mut h = match Hypothesis::init(&layer_sizes, cfg.seed) {
        Ok(h) => h,
        Err(e) => return Err(fail(record, 0, e.into())),
    };
    let mut mem = strategy.initial_memory(cfg);
    let masks: Vec<Option<Vec<usize>>> = scenario
        .batches
        .iter()
        .map(|b| scenario.test_time_labels.then(|| b.classes.iter().copied().collect()))
        .collect();
    let madds = learner::forward_madds_per_sample(&layer_sizes);
    let mut seen = 0usize;

    for (i, batch) in scenario.batches.iter().enumerate() {
        let step = i + 1;
        record.minibatch_log.tasks.push(TaskLog {
            batches: 0,
            entries: Vec::new(),
        });

        // 0-shot row before touching Tr_i.
        for (j, b) in scenario.batches.iter().enumerate() {
            match evaluator.evaluate(step, &h, j, &b.test, masks[j].as_deref()) {
                Ok(acc) => record.minibatch_log.put(i, 0, j, n, acc),
                Err(e) => return Err(fail(record, step, e.into())),
            }
        }

        let prev_state_bits = h.mem_bits() + mem.total_bits();
        let mut ops = OpsCounter::default();
        let mut batches_done = 0usize;
        let mut eval_error: Option<LearnerError> = None;
        let trained = {
            let log = &mut record.minibatch_log;
            let eval = &mut *evaluator;
            let mut observer = |k: usize, hk: &Hypothesis| {
                batches_done = k;
                if eval_error.is_some() {
                    return;
                }
                let full = k.is_multiple_of(opts.log_every);
                for (j, b) in scenario.batches.iter().enumerate() {
                    if j != i && !full {
                        continue;
                    }
                    match eval.evaluate(step, hk, j, &b.test, masks[j].as_deref()) {
                        Ok(acc) => log.put(i, k, j, n, acc),
                        Err(e) => eval_error = Some(e),
                    }
                }
            };
            let mut ctx = TrainContext {
                step,
                ops: &mut ops,
                enforce_memory_bound: budgets.strict && !budgets.memory_relaxation,
                observer: Some(&mut observer),
            };
            strategy.train(&h, &batch.train, mem, batch.task_label, cfg, &mut ctx)
        };
        let (h_next, mem_next) = match trained {
            Ok(pair) => pair,
            Err(source) => return Err(fail(record, step, HarnessError::Strategy { step, source })),
        };
        if let Some(e) = eval_error {
            return Err(fail(record, step, e.into()));
        }
        h = h_next;
        mem = mem_next;
        seen += batch.train.len();
        record.minibatch_log.tasks[i].batches = batches_done;

        let mut row = Vec::with_capacity(n);
        for (j, b) in scenario.batches.iter().enumerate() {
            match evaluator.evaluate(step, &h, j, &b.test, masks[j].as_deref()) {
                Ok(acc) => {
                    record.minibatch_log.put(i, batches_done, j, n, acc);
                    row.push(acc);
                }
                Err(e) => return Err(fail(record, step, e.into())),
            }
        }
        record.accuracy.rows.push(row);
        record.resources.tasks.push(TaskResources {
            mem_theta_bits: h.mem_bits(),
            mem_samples_bits: mem.sample_bits(),
            mem_aux_bits: mem.aux_bits(),
            ops: ops.total(),
            ops_unit: 3 * madds * batch.train.len() as u64,
            stored_examples: mem.stored.len(),
            seen_examples: seen,
            prev_state_bits,
        });

        if budgets.strict {
            let flags = check_constraints(&record, budgets);
            if flags.any() {
                let detail = format!("{flags:?}");
                return Err(fail(record, step, HarnessError::Budget { step, detail }));
            }
        }
    }

    record.constraint_flags = check_constraints(&record, budgets);
    record.desiderata_flags = desiderata_report(&record);
    Ok(record)
}

/// Evaluate the memory and compute constraints against `budgets`.
///
/// Memory: at batch `i`, storing more than the example budget, or storing
/// every example seen once more than the budget has been seen, violates the
/// bound. Compute: `Ops(Tr_i) > max_ops` or `mem(h_{i-1}, M_{i-1}) > max_mem`.
pub fn check_constraints(record: &RunRecord, budgets: &Budgets) -> ConstraintFlags {
    let mut flags = ConstraintFlags::default();
    let storage = budgets
        .max_stored_examples
        .unwrap_or(record.config.buffer_capacity);
    for (i, r) in record.resources.tasks.iter().enumerate() {
        let step = i + 1;
        if !budgets.memory_relaxation {
            let over_budget = r.stored_examples > storage;
            let keeps_everything = r.stored_examples >= r.seen_examples && r.seen_examples > storage;
            if over_budget || keeps_everything {
                flags.memory_bound.push(step);
            }
            if budgets.max_mem_bits.is_some_and(|m| r.prev_state_bits > m) {
                flags.state_mem_bound.push(step);
            }
        }
        if !budgets.computation_relaxation && budgets.max_ops.is_some_and(|m| r.ops > m) {
            flags.ops_bound.push(step);
        }
    }
    flags
}

pub fn desiderata_report(record: &RunRecord) -> DesiderataFlags {
    DesiderataFlags {
        storage_free: record.resources.tasks.iter().all(|r| r.mem_samples_bits == 0),
        online: record.config.batch_size == 1 && record.config.epochs == 1,
        task_indicator_free: record.scenario.label_regime == LabelRegime::None
            && !record.scenario.test_time_labels,
    }
}
