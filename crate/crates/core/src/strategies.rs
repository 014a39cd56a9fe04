//! Continual strategies. Each one maps `(h_{i-1}, Tr_i, M_{i-1}, t_i)` to
//! `(h_i, M_i)`; none of them ever sees test data.

use rand::Rng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{Dataset, LabeledExample};
use crate::learner::{GradientVector, Hypothesis, LearnerError, OpsCounter};
use crate::rng;

pub const STRATEGY_NAMES: [&str; 4] = ["naive", "cumulative", "rehearsal", "ewc"];

#[derive(Debug, Error, PartialEq)]
pub enum StrategyError {
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("constraint violation: {0}")]
    ConstraintViolation(String),
}

pub type Result<T> = std::result::Result<T, StrategyError>;

/// When EWC records an `(anchor, Fisher)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPolicy {
    /// One anchor per task label when labels are given (a returning label
    /// refreshes its anchor), one per batch otherwise.
    #[default]
    LabelDriven,
    /// One anchor per training batch regardless of labels.
    PerBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Step size. Zero freezes the parameters (gradients are still computed).
    pub lr: f32,
    pub lambda_ewc: f32,
    pub buffer_capacity: usize,
    pub replay_fraction: f64,
    pub fisher_samples: usize,
    pub anchor_policy: AnchorPolicy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            lr: 0.05,
            lambda_ewc: 0.0,
            buffer_capacity: 200,
            replay_fraction: 0.5,
            fisher_samples: 200,
            anchor_policy: AnchorPolicy::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(StrategyError::InvalidConfig(m.to_owned()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and >= 0");
        }
        if !(self.lambda_ewc >= 0.0 && self.lambda_ewc.is_finite()) {
            return bad("lambda_ewc must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.replay_fraction) {
            return bad("replay_fraction must lie in [0, 1]");
        }
        if self.fisher_samples == 0 {
            return bad("fisher_samples must be >= 1");
        }
        Ok(())
    }
}

/// Consolidation point: parameters `θ*` and their diagonal Fisher `F`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub task_label: Option<u32>,
    pub params: Vec<f32>,
    pub fisher: Vec<f32>,
}

/// The external memory `M_i`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExternalMemory {
    pub stored: Vec<LabeledExample>,
    /// Reservoir capacity `B`; `None` means unbounded.
    pub capacity: Option<usize>,
    pub anchors: Vec<Anchor>,
    /// Examples streamed past the reservoir so far.
    pub seen_count: u64,
}

impl ExternalMemory {
    pub fn bounded(capacity: usize) -> Self {
        Self {
            capacity: Some(capacity),
            ..Self::default()
        }
    }

    pub fn unbounded() -> Self {
        Self::default()
    }

    /// Bits of raw examples held.
    pub fn sample_bits(&self) -> u64 {
        self.stored.iter().map(LabeledExample::mem_bits).sum()
    }

    /// Bits of auxiliary tensors (anchors and Fisher diagonals).
    pub fn aux_bits(&self) -> u64 {
        self.anchors
            .iter()
            .map(|a| 32 * (a.params.len() + a.fisher.len()) as u64)
            .sum()
    }

    pub fn total_bits(&self) -> u64 {
        self.sample_bits() + self.aux_bits()
    }
}

/// Per-call context supplied by the protocol runner.
/// Per-update callback: 1-based mini-batch number and current hypothesis.
pub type Observer<'a> = dyn FnMut(usize, &Hypothesis) + 'a;

pub struct TrainContext<'a> {
    /// 1-based position of the batch in the sequence.
    pub step: usize,
    pub ops: &'a mut OpsCounter,
    /// The fixed memory bound is enforced: no relaxation, and the caller
    /// wants violations refused rather than only monitored.
    pub enforce_memory_bound: bool,
    /// Called after every parameter update with the 1-based mini-batch
    /// number and the current hypothesis.
    pub observer: Option<&'a mut Observer<'a>>,
}

impl<'a> TrainContext<'a> {
    pub fn new(step: usize, ops: &'a mut OpsCounter) -> Self {
        Self {
            step,
            ops,
            enforce_memory_bound: true,
            observer: None,
        }
    }

    fn notify(&mut self, k: usize, h: &Hypothesis) {
        if let Some(obs) = self.observer.as_mut() {
            obs(k, h);
        }
    }
}

pub trait Strategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// `M_0` for a fresh run.
    fn initial_memory(&self, cfg: &TrainConfig) -> ExternalMemory;

    fn train(
        &self,
        h_prev: &Hypothesis,
        tr: &Dataset,
        mem: ExternalMemory,
        task: Option<u32>,
        cfg: &TrainConfig,
        ctx: &mut TrainContext<'_>,
    ) -> Result<(Hypothesis, ExternalMemory)>;
}

pub fn strategy_by_name(name: &str) -> Option<Box<dyn Strategy>> {
    match name {
        "naive" => Some(Box::new(Naive)),
        "cumulative" => Some(Box::new(Cumulative)),
        "rehearsal" => Some(Box::new(Rehearsal)),
        "ewc" => Some(Box::new(Ewc)),
        _ => None,
    }
}

/// One SGD update on a mini-batch, with an optional gradient adjustment.
fn update(
    h: &mut Hypothesis,
    batch: &[&LabeledExample],
    cfg: &TrainConfig,
    ctx: &mut TrainContext<'_>,
    adjust: &dyn Fn(&Hypothesis, &mut GradientVector),
) -> Result<()> {
    let (_, mut g) = h.loss_and_grad(batch, ctx.ops)?;
    adjust(h, &mut g);
    if cfg.lr > 0.0 {
        h.sgd_step(&g, cfg.lr)?;
    }
    Ok(())
}

/// Plain shuffled mini-batch SGD over `examples` for `cfg.epochs` epochs.
fn sgd_epochs(
    mut h: Hypothesis,
    examples: &[LabeledExample],
    cfg: &TrainConfig,
    ctx: &mut TrainContext<'_>,
    adjust: &dyn Fn(&Hypothesis, &mut GradientVector),
) -> Result<Hypothesis> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut shuffle = rng::stream(cfg.seed, &[rng::TAG_SHUFFLE, ctx.step as u64]);
    let mut k = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledExample> = chunk.iter().map(|&i| &examples[i]).collect();
            update(&mut h, &batch, cfg, ctx, adjust)?;
            k += 1;
            ctx.notify(k, &h);
        }
    }
    Ok(h)
}

fn no_adjust(_: &Hypothesis, _: &mut GradientVector) {}

fn check_inputs(tr: &Dataset, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if tr.is_empty() {
        return Err(StrategyError::EmptyTrainingSet);
    }
    Ok(())
}

/// Fine-tuning on the current batch only; memory untouched.
#[derive(Debug, Clone, Copy, Default)]
pub struct Naive;

impl Strategy for Naive {
    fn name(&self) -> &'static str {
        "naive"
    }

    fn initial_memory(&self, _cfg: &TrainConfig) -> ExternalMemory {
        ExternalMemory::bounded(0)
    }

    fn train(
        &self,
        h_prev: &Hypothesis,
        tr: &Dataset,
        mem: ExternalMemory,
        _task: Option<u32>,
        cfg: &TrainConfig,
        ctx: &mut TrainContext<'_>,
    ) -> Result<(Hypothesis, ExternalMemory)> {
        check_inputs(tr, cfg)?;
        let h = sgd_epochs(h_prev.clone(), &tr.examples, cfg, ctx, &no_adjust)?;
        Ok((h, mem))
    }
}

/// Offline reference: keeps every example and retrains from scratch on the
/// union. It breaks the memory bound by design, so it refuses to run while
/// the bound is enforced; in monitoring mode the harness flags it instead.
#[derive(Debug, Clone, Copy, Default)]
pub struct Cumulative;

impl Strategy for Cumulative {
    fn name(&self) -> &'static str {
        "cumulative"
    }

    fn initial_memory(&self, _cfg: &TrainConfig) -> ExternalMemory {
        ExternalMemory::unbounded()
    }

    fn train(
        &self,
        h_prev: &Hypothesis,
        tr: &Dataset,
        mut mem: ExternalMemory,
        _task: Option<u32>,
        cfg: &TrainConfig,
        ctx: &mut TrainContext<'_>,
    ) -> Result<(Hypothesis, ExternalMemory)> {
        check_inputs(tr, cfg)?;
        if ctx.enforce_memory_bound {
            return Err(StrategyError::ConstraintViolation(
                "cumulative training stores every seen example; enable the memory relaxation".into(),
            ));
        }
        mem.stored.extend(tr.examples.iter().cloned());
        mem.seen_count += tr.len() as u64;
        let fresh = Hypothesis::init(h_prev.layer_sizes(), cfg.seed)?;
        let h = sgd_epochs(fresh, &mem.stored, cfg, ctx, &no_adjust)?;
        Ok((h, mem))
    }
}

/// Algorithm R: keep the first `B` items, then admit item `n` with
/// probability `B/n` over a uniformly chosen victim.
pub fn reservoir_update<R: Rng>(mem: &mut ExternalMemory, example: LabeledExample, rng: &mut R) {
    mem.seen_count += 1;
    let Some(cap) = mem.capacity else {
        mem.stored.push(example);
        return;
    };
    if cap == 0 {
        return;
    }
    if mem.stored.len() < cap {
        mem.stored.push(example);
    } else {
        let j = rng.gen_range(0..mem.seen_count);
        if (j as usize) < cap {
            mem.stored[j as usize] = example;
        }
    }
}

/// Mini-batches mixing replayed memory samples with new data; memory is a
/// uniform reservoir over the stream.
#[derive(Debug, Clone, Copy, Default)]
pub struct Rehearsal;

impl Rehearsal {
    fn replay_count(cfg: &TrainConfig) -> usize {
        ((cfg.replay_fraction * cfg.batch_size as f64).ceil() as usize).min(cfg.batch_size.saturating_sub(1))
    }
}

impl Strategy for Rehearsal {
    fn name(&self) -> &'static str {
        "rehearsal"
    }

    fn initial_memory(&self, cfg: &TrainConfig) -> ExternalMemory {
        ExternalMemory::bounded(cfg.buffer_capacity)
    }

    fn train(
        &self,
        h_prev: &Hypothesis,
        tr: &Dataset,
        mut mem: ExternalMemory,
        _task: Option<u32>,
        cfg: &TrainConfig,
        ctx: &mut TrainContext<'_>,
    ) -> Result<(Hypothesis, ExternalMemory)> {
        check_inputs(tr, cfg)?;
        if cfg.buffer_capacity == 0 {
            return Err(StrategyError::InvalidConfig(
                "rehearsal needs buffer_capacity >= 1; use naive instead".into(),
            ));
        }
        mem.capacity = Some(cfg.buffer_capacity);
        let replay = if mem.stored.is_empty() { 0 } else { Self::replay_count(cfg) };
        let h = if replay == 0 {
            sgd_epochs(h_prev.clone(), &tr.examples, cfg, ctx, &no_adjust)?
        } else {
            self.mixed_epochs(h_prev.clone(), tr, &mem, replay, cfg, ctx)?
        };
        let mut reservoir = rng::stream(cfg.seed, &[rng::TAG_RESERVOIR, ctx.step as u64]);
        for ex in &tr.examples {
            reservoir_update(&mut mem, ex.clone(), &mut reservoir);
        }
        Ok((h, mem))
    }
}

impl Rehearsal {
    fn mixed_epochs(
        &self,
        mut h: Hypothesis,
        tr: &Dataset,
        mem: &ExternalMemory,
        replay: usize,
        cfg: &TrainConfig,
        ctx: &mut TrainContext<'_>,
    ) -> Result<Hypothesis> {
        let fresh_per_batch = cfg.batch_size - replay;
        let mut order: Vec<usize> = (0..tr.len()).collect();
        let mut shuffle = rng::stream(cfg.seed, &[rng::TAG_SHUFFLE, ctx.step as u64]);
        let mut draws: ChaCha8Rng = rng::stream(cfg.seed, &[rng::TAG_REPLAY, ctx.step as u64]);
        let mut k = 0;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut shuffle);
            for chunk in order.chunks(fresh_per_batch) {
                let mut batch: Vec<&LabeledExample> = chunk.iter().map(|&i| &tr.examples[i]).collect();
                batch.extend((0..replay).map(|_| &mem.stored[draws.gen_range(0..mem.stored.len())]));
                update(&mut h, &batch, cfg, ctx, &no_adjust)?;
                k += 1;
                ctx.notify(k, &h);
            }
        }
        Ok(h)
    }
}

/// Empirical diagonal Fisher: mean squared per-sample gradient of
/// `log p(y|x)` over `n_samples` draws (with replacement) from `tr`.
pub fn estimate_fisher_diag(
    h: &Hypothesis,
    tr: &Dataset,
    n_samples: usize,
    seed: u64,
    ops: &mut OpsCounter,
) -> Result<Vec<f32>> {
    if tr.is_empty() {
        return Err(StrategyError::EmptyTrainingSet);
    }
    if n_samples == 0 {
        return Err(StrategyError::InvalidConfig("fisher sample count must be >= 1".into()));
    }
    let mut draws = rng::stream(seed, &[rng::TAG_FISHER]);
    let mut fisher = vec![0.0f32; h.param_count()];
    for _ in 0..n_samples {
        let ex = &tr.examples[draws.gen_range(0..tr.len())];
        let (_, g) = h.loss_and_grad(&[ex], ops)?;
        fisher.iter_mut().zip(&g.0).for_each(|(f, gi)| *f += gi * gi);
    }
    let inv = 1.0 / n_samples as f32;
    fisher.iter_mut().for_each(|f| *f *= inv);
    Ok(fisher)
}

/// `(λ/2) Σ_anchors Σ_k F_k (θ_k − θ*_k)²`.
pub fn ewc_penalty<'a>(params: &[f32], anchors: impl IntoIterator<Item = &'a Anchor>, lambda: f32) -> f64 {
    let mut total = 0.0f64;
    for a in anchors {
        for ((p, s), f) in params.iter().zip(&a.params).zip(&a.fisher) {
            let d = (*p - *s) as f64;
            total += *f as f64 * d * d;
        }
    }
    0.5 * lambda as f64 * total
}

/// Adds `λ F_k (θ_k − θ*_k)` per anchor into `grad`. Entries with zero
/// weight are skipped so a vanishing penalty leaves `grad` bit-identical.
pub fn add_ewc_penalty_grad<'a>(
    params: &[f32],
    anchors: impl IntoIterator<Item = &'a Anchor>,
    lambda: f32,
    grad: &mut [f32],
) {
    if lambda == 0.0 {
        return;
    }
    for a in anchors {
        for (k, g) in grad.iter_mut().enumerate() {
            let w = lambda * a.fisher[k];
            if w != 0.0 {
                *g += w * (params[k] - a.params[k]);
            }
        }
    }
}

/// Elastic weight consolidation with diagonal Fisher anchors; stores no raw
/// examples.
#[derive(Debug, Clone, Copy, Default)]
pub struct Ewc;

impl Ewc {
    /// Anchors that constrain training on a batch with label `task`. Under the
    /// label-driven policy the current task's own anchor is excluded because
    /// it is about to be refreshed.
    fn active(mem: &ExternalMemory, task: Option<u32>, policy: AnchorPolicy) -> Vec<&Anchor> {
        mem.anchors
            .iter()
            .filter(|a| match (policy, task) {
                (AnchorPolicy::LabelDriven, Some(t)) => a.task_label != Some(t),
                _ => true,
            })
            .collect()
    }
}

impl Strategy for Ewc {
    fn name(&self) -> &'static str {
        "ewc"
    }

    fn initial_memory(&self, _cfg: &TrainConfig) -> ExternalMemory {
        ExternalMemory::bounded(0)
    }

    fn train(
        &self,
        h_prev: &Hypothesis,
        tr: &Dataset,
        mut mem: ExternalMemory,
        task: Option<u32>,
        cfg: &TrainConfig,
        ctx: &mut TrainContext<'_>,
    ) -> Result<(Hypothesis, ExternalMemory)> {
        check_inputs(tr, cfg)?;
        let active = Self::active(&mem, task, cfg.anchor_policy);
        let lambda = cfg.lambda_ewc;
        let adjust = |h: &Hypothesis, g: &mut GradientVector| {
            add_ewc_penalty_grad(h.params(), active.iter().copied(), lambda, &mut g.0);
        };
        let h = sgd_epochs(h_prev.clone(), &tr.examples, cfg, ctx, &adjust)?;

        let fisher_seed = rng::derive_seed(cfg.seed, &[ctx.step as u64]);
        let fisher = estimate_fisher_diag(&h, tr, cfg.fisher_samples, fisher_seed, ctx.ops)?;
        let label = match cfg.anchor_policy {
            AnchorPolicy::LabelDriven => task,
            AnchorPolicy::PerBatch => None,
        };
        let anchor = Anchor {
            task_label: label,
            params: h.params().to_vec(),
            fisher,
        };
        match label.and_then(|t| mem.anchors.iter().position(|a| a.task_label == Some(t))) {
            Some(pos) => mem.anchors[pos] = anchor,
            None => mem.anchors.push(anchor),
        }
        Ok((h, mem))
    }
}
