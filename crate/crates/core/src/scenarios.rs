//! Task sequences. A [`Scenario`] is an ordered list of train/test batches
//! with task labels, a scenario kind (SIT/MT/MIT), a content-update type
//! (NI/NC/NIC) and a label regime. Class ids are global across batches.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{Dataset, LabeledExample};
use crate::rng;

/// Keep-probability for task labels under the sparse regime.
pub const DEFAULT_SPARSE_KEEP: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("{classes} classes cannot be split into groups of {per_task}")]
    Indivisible { classes: usize, per_task: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dataset has no image side; rotation needs square images")]
    NotImages,
    #[error("scenario invariant violated: {0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, ScenarioError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioKind {
    #[serde(rename = "SIT")]
    SingleIncrementalTask,
    #[serde(rename = "MT")]
    MultiTask,
    #[serde(rename = "MIT")]
    MultiIncrementalTask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateType {
    #[serde(rename = "NI")]
    NewInstances,
    #[serde(rename = "NC")]
    NewConcepts,
    #[serde(rename = "NIC")]
    NewInstancesAndConcepts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelRegime {
    None,
    Sparse,
    Oracle,
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SingleIncrementalTask => "SIT",
            Self::MultiTask => "MT",
            Self::MultiIncrementalTask => "MIT",
        })
    }
}

impl fmt::Display for UpdateType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::NewInstances => "NI",
            Self::NewConcepts => "NC",
            Self::NewInstancesAndConcepts => "NIC",
        })
    }
}

/// Input transform that defines a batch's distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Transform {
    Identity,
    /// `out[p] = in[perm[p]]`.
    Permutation { perm: Vec<usize> },
    Rotation { degrees: f64 },
}

impl Transform {
    pub fn apply(&self, features: &[f32], image_side: Option<usize>) -> Vec<f32> {
        match self {
            Transform::Identity => features.to_vec(),
            Transform::Permutation { perm } => perm.iter().map(|&p| features[p]).collect(),
            Transform::Rotation { degrees } => rotate_image(
                features,
                image_side.expect("rotation requires image side"),
                *degrees,
            ),
        }
    }
}

/// Train set `Tr_i`, test set `Te_i` and optional task label `t_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    /// 1-based position in the sequence.
    pub index: usize,
    pub train: Dataset,
    pub test: Dataset,
    pub task_label: Option<u32>,
    /// Identifier of the underlying distribution `D_i`; equal ids mean the
    /// same classes under the same transform.
    pub distribution: usize,
    pub classes: BTreeSet<usize>,
    pub transform: Transform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub batches: Vec<TaskBatch>,
    pub kind: ScenarioKind,
    pub update_type: UpdateType,
    pub label_regime: LabelRegime,
    /// Permanent labels: task labels are also available at test time, and
    /// evaluation restricts predictions to the batch's classes.
    pub test_time_labels: bool,
    pub global_class_count: usize,
    pub constructor: String,
}

/// Train/test pools a scenario is carved from.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseData {
    pub train: Dataset,
    pub test: Dataset,
}

/// Serializable summary of a scenario, stored in run records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDescriptor {
    pub constructor: String,
    pub kind: ScenarioKind,
    pub update_type: UpdateType,
    pub label_regime: LabelRegime,
    pub test_time_labels: bool,
    pub global_class_count: usize,
    pub batches: Vec<BatchDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchDescriptor {
    pub index: usize,
    pub task_label: Option<u32>,
    pub distribution: usize,
    pub classes: Vec<usize>,
    pub train_size: usize,
    pub test_size: usize,
}

impl Scenario {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn with_test_time_labels(mut self, on: bool) -> Self {
        self.test_time_labels = on;
        self
    }

    pub fn descriptor(&self) -> ScenarioDescriptor {
        ScenarioDescriptor {
            constructor: self.constructor.clone(),
            kind: self.kind,
            update_type: self.update_type,
            label_regime: self.label_regime,
            test_time_labels: self.test_time_labels,
            global_class_count: self.global_class_count,
            batches: self
                .batches
                .iter()
                .map(|b| BatchDescriptor {
                    index: b.index,
                    task_label: b.task_label,
                    distribution: b.distribution,
                    classes: b.classes.iter().copied().collect(),
                    train_size: b.train.len(),
                    test_size: b.test.len(),
                })
                .collect(),
        }
    }

    /// Bits of every training example across all batches (lifetime dataset).
    pub fn lifetime_dataset_bits(&self) -> u64 {
        self.batches.iter().map(|b| b.train.mem_bits()).sum()
    }
}

fn transformed(ds: &Dataset, transform: &Transform) -> Dataset {
    if matches!(transform, Transform::Identity) {
        return ds.clone();
    }
    ds.with_examples(
        ds.examples
            .iter()
            .map(|e| LabeledExample {
                features: transform.apply(&e.features, ds.image_side),
                label: e.label,
            })
            .collect(),
    )
}

fn class_groups(class_count: usize, per_task: usize, seed: u64) -> Result<Vec<BTreeSet<usize>>> {
    if per_task == 0 || class_count == 0 || !class_count.is_multiple_of(per_task) {
        return Err(ScenarioError::Indivisible {
            classes: class_count,
            per_task,
        });
    }
    let mut order: Vec<usize> = (0..class_count).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::TAG_TASK, 0]));
    Ok(order.chunks(per_task).map(|c| c.iter().copied().collect()).collect())
}

fn check_base(base: &BaseData) -> Result<()> {
    if base.train.feature_dim != base.test.feature_dim || base.train.class_count != base.test.class_count {
        return Err(ScenarioError::InvalidParameter(
            "train and test pools disagree on shape".into(),
        ));
    }
    Ok(())
}

/// Split-style sequence: classes partitioned into disjoint groups in shuffled
/// order, one batch per group (NC, MT, oracle labels).
pub fn make_split(base: &BaseData, classes_per_task: usize, seed: u64) -> Result<Scenario> {
    check_base(base)?;
    let groups = class_groups(base.train.class_count, classes_per_task, seed)?;
    let batches = groups
        .into_iter()
        .enumerate()
        .map(|(g, classes)| TaskBatch {
            index: g + 1,
            train: base.train.filter_classes(&classes),
            test: base.test.filter_classes(&classes),
            task_label: Some(g as u32 + 1),
            distribution: g,
            classes,
            transform: Transform::Identity,
        })
        .collect();
    let sc = Scenario {
        batches,
        kind: ScenarioKind::MultiTask,
        update_type: UpdateType::NewConcepts,
        label_regime: LabelRegime::Oracle,
        test_time_labels: false,
        global_class_count: base.train.class_count,
        constructor: "split".into(),
    };
    validate(&sc)?;
    Ok(sc)
}

/// Random feature permutation for task `k` (1-based); task 1 is the identity.
pub fn task_permutation(dim: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..dim).collect();
    if k > 1 {
        perm.shuffle(&mut rng::stream(seed, &[rng::TAG_TASK, 1, k as u64]));
    }
    perm
}

/// Permuted-input sequence (NI, MT, oracle labels).
pub fn make_permuted(base: &BaseData, n_tasks: usize, seed: u64) -> Result<Scenario> {
    check_base(base)?;
    if n_tasks == 0 {
        return Err(ScenarioError::InvalidParameter("n_tasks must be >= 1".into()));
    }
    let dim = base.train.feature_dim;
    let batches = (1..=n_tasks)
        .map(|k| {
            let transform = if k == 1 {
                Transform::Identity
            } else {
                Transform::Permutation {
                    perm: task_permutation(dim, k, seed),
                }
            };
            TaskBatch {
                index: k,
                train: transformed(&base.train, &transform),
                test: transformed(&base.test, &transform),
                task_label: Some(k as u32),
                distribution: k - 1,
                classes: base.train.class_set(),
                transform,
            }
        })
        .collect();
    let sc = Scenario {
        batches,
        kind: ScenarioKind::MultiTask,
        update_type: UpdateType::NewInstances,
        label_regime: LabelRegime::Oracle,
        test_time_labels: false,
        global_class_count: base.train.class_count,
        constructor: "permuted".into(),
    };
    validate(&sc)?;
    Ok(sc)
}

/// `(cos, sin)` with exact values at multiples of 90 degrees.
fn cos_sin_deg(degrees: f64) -> (f64, f64) {
    let quarter = degrees / 90.0;
    if (quarter - quarter.round()).abs() < 1e-12 {
        match (quarter.round() as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let r = degrees.to_radians();
        (r.cos(), r.sin())
    }
}

/// Rotate a row-major square image counter-clockwise by `degrees` about its
/// center, with bilinear sampling and zero fill outside the source grid.
pub fn rotate_image(img: &[f32], side: usize, degrees: f64) -> Vec<f32> {
    let (cos, sin) = cos_sin_deg(degrees);
    let center = (side as f64 - 1.0) / 2.0;
    let at = |r: i64, c: i64| -> f64 {
        if r < 0 || c < 0 || r >= side as i64 || c >= side as i64 {
            0.0
        } else {
            img[r as usize * side + c as usize] as f64
        }
    };
    let mut out = vec![0.0f32; side * side];
    for r in 0..side {
        for c in 0..side {
            // Destination in y-up coordinates, rotated back into the source.
            let x = c as f64 - center;
            let y = center - r as f64;
            let xs = x * cos + y * sin;
            let ys = -x * sin + y * cos;
            let (cs, rs) = (xs + center, center - ys);
            let (c0, r0) = (cs.floor(), rs.floor());
            let (fc, fr) = (cs - c0, rs - r0);
            let (c0, r0) = (c0 as i64, r0 as i64);
            let v = at(r0, c0) * (1.0 - fr) * (1.0 - fc)
                + at(r0, c0 + 1) * (1.0 - fr) * fc
                + at(r0 + 1, c0) * fr * (1.0 - fc)
                + at(r0 + 1, c0 + 1) * fr * fc;
            out[r * side + c] = v as f32;
        }
    }
    out
}

/// Rotated-image sequence, one batch per angle (NI, MT, oracle labels).
pub fn make_rotated(base: &BaseData, angles: &[f64], _seed: u64) -> Result<Scenario> {
    check_base(base)?;
    if base.train.image_side.is_none() {
        return Err(ScenarioError::NotImages);
    }
    if angles.is_empty() {
        return Err(ScenarioError::InvalidParameter("angles must be non-empty".into()));
    }
    let batches = angles
        .iter()
        .enumerate()
        .map(|(k, &degrees)| {
            let transform = Transform::Rotation { degrees };
            TaskBatch {
                index: k + 1,
                train: transformed(&base.train, &transform),
                test: transformed(&base.test, &transform),
                task_label: Some(k as u32 + 1),
                distribution: k,
                classes: base.train.class_set(),
                transform,
            }
        })
        .collect();
    let sc = Scenario {
        batches,
        kind: ScenarioKind::MultiTask,
        update_type: UpdateType::NewInstances,
        label_regime: LabelRegime::Oracle,
        test_time_labels: false,
        global_class_count: base.train.class_count,
        constructor: "rotated".into(),
    };
    validate(&sc)?;
    Ok(sc)
}

/// Position of each batch in a NIC sequence: a group introduced for the first
/// time, or a revisit of an earlier group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    New(usize),
    Revisit(usize),
}

fn nic_schedule(groups: usize, revisits: usize, seed: u64) -> Vec<Step> {
    let mut steps = Vec::with_capacity(groups + revisits);
    let mut placed = 0;
    let draw = |introduced: usize, n: usize| {
        rng::stream(seed, &[rng::TAG_TASK, 2, n as u64]).gen_range(0..introduced)
    };
    for g in 0..groups {
        steps.push(Step::New(g));
        if g >= 1 && placed < revisits {
            steps.push(Step::Revisit(draw(g + 1, placed)));
            placed += 1;
        }
    }
    while placed < revisits {
        steps.push(Step::Revisit(draw(groups, placed)));
        placed += 1;
    }
    steps
}

/// Mixed sequence: new class groups interleaved with revisits that bring
/// fresh (previously unseen) samples of earlier groups (NIC, MIT, oracle
/// labels). `revisits == 0` yields the split sequence.
pub fn make_nic(base: &BaseData, classes_per_task: usize, revisits: usize, seed: u64) -> Result<Scenario> {
    if revisits == 0 {
        return make_split(base, classes_per_task, seed);
    }
    check_base(base)?;
    let groups = class_groups(base.train.class_count, classes_per_task, seed)?;
    if groups.len() < 2 {
        return Err(ScenarioError::InvalidParameter(
            "NIC sequences need at least two class groups".into(),
        ));
    }
    let steps = nic_schedule(groups.len(), revisits, seed);

    // Each class's training pool is shuffled once and cut into one disjoint
    // chunk per occurrence of its group.
    let mut occurrences = vec![0usize; groups.len()];
    for s in &steps {
        let (Step::New(g) | Step::Revisit(g)) = *s;
        occurrences[g] += 1;
    }
    let mut chunks: Vec<Vec<Vec<LabeledExample>>> = Vec::with_capacity(groups.len());
    for (g, classes) in groups.iter().enumerate() {
        let mut per_chunk = vec![Vec::new(); occurrences[g]];
        for &c in classes {
            let mut pool: Vec<&LabeledExample> = base.train.examples.iter().filter(|e| e.label == c).collect();
            pool.shuffle(&mut rng::stream(seed, &[rng::TAG_TASK, 3, c as u64]));
            if pool.len() < occurrences[g] {
                return Err(ScenarioError::InvalidParameter(format!(
                    "class {c} has {} training samples, needs {} for its revisits",
                    pool.len(),
                    occurrences[g]
                )));
            }
            let n = occurrences[g];
            for (k, chunk) in per_chunk.iter_mut().enumerate() {
                let (lo, hi) = (k * pool.len() / n, (k + 1) * pool.len() / n);
                chunk.extend(pool[lo..hi].iter().map(|&e| e.clone()));
            }
        }
        chunks.push(per_chunk);
    }

    let mut used = vec![0usize; groups.len()];
    let batches = steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (Step::New(g) | Step::Revisit(g)) = *s;
            let train = base.train.with_examples(std::mem::take(&mut chunks[g][used[g]]));
            used[g] += 1;
            TaskBatch {
                index: i + 1,
                train,
                test: base.test.filter_classes(&groups[g]),
                task_label: Some(g as u32 + 1),
                distribution: g,
                classes: groups[g].clone(),
                transform: Transform::Identity,
            }
        })
        .collect();
    let sc = Scenario {
        batches,
        kind: ScenarioKind::MultiIncrementalTask,
        update_type: UpdateType::NewInstancesAndConcepts,
        label_regime: LabelRegime::Oracle,
        test_time_labels: false,
        global_class_count: base.train.class_count,
        constructor: "nic".into(),
    };
    validate(&sc)?;
    Ok(sc)
}

/// Impose a label regime with the default sparse keep-probability.
pub fn apply_label_regime(sc: &Scenario, regime: LabelRegime, seed: u64) -> Result<Scenario> {
    apply_label_regime_with(sc, regime, DEFAULT_SPARSE_KEEP, seed)
}

/// `None` drops every label (the scenario becomes SIT-equivalent), `Sparse`
/// keeps each label independently with probability `keep`, `Oracle` is the
/// identity.
pub fn apply_label_regime_with(sc: &Scenario, regime: LabelRegime, keep: f64, seed: u64) -> Result<Scenario> {
    if sc.label_regime != LabelRegime::Oracle {
        return Err(ScenarioError::InvalidParameter(
            "label regimes apply to oracle-labelled scenarios".into(),
        ));
    }
    if !(0.0..=1.0).contains(&keep) {
        return Err(ScenarioError::InvalidParameter("keep probability outside [0, 1]".into()));
    }
    let mut out = sc.clone();
    out.label_regime = regime;
    match regime {
        LabelRegime::Oracle => {}
        LabelRegime::None => {
            out.batches.iter_mut().for_each(|b| b.task_label = None);
            out.kind = ScenarioKind::SingleIncrementalTask;
        }
        LabelRegime::Sparse => {
            for b in &mut out.batches {
                let mut r = rng::stream(seed, &[rng::TAG_REGIME, b.index as u64]);
                if !r.gen_bool(keep) {
                    b.task_label = None;
                }
            }
        }
    }
    validate(&out)?;
    Ok(out)
}

fn invariant(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invariant(msg.into())
}

/// Re-check every structural invariant of a scenario.
pub fn validate(sc: &Scenario) -> Result<()> {
    if sc.batches.is_empty() {
        return Err(invariant("scenario has no batches"));
    }
    for (pos, b) in sc.batches.iter().enumerate() {
        if b.index != pos + 1 {
            return Err(invariant(format!("batch at position {pos} has index {}", b.index)));
        }
        if b.train.is_empty() || b.test.is_empty() {
            return Err(invariant(format!("batch {} has an empty train or test set", b.index)));
        }
        if b.train.class_set() != b.classes || !b.test.class_set().is_subset(&b.classes) {
            return Err(invariant(format!("batch {} class sets disagree", b.index)));
        }
        if b.classes.iter().any(|&c| c >= sc.global_class_count) {
            return Err(invariant(format!("batch {} uses a class outside the global space", b.index)));
        }
    }

    let labels: Vec<Option<u32>> = sc.batches.iter().map(|b| b.task_label).collect();
    match sc.label_regime {
        LabelRegime::None if labels.iter().any(Option::is_some) => {
            return Err(invariant("no-label regime but a task label is present"));
        }
        LabelRegime::Oracle => {
            if labels.iter().any(Option::is_none) {
                return Err(invariant("oracle regime but a task label is missing"));
            }
            for a in &sc.batches {
                for b in &sc.batches {
                    if (a.task_label == b.task_label) != (a.distribution == b.distribution) {
                        return Err(invariant(format!(
                            "oracle labels of batches {} and {} do not track their distributions",
                            a.index, b.index
                        )));
                    }
                }
            }
        }
        _ => {}
    }

    let present: Vec<u32> = labels.iter().flatten().copied().collect();
    let mut repeated = false;
    let mut distinct = false;
    for (i, a) in present.iter().enumerate() {
        for b in &present[i + 1..] {
            if a == b {
                repeated = true;
            } else {
                distinct = true;
            }
        }
    }
    match sc.kind {
        ScenarioKind::SingleIncrementalTask if distinct => {
            return Err(invariant("SIT requires all task labels equal"));
        }
        ScenarioKind::MultiTask if repeated => {
            return Err(invariant("MT requires pairwise distinct task labels"));
        }
        ScenarioKind::MultiIncrementalTask
            if sc.label_regime == LabelRegime::Oracle && !(repeated && distinct) =>
        {
            return Err(invariant("MIT requires both a repeated and a distinct task-label pair"));
        }
        _ => {}
    }

    let sets: Vec<BTreeSet<usize>> = sc.batches.iter().map(|b| b.train.class_set()).collect();
    let all_disjoint = sets
        .iter()
        .enumerate()
        .all(|(i, a)| sets[i + 1..].iter().all(|b| a.is_disjoint(b)));
    let all_equal = sets.windows(2).all(|w| w[0] == w[1]);
    match sc.update_type {
        UpdateType::NewConcepts if !all_disjoint => {
            return Err(invariant("NC requires pairwise disjoint class sets"));
        }
        UpdateType::NewInstances if !all_equal => {
            return Err(invariant("NI requires one shared class set"));
        }
        UpdateType::NewInstancesAndConcepts if sets.len() >= 2 && (all_disjoint || all_equal) => {
            return Err(invariant("NIC must mix new and previously seen classes"));
        }
        _ => {}
    }
    Ok(())
}
