//! Continual-learning metrics over the accuracy matrix `R`, the mini-batch
//! log and the resource log.
//!
//! Indices are 0-based throughout: `R[i][j]` is the accuracy on test set `j`
//! after training stage `i`.
//!
//! The forgetting ratio `ρ` follows its printed form literally: a `1/N`
//! prefactor over the full `N×N` double sum. Its magnitude therefore scales
//! with `N` (all-random accuracy gives `ρ = −N`).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::Dataset;
use crate::harness::{AccuracyMatrix, MiniBatchLog, ResourceLog, RunRecord};

pub const WEIGHT_TOLERANCE: f64 = 1e-9;

/// Criterion keys used by the default score.
pub const DEFAULT_CRITERIA: [&str; 7] = ["A", "REM", "BWT+", "FWT", "MS", "SSS", "CE"];

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("accuracy matrix is empty or not square")]
    EmptyMatrix,
    #[error("{0} is undefined for a single task")]
    SingleTask(&'static str),
    #[error("{0}")]
    Degenerate(String),
    #[error("mini-batch log has no entry a[{task}][{batch}][{test}]")]
    MissingEntry { task: usize, batch: usize, test: usize },
    #[error("weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("criterion {name} = {value} lies outside [0, 1]")]
    CriterionRange { name: String, value: f64 },
    #[error("no value for criterion {0}")]
    MissingCriterion(String),
    #[error("inputs disagree in size: {0}")]
    Mismatch(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;

fn square(r: &AccuracyMatrix) -> Result<usize> {
    if r.n == 0 || !r.is_complete() {
        return Err(MetricError::EmptyMatrix);
    }
    Ok(r.n)
}

/// `A`: mean of the lower triangle including the diagonal.
pub fn accuracy_a(r: &AccuracyMatrix) -> Result<f64> {
    let n = square(r)?;
    let sum: f64 = r.rows.iter().enumerate().map(|(i, row)| row[..=i].iter().sum::<f64>()).sum();
    Ok(sum / (n * (n + 1) / 2) as f64)
}

/// Backward transfer: mean of `R[i][j] − R[j][j]` over `i > j`.
pub fn bwt(r: &AccuracyMatrix) -> Result<f64> {
    let n = square(r)?;
    if n < 2 {
        return Err(MetricError::SingleTask("BWT"));
    }
    let diag = r.diagonal();
    let sum: f64 = (1..n)
        .map(|i| (0..i).map(|j| r.get(i, j) - diag[j]).sum::<f64>())
        .sum();
    Ok(sum / (n * (n - 1) / 2) as f64)
}

/// `(REM, BWT⁺) = (1 − |min(BWT, 0)|, max(BWT, 0))`.
pub fn rem_and_bwt_plus(bwt: f64) -> (f64, f64) {
    (1.0 - bwt.min(0.0).abs(), bwt.max(0.0))
}

/// Forward transfer: mean of the strictly upper triangle.
pub fn fwt(r: &AccuracyMatrix) -> Result<f64> {
    let n = square(r)?;
    if n < 2 {
        return Err(MetricError::SingleTask("FWT"));
    }
    let sum: f64 = r.rows.iter().enumerate().map(|(i, row)| row[i + 1..].iter().sum::<f64>()).sum();
    Ok(sum / (n * (n - 1) / 2) as f64)
}

/// `Ω = (1/N) Σ_i R[i][i] / R^C[i][i]` against an offline reference diagonal.
pub fn omega(r: &AccuracyMatrix, reference_diag: &[f64]) -> Result<f64> {
    let n = square(r)?;
    if reference_diag.len() != n {
        return Err(MetricError::Mismatch(format!(
            "reference diagonal has {} entries, R is {n}x{n}",
            reference_diag.len()
        )));
    }
    if let Some(i) = reference_diag.iter().position(|&c| c == 0.0) {
        return Err(MetricError::Degenerate(format!(
            "reference accuracy R^C[{i}][{i}] is zero; Omega is undefined"
        )));
    }
    let sum: f64 = r.diagonal().iter().zip(reference_diag).map(|(a, c)| a / c).sum();
    Ok(sum / n as f64)
}

/// `ρ = (1/N) Σ_i Σ_j ((R[i][j] − R^R_j) / (R^C[i][j] − R^R_j) − 1)`.
pub fn forgetting_ratio(r: &AccuracyMatrix, reference: &AccuracyMatrix, random: &[f64]) -> Result<f64> {
    let n = square(r)?;
    if square(reference)? != n || random.len() != n {
        return Err(MetricError::Mismatch("R, R^C and R^R must cover the same tasks".into()));
    }
    let mut sum = 0.0;
    for i in 0..n {
        for (j, &rr) in random.iter().enumerate() {
            let denom = reference.get(i, j) - rr;
            if denom == 0.0 {
                return Err(MetricError::Degenerate(format!(
                    "R^C[{i}][{j}] equals the random baseline {rr}; rho is undefined"
                )));
            }
            sum += (r.get(i, j) - rr) / denom - 1.0;
        }
    }
    Ok(sum / n as f64)
}

/// Expected accuracy of guessing labels at their test-set frequencies:
/// `Σ_c p_c²`.
pub fn random_stratified_accuracy(test: &Dataset) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let total = test.len() as f64;
    test.class_histogram()
        .iter()
        .map(|&c| {
            let p = c as f64 / total;
            p * p
        })
        .sum()
}

/// Learning-curve area. Returns `(Z_0..Z_β, LCA_β)` where
/// `Z_b = (1/N) Σ_i a[i][b][i]`.
pub fn lca(log: &MiniBatchLog, beta: usize) -> Result<(Vec<f64>, f64)> {
    let n = log.tasks.len();
    if n == 0 {
        return Err(MetricError::EmptyMatrix);
    }
    let mut z = Vec::with_capacity(beta + 1);
    for b in 0..=beta {
        let mut sum = 0.0;
        for i in 0..n {
            sum += log.get(i, b, i).ok_or(MetricError::MissingEntry {
                task: i,
                batch: b,
                test: i,
            })?;
        }
        z.push(sum / n as f64);
    }
    let area = z.iter().sum::<f64>() / (beta + 1) as f64;
    Ok((z, area))
}

/// `f_j^k = max_{l<k} a[l][B_l][j] − a[k][B_k][j]`, the drop on test set `j`
/// after stage `k` relative to its best earlier value.
pub fn forgetting_measure(log: &MiniBatchLog, j: usize, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(MetricError::SingleTask("forgetting"));
    }
    let end = |l: usize| -> Result<f64> {
        let b = log.batch_count(l).ok_or(MetricError::MissingEntry {
            task: l,
            batch: 0,
            test: j,
        })?;
        log.get(l, b, j).ok_or(MetricError::MissingEntry {
            task: l,
            batch: b,
            test: j,
        })
    };
    let mut best = f64::NEG_INFINITY;
    for l in 0..k {
        best = best.max(end(l)?);
    }
    Ok(best - end(k)?)
}

/// `MS = min(1, (1/N) Σ_i Mem(θ_1)/Mem(θ_i))`.
pub fn model_size_eff(res: &ResourceLog) -> Result<f64> {
    let first = res.tasks.first().ok_or(MetricError::EmptyMatrix)?.mem_theta_bits as f64;
    let n = res.tasks.len() as f64;
    let sum: f64 = res.tasks.iter().map(|t| first / t.mem_theta_bits as f64).sum();
    Ok((sum / n).min(1.0))
}

/// `SSS = 1 − min(1, (1/N) Σ_i Mem(M_i)/Mem(D))`, counting raw stored
/// examples only.
pub fn samples_storage_eff(res: &ResourceLog) -> Result<f64> {
    if res.tasks.is_empty() {
        return Err(MetricError::EmptyMatrix);
    }
    if res.mem_dataset_bits == 0 {
        return Err(MetricError::Degenerate("lifetime dataset size is zero".into()));
    }
    let d = res.mem_dataset_bits as f64;
    let n = res.tasks.len() as f64;
    let sum: f64 = res.tasks.iter().map(|t| t.mem_samples_bits as f64 / d).sum();
    Ok(1.0 - (sum / n).min(1.0))
}

/// `CE = min(1, (1/N) Σ_i Ops↑↓(Tr_i)·ε / (1 + Ops(Tr_i)))`.
pub fn computational_eff(res: &ResourceLog, epsilon: f64) -> Result<f64> {
    if res.tasks.is_empty() {
        return Err(MetricError::EmptyMatrix);
    }
    let n = res.tasks.len() as f64;
    let sum: f64 = res
        .tasks
        .iter()
        .map(|t| t.ops_unit as f64 * epsilon / (1.0 + t.ops as f64))
        .sum();
    Ok((sum / n).min(1.0))
}

/// Uniform weights over [`DEFAULT_CRITERIA`].
pub fn default_weights() -> BTreeMap<String, f64> {
    let w = 1.0 / DEFAULT_CRITERIA.len() as f64;
    DEFAULT_CRITERIA.iter().map(|c| (c.to_string(), w)).collect()
}

pub fn check_weights(weights: &BTreeMap<String, f64>) -> Result<()> {
    let sum: f64 = weights.values().sum();
    if (sum - 1.0).abs() > WEIGHT_TOLERANCE || weights.values().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(MetricError::WeightSum(sum));
    }
    Ok(())
}

/// `CL_score = Σ w_c · c` over the weighted criteria.
pub fn cl_score(criteria: &BTreeMap<String, f64>, weights: &BTreeMap<String, f64>) -> Result<f64> {
    check_weights(weights)?;
    let mut score = 0.0;
    for (name, w) in weights {
        let value = *criteria
            .get(name)
            .ok_or_else(|| MetricError::MissingCriterion(name.clone()))?;
        if !(0.0..=1.0).contains(&value) {
            return Err(MetricError::CriterionRange {
                name: name.clone(),
                value,
            });
        }
        score += w * value;
    }
    Ok(score)
}

fn per_criterion<'a>(
    runs: &'a [BTreeMap<String, f64>],
    weights: &'a BTreeMap<String, f64>,
) -> Result<Vec<(&'a String, f64, Vec<f64>)>> {
    if runs.is_empty() {
        return Err(MetricError::Mismatch("no runs to aggregate".into()));
    }
    weights
        .iter()
        .map(|(name, &w)| {
            let values = runs
                .iter()
                .map(|r| r.get(name).copied().ok_or_else(|| MetricError::MissingCriterion(name.clone())))
                .collect::<Result<Vec<f64>>>()?;
            Ok((name, w, values))
        })
        .collect()
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Score from criteria averaged over runs.
pub fn cl_score_over_runs(runs: &[BTreeMap<String, f64>], weights: &BTreeMap<String, f64>) -> Result<f64> {
    let means: BTreeMap<String, f64> = per_criterion(runs, weights)?
        .into_iter()
        .map(|(name, _, v)| (name.clone(), mean(&v)))
        .collect();
    cl_score(&means, weights)
}

/// `CL_stability = 1 − Σ w_c σ(c)` with population σ across runs.
pub fn cl_stability(runs: &[BTreeMap<String, f64>], weights: &BTreeMap<String, f64>) -> Result<f64> {
    check_weights(weights)?;
    let spread: f64 = per_criterion(runs, weights)?
        .into_iter()
        .map(|(_, w, v)| w * population_std(&v))
        .sum();
    Ok(1.0 - spread)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricOptions {
    /// LCA horizon; `None` uses the smallest per-task mini-batch count.
    pub beta: Option<usize>,
    /// CE scaling factor; `None` uses the run's epoch count.
    pub epsilon: Option<f64>,
    pub weights: BTreeMap<String, f64>,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            beta: None,
            epsilon: None,
            weights: default_weights(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingEntry {
    pub test: usize,
    pub after: usize,
    pub value: f64,
}

/// Every metric of one run. Metrics undefined for the run (single task, no
/// reference, degenerate denominators) are `None`, with the reason in
/// `notes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub strategy: String,
    pub seed: u64,
    pub n: usize,
    pub a: f64,
    pub bwt: Option<f64>,
    pub rem: Option<f64>,
    pub bwt_plus: Option<f64>,
    pub fwt: Option<f64>,
    pub omega: Option<f64>,
    pub rho: Option<f64>,
    pub beta: usize,
    pub z_curve: Vec<f64>,
    pub lca: Option<f64>,
    pub forgetting: Vec<ForgettingEntry>,
    pub ms: f64,
    pub sss: f64,
    pub ce: f64,
    pub epsilon: f64,
    pub cl_score: Option<f64>,
    pub weights: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

impl MetricReport {
    /// Criterion values available for scoring.
    pub fn criteria(&self) -> BTreeMap<String, f64> {
        let mut c = BTreeMap::new();
        c.insert("A".to_owned(), self.a);
        let optional = [
            ("REM", self.rem),
            ("BWT+", self.bwt_plus),
            ("FWT", self.fwt),
            ("LCA", self.lca),
            ("Omega", self.omega),
        ];
        for (k, v) in optional {
            if let Some(v) = v {
                c.insert(k.to_owned(), v);
            }
        }
        c.insert("MS".to_owned(), self.ms);
        c.insert("SSS".to_owned(), self.sss);
        c.insert("CE".to_owned(), self.ce);
        c
    }
}

/// All metrics for `record`. `reference` is a cumulative run on the same
/// scenario and seed, needed for `Ω` and `ρ`.
pub fn compute_report(record: &RunRecord, reference: Option<&RunRecord>, opts: &MetricOptions) -> Result<MetricReport> {
    check_weights(&opts.weights)?;
    let r = &record.accuracy;
    let n = square(r)?;
    let mut notes = Vec::new();
    let mut note = |e: MetricError| notes.push(e.to_string());

    let a = accuracy_a(r)?;
    let bwt_v = bwt(r).map_err(&mut note).ok();
    let (rem, bwt_plus) = match bwt_v.map(rem_and_bwt_plus) {
        Some((x, y)) => (Some(x), Some(y)),
        None => (None, None),
    };
    let fwt_v = fwt(r).map_err(&mut note).ok();

    let (omega_v, rho_v) = match reference {
        Some(rc) => (
            omega(r, &rc.accuracy.diagonal()).map_err(&mut note).ok(),
            forgetting_ratio(r, &rc.accuracy, &record.random_baseline)
                .map_err(&mut note)
                .ok(),
        ),
        None => (None, None),
    };

    let min_batches = (0..n)
        .filter_map(|i| record.minibatch_log.batch_count(i))
        .min()
        .unwrap_or(0);
    let beta = opts.beta.unwrap_or(min_batches);
    let (z_curve, lca_v) = match lca(&record.minibatch_log, beta) {
        Ok((z, v)) => (z, Some(v)),
        Err(e) => {
            note(e);
            (Vec::new(), None)
        }
    };

    let mut forgetting = Vec::new();
    for k in 1..n {
        for j in 0..k {
            match forgetting_measure(&record.minibatch_log, j, k) {
                Ok(value) => forgetting.push(ForgettingEntry { test: j, after: k, value }),
                Err(e) => note(e),
            }
        }
    }

    let epsilon = opts.epsilon.unwrap_or(record.config.epochs as f64);
    let ms = model_size_eff(&record.resources)?;
    let sss = samples_storage_eff(&record.resources)?;
    let ce = computational_eff(&record.resources, epsilon)?;

    let mut report = MetricReport {
        strategy: record.strategy.clone(),
        seed: record.seed,
        n,
        a,
        bwt: bwt_v,
        rem,
        bwt_plus,
        fwt: fwt_v,
        omega: omega_v,
        rho: rho_v,
        beta,
        z_curve,
        lca: lca_v,
        forgetting,
        ms,
        sss,
        ce,
        epsilon,
        cl_score: None,
        weights: opts.weights.clone(),
        notes,
    };
    match cl_score(&report.criteria(), &opts.weights) {
        Ok(s) => report.cl_score = Some(s),
        Err(e) => report.notes.push(format!("CL_score: {e}")),
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionSummary {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

/// Mean ± population σ per criterion across runs, plus the aggregate score
/// and stability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub criteria: Vec<CriterionSummary>,
    pub cl_score: Option<f64>,
    pub cl_stability: Option<f64>,
    pub weights: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

pub fn aggregate(reports: &[MetricReport], weights: &BTreeMap<String, f64>) -> AggregateReport {
    let runs: Vec<BTreeMap<String, f64>> = reports.iter().map(MetricReport::criteria).collect();
    let mut names: Vec<String> = runs.iter().flat_map(|r| r.keys().cloned()).collect();
    names.sort();
    names.dedup();
    let criteria = names
        .into_iter()
        .filter_map(|name| {
            let values: Vec<f64> = runs.iter().filter_map(|r| r.get(&name).copied()).collect();
            (values.len() == runs.len() && !values.is_empty()).then(|| CriterionSummary {
                mean: mean(&values),
                std: population_std(&values),
                name,
            })
        })
        .collect();
    let mut notes = Vec::new();
    let cl_score = cl_score_over_runs(&runs, weights)
        .map_err(|e| notes.push(format!("CL_score: {e}")))
        .ok();
    let cl_stability = cl_stability(&runs, weights)
        .map_err(|e| notes.push(format!("CL_stability: {e}")))
        .ok();
    AggregateReport {
        runs: reports.len(),
        criteria,
        cl_score,
        cl_stability,
        weights: weights.clone(),
        notes,
    }
}
