//! Independent reference implementations used as test oracles. They are
//! written against the formulas and the parameter layout directly, with
//! 1-based loops where the formulas use them, and share no code with the
//! library beyond plain data types.

#![allow(dead_code)]

use continual_eval::datasets::{gen_blobs, split_train_test};
use continual_eval::harness::{AccuracyMatrix, MiniBatchEntry, MiniBatchLog, ResourceLog, TaskLog, TaskResources};
use continual_eval::metrics;
use continual_eval::scenarios::{make_split, BaseData, Scenario};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 1-based accessor over a row-major matrix.
fn r1(r: &[Vec<f64>], i: usize, j: usize) -> f64 {
    r[i - 1][j - 1]
}

pub fn oracle_a(r: &[Vec<f64>]) -> f64 {
    let n = r.len();
    let mut s = 0.0;
    for i in 1..=n {
        for j in 1..=i {
            s += r1(r, i, j);
        }
    }
    s / ((n * (n + 1)) as f64 / 2.0)
}

pub fn oracle_bwt(r: &[Vec<f64>]) -> f64 {
    let n = r.len();
    let mut s = 0.0;
    for i in 2..=n {
        for j in 1..i {
            s += r1(r, i, j) - r1(r, j, j);
        }
    }
    s / ((n * (n - 1)) as f64 / 2.0)
}

pub fn oracle_rem(bwt: f64) -> f64 {
    1.0 - if bwt < 0.0 { -bwt } else { 0.0 }
}

pub fn oracle_bwt_plus(bwt: f64) -> f64 {
    if bwt > 0.0 {
        bwt
    } else {
        0.0
    }
}

pub fn oracle_fwt(r: &[Vec<f64>]) -> f64 {
    let n = r.len();
    let mut s = 0.0;
    for j in 1..=n {
        for i in 1..j {
            s += r1(r, i, j);
        }
    }
    s / ((n * (n - 1)) as f64 / 2.0)
}

pub fn oracle_omega(r: &[Vec<f64>], rc: &[Vec<f64>]) -> f64 {
    let n = r.len();
    let mut s = 0.0;
    for i in 1..=n {
        s += r1(r, i, i) / r1(rc, i, i);
    }
    s / n as f64
}

pub fn oracle_rho(r: &[Vec<f64>], rc: &[Vec<f64>], rr: &[f64]) -> f64 {
    let n = r.len();
    let mut s = 0.0;
    for i in 1..=n {
        for j in 1..=n {
            s += (r1(r, i, j) - rr[j - 1]) / (r1(rc, i, j) - rr[j - 1]) - 1.0;
        }
    }
    s / n as f64
}

/// `a[i][k][j]` with 1-based task indices.
pub fn a1(log: &MiniBatchLog, i: usize, k: usize, j: usize) -> f64 {
    let task = &log.tasks[i - 1];
    let e = task.entries.iter().find(|e| e.k == k).expect("entry logged");
    e.accuracies[j - 1].expect("accuracy logged")
}

pub fn oracle_lca(log: &MiniBatchLog, beta: usize) -> f64 {
    let n = log.tasks.len();
    let mut area = 0.0;
    for b in 0..=beta {
        let mut z = 0.0;
        for i in 1..=n {
            z += a1(log, i, b, i);
        }
        area += z / n as f64;
    }
    area / (beta + 1) as f64
}

/// `f_j^k` with 1-based `j`, `k`.
pub fn oracle_forgetting(log: &MiniBatchLog, j: usize, k: usize) -> f64 {
    let end = |l: usize| a1(log, l, log.tasks[l - 1].batches, j);
    let mut best = f64::MIN;
    for l in 1..k {
        if end(l) > best {
            best = end(l);
        }
    }
    best - end(k)
}

pub fn oracle_ms(res: &ResourceLog) -> f64 {
    let n = res.tasks.len();
    let mut s = 0.0;
    for i in 1..=n {
        s += res.tasks[0].mem_theta_bits as f64 / res.tasks[i - 1].mem_theta_bits as f64;
    }
    let v = s / n as f64;
    if v < 1.0 {
        v
    } else {
        1.0
    }
}

pub fn oracle_sss(res: &ResourceLog) -> f64 {
    let n = res.tasks.len();
    let mut s = 0.0;
    for i in 1..=n {
        s += res.tasks[i - 1].mem_samples_bits as f64 / res.mem_dataset_bits as f64;
    }
    let v = s / n as f64;
    1.0 - if v < 1.0 { v } else { 1.0 }
}

pub fn oracle_ce(res: &ResourceLog, eps: f64) -> f64 {
    let n = res.tasks.len();
    let mut s = 0.0;
    for i in 1..=n {
        let t = &res.tasks[i - 1];
        s += t.ops_unit as f64 * eps / (1.0 + t.ops as f64);
    }
    let v = s / n as f64;
    if v < 1.0 {
        v
    } else {
        1.0
    }
}

/// Straight-line f64 forward pass over the flat parameter layout: per layer
/// the `out×in` row-major weights, then the `out` biases; tanh between
/// layers, softmax at the end.
pub fn oracle_forward(sizes: &[usize], params: &[f64], x: &[f64]) -> Vec<f64> {
    let mut a: Vec<f64> = x.to_vec();
    let mut off = 0;
    let layers = sizes.len() - 1;
    for l in 0..layers {
        let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
        let w = &params[off..off + fan_in * fan_out];
        let b = &params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
        off += fan_in * fan_out + fan_out;
        let mut z = vec![0.0; fan_out];
        for o in 0..fan_out {
            let mut s = b[o];
            for i in 0..fan_in {
                s += w[o * fan_in + i] * a[i];
            }
            z[o] = s;
        }
        a = if l + 1 < layers { z.iter().map(|v| v.tanh()).collect() } else { z };
    }
    let m = a.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = a.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| v / total).collect()
}

/// Mean cross-entropy in f64.
pub fn oracle_loss(sizes: &[usize], params: &[f64], batch: &[(Vec<f64>, usize)]) -> f64 {
    let mut s = 0.0;
    for (x, y) in batch {
        s -= oracle_forward(sizes, params, x)[*y].ln();
    }
    s / batch.len() as f64
}

/// Central differences of `f` at `p` with step `eps`.
pub fn central_differences(p: &[f64], eps: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut q = p.to_vec();
    (0..p.len())
        .map(|k| {
            q[k] = p[k] + eps;
            let up = f(&q);
            q[k] = p[k] - eps;
            let down = f(&q);
            q[k] = p[k];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Largest relative error between two gradients. Components whose
/// magnitude is below `floor` are compared relative to `floor`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// The behavioural benchmark: 20 Gaussian blobs in 64 dimensions, 100
/// samples per class, split 75/25 and cut into five tasks of four classes.
pub const BENCH_CLASSES: usize = 20;
pub const BENCH_DIM: usize = 64;
pub const BENCH_PER_CLASS: usize = 100;
pub const BENCH_SPREAD: f32 = 2.5;
pub const BENCH_CLASSES_PER_TASK: usize = 4;

pub fn bench_scenario(seed: u64) -> Scenario {
    let ds = gen_blobs(BENCH_CLASSES, BENCH_DIM, BENCH_PER_CLASS, BENCH_SPREAD, seed).unwrap();
    let (train, test) = split_train_test(&ds, 0.25, seed).unwrap();
    make_split(&BaseData { train, test }, BENCH_CLASSES_PER_TASK, seed).unwrap()
}

/// Small scenario for fast structural tests.
pub fn small_scenario(tasks: usize, seed: u64) -> Scenario {
    let ds = gen_blobs(2 * tasks, 6, 24, 0.6, seed).unwrap();
    let (train, test) = split_train_test(&ds, 0.25, seed).unwrap();
    make_split(&BaseData { train, test }, 2, seed).unwrap()
}

/// Random inputs for one metric comparison.
pub struct MetricCase {
    pub r: Vec<Vec<f64>>,
    pub rc: Vec<Vec<f64>>,
    pub rr: Vec<f64>,
    pub log: MiniBatchLog,
    pub res: ResourceLog,
    pub eps: f64,
}

pub fn random_case(rng: &mut ChaCha8Rng) -> MetricCase {
    let n = rng.gen_range(2..=8);
    let mut mat = |lo: f64, hi: f64| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..n).map(|_| rng.gen_range(lo..=hi)).collect()).collect()
    };
    let r = mat(0.0, 1.0);
    // Reference accuracies stay clear of the random baseline so every
    // denominator is defined.
    let rc = mat(0.5, 1.0);
    let rr: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..0.4)).collect();
    let tasks = (0..n)
        .map(|_| {
            let batches = rng.gen_range(1..=6);
            TaskLog {
                batches,
                entries: (0..=batches)
                    .map(|k| MiniBatchEntry {
                        k,
                        accuracies: (0..n).map(|_| Some(rng.gen_range(0.0..=1.0))).collect(),
                    })
                    .collect(),
            }
        })
        .collect();
    let theta0 = rng.gen_range(100..10_000u64);
    let res = ResourceLog {
        tasks: (0..n)
            .map(|_| {
                let ops_unit = rng.gen_range(1..1_000_000u64);
                TaskResources {
                    mem_theta_bits: if rng.gen_bool(0.5) { theta0 } else { rng.gen_range(50..20_000) },
                    mem_samples_bits: rng.gen_range(0..200_000),
                    mem_aux_bits: rng.gen_range(0..1000),
                    ops: ops_unit * rng.gen_range(1..20) + rng.gen_range(0..1000),
                    ops_unit,
                    stored_examples: 0,
                    seen_examples: 0,
                    prev_state_bits: 0,
                }
            })
            .collect(),
        mem_dataset_bits: rng.gen_range(1_000..1_000_000),
    };
    MetricCase {
        r,
        rc,
        rr,
        log: MiniBatchLog { every: 1, tasks },
        res,
        eps: rng.gen_range(1.0..10.0),
    }
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{name}: library {got} vs oracle {want}"))
    }
}

/// Compare every metric with its oracle on one case.
pub fn check_case(c: &MetricCase, tol: f64) -> Result<(), String> {
    let e = |m: metrics::MetricError| m.to_string();
    let r = AccuracyMatrix::from_rows(c.r.clone()).unwrap();
    let rc = AccuracyMatrix::from_rows(c.rc.clone()).unwrap();
    let n = c.r.len();
    close("A", metrics::accuracy_a(&r).map_err(e)?, oracle_a(&c.r), tol)?;
    let bwt = metrics::bwt(&r).map_err(e)?;
    close("BWT", bwt, oracle_bwt(&c.r), tol)?;
    let (rem, plus) = metrics::rem_and_bwt_plus(bwt);
    close("REM", rem, oracle_rem(oracle_bwt(&c.r)), tol)?;
    close("BWT+", plus, oracle_bwt_plus(oracle_bwt(&c.r)), tol)?;
    close("FWT", metrics::fwt(&r).map_err(e)?, oracle_fwt(&c.r), tol)?;
    close("Omega", metrics::omega(&r, &rc.diagonal()).map_err(e)?, oracle_omega(&c.r, &c.rc), tol)?;
    close(
        "rho",
        metrics::forgetting_ratio(&r, &rc, &c.rr).map_err(e)?,
        oracle_rho(&c.r, &c.rc, &c.rr),
        tol,
    )?;
    let beta = c.log.tasks.iter().map(|t| t.batches).min().unwrap();
    close("LCA", metrics::lca(&c.log, beta).map_err(e)?.1, oracle_lca(&c.log, beta), tol)?;
    for k in 2..=n {
        for j in 1..k {
            close(
                "f",
                metrics::forgetting_measure(&c.log, j - 1, k - 1).map_err(e)?,
                oracle_forgetting(&c.log, j, k),
                tol,
            )?;
        }
    }
    close("MS", metrics::model_size_eff(&c.res).map_err(e)?, oracle_ms(&c.res), tol)?;
    close("SSS", metrics::samples_storage_eff(&c.res).map_err(e)?, oracle_sss(&c.res), tol)?;
    close("CE", metrics::computational_eff(&c.res, c.eps).map_err(e)?, oracle_ce(&c.res, c.eps), tol)?;
    Ok(())
}

/// Run `count` random cases; returns the first disagreement.
pub fn metric_oracle_suite(count: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..count {
        check_case(&random_case(&mut rng), 1e-9).map_err(|m| format!("case {case}: {m}"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Harness checks shared by the property tests and the acceptance target.

use continual_eval::config::parse_config;
use continual_eval::datasets::Dataset;
use continual_eval::harness::{run_protocol, run_protocol_with, Budgets, Evaluator, RunOptions, RunRecord};
use continual_eval::learner::{evaluate_accuracy, Hypothesis, LearnerError, OpsCounter};
use continual_eval::report::{load_record, read_json, read_matrix_csv, run_experiment};
use continual_eval::strategies::{
    Cumulative, ExternalMemory, Naive, Strategy, StrategyError, TrainConfig, TrainContext,
};
use std::path::Path;
use std::sync::{Arc, Mutex};

/// Small two-seed experiment with a cumulative reference.
pub const SMALL_EXPERIMENT: &str = r#"
output_dir = "unused"
seeds = [3, 4]

[model]
hidden = [8]
log_every = 2

[scenario]
constructor = "split"
classes_per_task = 2

[scenario.source]
kind = "blobs"
classes = 6
per_class = 40
dim = 5
spread = 0.5

[strategy]
name = "rehearsal"

[strategy.params]
epochs = 3
batch_size = 8
buffer_capacity = 12

[budgets]
memory_relaxation = true

[metrics]
omega = true
rho = true
"#;

#[derive(Debug, Clone)]
enum Event {
    TrainStart { step: usize, train: Dataset },
    TrainEnd { step: usize, params: Vec<f32> },
    Eval { stage: usize, test_index: usize, test: Dataset, params: Vec<f32> },
}

struct SpyStrategy {
    events: Arc<Mutex<Vec<Event>>>,
}

impl Strategy for SpyStrategy {
    fn name(&self) -> &'static str {
        "naive"
    }

    fn initial_memory(&self, cfg: &TrainConfig) -> ExternalMemory {
        Naive.initial_memory(cfg)
    }

    fn train(
        &self,
        h_prev: &Hypothesis,
        tr: &Dataset,
        mem: ExternalMemory,
        task_label: Option<u32>,
        cfg: &TrainConfig,
        ctx: &mut TrainContext<'_>,
    ) -> Result<(Hypothesis, ExternalMemory), StrategyError> {
        let step = ctx.step;
        self.events.lock().unwrap().push(Event::TrainStart { step, train: tr.clone() });
        let out = Naive.train(h_prev, tr, mem, task_label, cfg, ctx)?;
        self.events.lock().unwrap().push(Event::TrainEnd {
            step,
            params: out.0.params().to_vec(),
        });
        Ok(out)
    }
}

struct SpyEvaluator {
    events: Arc<Mutex<Vec<Event>>>,
}

impl Evaluator for SpyEvaluator {
    fn evaluate(
        &mut self,
        stage: usize,
        h: &Hypothesis,
        test_index: usize,
        test: &Dataset,
        allowed: Option<&[usize]>,
    ) -> Result<f64, LearnerError> {
        self.events.lock().unwrap().push(Event::Eval {
            stage,
            test_index,
            test: test.clone(),
            params: h.params().to_vec(),
        });
        evaluate_accuracy(h, test, allowed, &mut OpsCounter::default())
    }
}

/// Strategy sees exactly `Tr_i` at step `i`, in order; no evaluation at
/// stage `i` uses a model trained past batch `i`; row `i` of R is computed
/// from `h_i` on every `Te_j`.
pub fn check_protocol_causality(seed: u64) -> Result<(), String> {
    let sc = small_scenario(3, seed);
    let events = Arc::new(Mutex::new(Vec::new()));
    let strategy = SpyStrategy { events: events.clone() };
    let mut evaluator = SpyEvaluator { events: events.clone() };
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        seed,
        ..TrainConfig::default()
    };
    let opts = RunOptions {
        hidden: vec![6],
        log_every: 1,
    };
    let record = run_protocol_with(&sc, &strategy, &cfg, &Budgets::default(), &opts, &mut evaluator)
        .map_err(|f| f.to_string())?;
    let events = events.lock().unwrap().clone();
    let n = sc.len();

    let mut current = 0usize;
    let mut finished: Vec<Vec<f32>> = Vec::new();
    let mut final_evals: Vec<Vec<(usize, Vec<f32>)>> = vec![Vec::new(); n + 1];
    for e in &events {
        match e {
            Event::TrainStart { step, train } => {
                if *step != current + 1 || *step != finished.len() + 1 {
                    return Err(format!("training step {step} out of order"));
                }
                if train != &sc.batches[step - 1].train {
                    return Err(format!("step {step} did not receive its own training set"));
                }
                current = *step;
            }
            Event::TrainEnd { step, params } => {
                if *step != current {
                    return Err(format!("step {step} ended while {current} was active"));
                }
                finished.push(params.clone());
            }
            Event::Eval {
                stage,
                test_index,
                test,
                params,
            } => {
                // Zero-shot evaluations for stage i come before Tr_i is
                // handed over and must use h_{i-1}.
                let zero_shot = *stage == current + 1 && finished.len() == current;
                if *stage != current && !zero_shot {
                    return Err(format!("evaluation for stage {stage} during step {current}"));
                }
                if zero_shot && current > 0 && params != &finished[current - 1] {
                    return Err(format!("zero-shot row {stage} not computed from h_{current}"));
                }
                if test != &sc.batches[*test_index].test {
                    return Err(format!("stage {stage} evaluated on something other than Te_{}", test_index + 1));
                }
                if finished.len() == *stage {
                    final_evals[*stage].push((*test_index, params.clone()));
                }
            }
        }
    }
    if finished.len() != n {
        return Err(format!("{} training calls for {n} batches", finished.len()));
    }
    for i in 1..=n {
        let row = &final_evals[i];
        let tests: Vec<usize> = row.iter().map(|(j, _)| *j).collect();
        if tests != (0..n).collect::<Vec<_>>() {
            return Err(format!("row {i} evaluated tests {tests:?}"));
        }
        if row.iter().any(|(_, p)| p != &finished[i - 1]) {
            return Err(format!("row {i} not computed from h_{i}"));
        }
        let h = Hypothesis::from_params(&record.layer_sizes, finished[i - 1].clone()).map_err(|e| e.to_string())?;
        for j in 0..n {
            let acc = evaluate_accuracy(&h, &sc.batches[j].test, None, &mut OpsCounter::default())
                .map_err(|e| e.to_string())?;
            if acc != record.accuracy.get(i - 1, j) {
                return Err(format!("R[{i}][{}] = {} but h_{i} scores {acc}", j + 1, record.accuracy.get(i - 1, j)));
            }
        }
    }
    Ok(())
}

/// Two runs with the same seed give the same record, timestamp aside.
pub fn check_run_determinism(seed: u64) -> Result<(), String> {
    let sc = small_scenario(3, seed);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        lambda_ewc: 3.0,
        fisher_samples: 20,
        seed,
        ..TrainConfig::default()
    };
    for name in ["naive", "rehearsal", "ewc"] {
        let s = continual_eval::strategies::strategy_by_name(name).unwrap();
        let run = || run_protocol(&sc, &*s, &cfg, &Budgets::default(), &RunOptions::default()).map_err(|f| f.to_string());
        let mut a = run()?;
        let b = run()?;
        a.created_at.clone_from(&b.created_at);
        if a != b {
            return Err(format!("{name}: records differ between identical runs"));
        }
    }
    Ok(())
}

fn strip_timestamps(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(m) => {
            m.remove("created_at");
            m.values_mut().for_each(strip_timestamps);
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(strip_timestamps),
        _ => {}
    }
}

fn files_under(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Run the small experiment twice: outputs agree byte for byte once record
/// timestamps are removed; saved records reload to the same value; metrics
/// recomputed from the CSV matrices match the saved reports within 1e-6.
pub fn check_persistence() -> Result<(), String> {
    let cfg = parse_config(SMALL_EXPERIMENT).map_err(|e| e.to_string())?;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut outcomes = Vec::new();
    for d in &dirs {
        let o = run_experiment(&cfg, d.path()).map_err(|e| e.to_string())?;
        if !o.succeeded() {
            return Err(format!("experiment failed: {:?}", o.failures));
        }
        outcomes.push(o);
    }
    let (a, b) = (dirs[0].path(), dirs[1].path());
    let files = files_under(a);
    if files != files_under(b) || files.is_empty() {
        return Err("output trees differ".into());
    }
    for f in &files {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        if x == y {
            continue;
        }
        let is_record = f.starts_with("records") || f.starts_with("reference");
        if !is_record {
            return Err(format!("{} differs between runs", f.display()));
        }
        let mut vx: serde_json::Value = serde_json::from_slice(&x).map_err(|e| e.to_string())?;
        let mut vy: serde_json::Value = serde_json::from_slice(&y).map_err(|e| e.to_string())?;
        strip_timestamps(&mut vx);
        strip_timestamps(&mut vy);
        if vx != vy {
            return Err(format!("{} differs beyond its timestamp", f.display()));
        }
    }

    let opts = cfg.metric_options();
    for (k, record) in outcomes[0].records.iter().enumerate() {
        let seed = record.seed;
        let loaded = load_record(&a.join(format!("records/seed-{seed}.json"))).map_err(|e| e.to_string())?;
        if &loaded != record {
            return Err(format!("seed {seed}: reloaded record differs"));
        }
        let matrix = read_matrix_csv(&a.join(format!("matrices/seed-{seed}.csv"))).map_err(|e| e.to_string())?;
        let reference = load_record(&a.join(format!("reference/seed-{seed}.json"))).map_err(|e| e.to_string())?;
        let mut from_csv: RunRecord = loaded.clone();
        from_csv.accuracy = matrix;
        let recomputed =
            metrics::compute_report(&from_csv, Some(&reference), &opts).map_err(|e| e.to_string())?;
        let saved: metrics::MetricReport =
            read_json(&a.join(format!("metrics/seed-{seed}.json"))).map_err(|e| e.to_string())?;
        if saved != outcomes[0].reports[k] {
            return Err(format!("seed {seed}: saved report differs from the in-memory one"));
        }
        let (x, y) = (recomputed.criteria(), saved.criteria());
        if x.keys().ne(y.keys()) {
            return Err(format!("seed {seed}: criteria sets differ"));
        }
        for (name, v) in &x {
            if (v - y[name]).abs() > 1e-6 {
                return Err(format!("seed {seed}: {name} recomputed {v} vs saved {}", y[name]));
            }
        }
        for (p, q) in [(recomputed.rho, saved.rho), (recomputed.bwt, saved.bwt)] {
            match (p, q) {
                (Some(p), Some(q)) if (p - q).abs() <= 1e-6 => {}
                (None, None) => {}
                _ => return Err(format!("seed {seed}: {p:?} vs {q:?}")),
            }
        }
    }
    Ok(())
}

/// Cumulative scored against its own run has Omega = 1.
pub fn cumulative_self_omega(seed: u64) -> Result<f64, String> {
    let sc = small_scenario(3, seed);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        seed,
        ..TrainConfig::default()
    };
    let budgets = Budgets {
        memory_relaxation: true,
        ..Budgets::default()
    };
    let record = run_protocol(&sc, &Cumulative, &cfg, &budgets, &RunOptions::default()).map_err(|f| f.to_string())?;
    let report =
        metrics::compute_report(&record, Some(&record), &metrics::MetricOptions::default()).map_err(|e| e.to_string())?;
    report.omega.ok_or_else(|| "Omega undefined".into())
}

pub struct Trace {
    /// Parameters after every mini-batch update, over all batches.
    pub params: Vec<Vec<f32>>,
    pub h: Hypothesis,
    pub mem: ExternalMemory,
}

/// Train through every batch of `sc` with `s`, recording the trajectory.
pub fn trace(s: &dyn Strategy, sc: &Scenario, cfg: &TrainConfig, with_labels: bool, mem: Option<ExternalMemory>) -> Trace {
    let sizes = [sc.batches[0].train.feature_dim, 8, sc.global_class_count];
    let mut h = Hypothesis::init(&sizes, cfg.seed).unwrap();
    let mut mem = mem.unwrap_or_else(|| s.initial_memory(cfg));
    let mut params = Vec::new();
    for b in &sc.batches {
        let mut ops = OpsCounter::default();
        let mut observer = |_: usize, hk: &Hypothesis| params.push(hk.params().to_vec());
        let mut ctx = TrainContext::new(b.index, &mut ops);
        ctx.observer = Some(&mut observer);
        let label = if with_labels { b.task_label } else { None };
        let (h2, m2) = s.train(&h, &b.train, mem, label, cfg, &mut ctx).unwrap();
        h = h2;
        mem = m2;
    }
    Trace { params, h, mem }
}
