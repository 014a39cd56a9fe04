//! Experiment runner, persistence and the human-readable report.
//!
//! Output layout under the output directory:
//!
//! ```text
//! records/seed-<s>.json      run record
//! matrices/seed-<s>.csv      accuracy matrix, rows = training stages
//! metrics/seed-<s>.json      metric report
//! reference/seed-<s>.json    cumulative reference run (when Ω or ρ is requested)
//! reference/seed-<s>.csv
//! aggregate.json
//! report.md
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{BuildError, ExperimentConfig};
use crate::harness::{run_protocol, AccuracyMatrix, Budgets, RunRecord, RunStatus};
use crate::metrics::{self, AggregateReport, MetricError, MetricOptions, MetricReport};
use crate::strategies::{strategy_by_name, Cumulative, Strategy};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("seed {seed}: {source}")]
    Build { seed: u64, source: BuildError },
    #[error("unknown strategy {0}")]
    UnknownStrategy(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, ReportError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_owned(),
        source,
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(io_err(dir)),
        _ => Ok(()),
    }
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|source| ReportError::Json {
        path: path.to_owned(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| ReportError::Json {
        path: path.to_owned(),
        source,
    })
}

pub fn save_record(path: &Path, record: &RunRecord) -> Result<()> {
    write_json(path, record)
}

pub fn load_record(path: &Path) -> Result<RunRecord> {
    read_json(path)
}

/// Matrix as CSV text: one line per training stage, six decimals, LF endings.
pub fn matrix_to_csv(r: &AccuracyMatrix) -> String {
    let mut out = String::new();
    for row in &r.rows {
        let fields: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn write_matrix_csv(path: &Path, r: &AccuracyMatrix) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, matrix_to_csv(r)).map_err(io_err(path))
}

/// Parse a square accuracy matrix written by [`write_matrix_csv`].
pub fn parse_matrix_csv(text: &str, path: &Path) -> Result<AccuracyMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|source| ReportError::Csv {
            path: path.to_owned(),
            source,
        })?;
        let row = rec
            .iter()
            .map(|f| {
                f.trim().parse::<f64>().map_err(|e| ReportError::Format {
                    path: path.to_owned(),
                    detail: format!("bad number {f:?}: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    AccuracyMatrix::from_rows(rows).ok_or_else(|| ReportError::Format {
        path: path.to_owned(),
        detail: "matrix is empty or not square".into(),
    })
}

pub fn read_matrix_csv(path: &Path) -> Result<AccuracyMatrix> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_matrix_csv(&text, path)
}

/// Everything produced by one experiment.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub records: Vec<RunRecord>,
    pub references: Vec<RunRecord>,
    pub reports: Vec<MetricReport>,
    pub aggregate: AggregateReport,
    /// `(seed, message)` for every run that did not complete.
    pub failures: Vec<(u64, String)>,
    pub markdown: String,
}

impl ExperimentOutcome {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

struct SeedResult {
    record: RunRecord,
    reference: Option<RunRecord>,
    failures: Vec<String>,
}

fn run_seed(cfg: &ExperimentConfig, strategy: &dyn Strategy, seed: u64) -> std::result::Result<SeedResult, ReportError> {
    let scenario = cfg
        .build_scenario(seed)
        .map_err(|source| ReportError::Build { seed, source })?;
    let train = cfg.train_config(seed);
    let opts = cfg.run_options();
    let mut failures = Vec::new();
    let record = match run_protocol(&scenario, strategy, &train, &cfg.budgets, &opts) {
        Ok(r) => r,
        Err(f) => {
            failures.push(f.error.to_string());
            *f.partial
        }
    };
    let reference = if cfg.needs_reference() {
        let budgets = Budgets {
            memory_relaxation: true,
            strict: false,
            ..cfg.budgets.clone()
        };
        Some(match run_protocol(&scenario, &Cumulative, &train, &budgets, &opts) {
            Ok(r) => r,
            Err(f) => {
                failures.push(format!("reference: {}", f.error));
                *f.partial
            }
        })
    } else {
        None
    };
    Ok(SeedResult {
        record,
        reference,
        failures,
    })
}

fn seed_file(dir: &Path, sub: &str, seed: u64, ext: &str) -> PathBuf {
    dir.join(sub).join(format!("seed-{seed}.{ext}"))
}

/// Run every seed (concurrently), persist records, matrices and metric
/// reports, and write the aggregate and markdown report once at the end.
/// Failed runs keep their partial records on disk and are listed in
/// `failures`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutcome> {
    let strategy =
        strategy_by_name(&cfg.strategy.name).ok_or_else(|| ReportError::UnknownStrategy(cfg.strategy.name.clone()))?;
    let results: Vec<(u64, std::result::Result<SeedResult, ReportError>)> = std::thread::scope(|s| {
        let handles: Vec<_> = cfg
            .seeds
            .iter()
            .map(|&seed| {
                let strategy = &*strategy;
                (seed, s.spawn(move || run_seed(cfg, strategy, seed)))
            })
            .collect();
        handles
            .into_iter()
            .map(|(seed, h)| (seed, h.join().expect("run thread panicked")))
            .collect()
    });

    let opts = cfg.metric_options();
    let mut outcome_records = Vec::new();
    let mut references = Vec::new();
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (seed, result) in results {
        let res = match result {
            Ok(r) => r,
            Err(e) => {
                failures.push((seed, e.to_string()));
                continue;
            }
        };
        failures.extend(res.failures.into_iter().map(|m| (seed, m)));
        let record = res.record;
        save_record(&seed_file(out_dir, "records", seed, "json"), &record)?;
        if let Some(reference) = &res.reference {
            save_record(&seed_file(out_dir, "reference", seed, "json"), reference)?;
            if reference.accuracy.is_complete() {
                write_matrix_csv(&seed_file(out_dir, "reference", seed, "csv"), &reference.accuracy)?;
            }
        }
        let reference_ok = res.reference.as_ref().filter(|r| r.is_complete());
        if record.is_complete() {
            write_matrix_csv(&seed_file(out_dir, "matrices", seed, "csv"), &record.accuracy)?;
            let report = metrics::compute_report(&record, reference_ok, &opts)?;
            write_json(&seed_file(out_dir, "metrics", seed, "json"), &report)?;
            reports.push(report);
        }
        if let Some(r) = res.reference {
            references.push(r);
        }
        outcome_records.push(record);
    }

    let aggregate = metrics::aggregate(&reports, &opts.weights);
    write_json(&out_dir.join("aggregate.json"), &aggregate)?;
    let markdown = render_markdown(&outcome_records, &reports, &aggregate, &failures);
    let md_path = out_dir.join("report.md");
    fs::write(&md_path, &markdown).map_err(io_err(&md_path))?;
    Ok(ExperimentOutcome {
        records: outcome_records,
        references,
        reports,
        aggregate,
        failures,
        markdown,
    })
}

/// Recompute metric reports from persisted records. References are matched
/// to records by seed.
pub fn recompute(records: &[RunRecord], references: &[RunRecord], opts: &MetricOptions) -> Result<Vec<MetricReport>> {
    records
        .iter()
        .filter(|r| r.is_complete())
        .map(|r| {
            let reference = references.iter().find(|c| c.seed == r.seed && c.is_complete());
            metrics::compute_report(r, reference, opts).map_err(ReportError::from)
        })
        .collect()
}

/// Write matrices and the markdown report for already computed results.
pub fn emit_report(
    out_dir: &Path,
    records: &[RunRecord],
    reports: &[MetricReport],
    aggregate: &AggregateReport,
) -> Result<String> {
    for r in records.iter().filter(|r| r.accuracy.is_complete()) {
        write_matrix_csv(&seed_file(out_dir, "matrices", r.seed, "csv"), &r.accuracy)?;
    }
    write_json(&out_dir.join("aggregate.json"), aggregate)?;
    let markdown = render_markdown(records, reports, aggregate, &[]);
    let path = out_dir.join("report.md");
    ensure_parent(&path)?;
    fs::write(&path, &markdown).map_err(io_err(&path))?;
    Ok(markdown)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_owned(), |x| format!("{x:.4}"))
}

fn steps(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")
}

/// Markdown summary: per-run metrics, aggregate mean ± σ, flags and
/// violations.
pub fn render_markdown(
    records: &[RunRecord],
    reports: &[MetricReport],
    aggregate: &AggregateReport,
    failures: &[(u64, String)],
) -> String {
    let mut md = String::new();
    let strategy = records.first().map_or("?", |r| r.strategy.as_str());
    let _ = writeln!(md, "# Continual-learning report: {strategy}\n");
    if let Some(r) = records.first() {
        let _ = writeln!(
            md,
            "Scenario `{}` ({:?}, {:?}, labels {:?}), {} tasks, {} run(s).\n",
            r.scenario.constructor,
            r.scenario.kind,
            r.scenario.update_type,
            r.scenario.label_regime,
            r.n(),
            records.len()
        );
    }

    md.push_str("## Runs\n\n");
    md.push_str("| seed | A | BWT | REM | BWT+ | FWT | Omega | rho | LCA | MS | SSS | CE | CL_score |\n");
    md.push_str("|---|---|---|---|---|---|---|---|---|---|---|---|---|\n");
    for m in reports {
        let _ = writeln!(
            md,
            "| {} | {:.4} | {} | {} | {} | {} | {} | {} | {} | {:.4} | {:.4} | {:.4} | {} |",
            m.seed,
            m.a,
            opt(m.bwt),
            opt(m.rem),
            opt(m.bwt_plus),
            opt(m.fwt),
            opt(m.omega),
            opt(m.rho),
            opt(m.lca),
            m.ms,
            m.sss,
            m.ce,
            opt(m.cl_score)
        );
    }

    md.push_str("\n## Aggregate\n\n| criterion | mean | std |\n|---|---|---|\n");
    for c in &aggregate.criteria {
        let _ = writeln!(md, "| {} | {:.4} | {:.4} |", c.name, c.mean, c.std);
    }
    let _ = writeln!(
        md,
        "\nCL_score: {}  \nCL_stability: {}",
        opt(aggregate.cl_score),
        opt(aggregate.cl_stability)
    );
    for n in &aggregate.notes {
        let _ = writeln!(md, "\n> {n}");
    }

    md.push_str("\n## Flags\n\n| seed | status | storage-free | online | task-indicator-free | memory bound | compute bound |\n");
    md.push_str("|---|---|---|---|---|---|---|\n");
    for r in records {
        let status = match &r.status {
            RunStatus::Completed => "completed".to_owned(),
            RunStatus::Aborted { step, .. } => format!("aborted at batch {step}"),
        };
        let d = r.desiderata_flags;
        let f = &r.constraint_flags;
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {} |",
            r.seed,
            status,
            d.storage_free,
            d.online,
            d.task_indicator_free,
            if f.constraint1() { "violated" } else { "ok" },
            if f.constraint2() { "violated" } else { "ok" },
        );
    }

    let violating: Vec<&RunRecord> = records.iter().filter(|r| r.constraint_flags.any()).collect();
    if !violating.is_empty() || !failures.is_empty() {
        md.push_str("\n## Violations\n\n");
        for r in violating {
            let f = &r.constraint_flags;
            if f.constraint1() {
                let _ = writeln!(
                    md,
                    "- seed {}: memory bound (Constraint 1) exceeded after batches {}",
                    r.seed,
                    steps(&f.memory_bound)
                );
            }
            if !f.ops_bound.is_empty() {
                let _ = writeln!(
                    md,
                    "- seed {}: operation budget (Constraint 2) exceeded on batches {}",
                    r.seed,
                    steps(&f.ops_bound)
                );
            }
            if !f.state_mem_bound.is_empty() {
                let _ = writeln!(
                    md,
                    "- seed {}: state memory budget (Constraint 2) exceeded before batches {}",
                    r.seed,
                    steps(&f.state_mem_bound)
                );
            }
        }
        for (seed, msg) in failures {
            let _ = writeln!(md, "- seed {seed}: run failed: {msg}");
        }
    }
    md
}
