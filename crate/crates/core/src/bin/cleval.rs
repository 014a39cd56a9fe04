use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use continual_eval::config::{load_config, ConfigError};
use continual_eval::metrics::{self, MetricOptions};
use continual_eval::report::{self, load_record};

#[derive(Parser)]
#[command(name = "cleval", version, about = "Run and score continual-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Args)]
struct Global {
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace the config's seed list (comma separated).
    #[arg(long, global = true, value_delimiter = ',')]
    seed_override: Option<Vec<u64>>,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment and write records and reports.
    Run { config: PathBuf },
    /// Recompute metrics from saved run records and aggregate them.
    Metrics {
        #[arg(required = true)]
        records: Vec<PathBuf>,
        /// Cumulative reference records, matched by seed, for Omega and rho.
        #[arg(long, num_args = 1..)]
        reference: Vec<PathBuf>,
        #[arg(long)]
        beta: Option<usize>,
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Check a config file without running it.
    Validate { config: PathBuf },
}

fn config_failure(e: ConfigError) -> ExitCode {
    eprintln!("{e}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let g = cli.global;
    match cli.command {
        Command::Validate { config } => match load_config(&config) {
            Ok(cfg) => {
                if !g.quiet {
                    println!(
                        "{}: ok ({} seed(s), strategy {}, constructor {})",
                        config.display(),
                        cfg.seeds.len(),
                        cfg.strategy.name,
                        cfg.scenario.constructor
                    );
                }
                ExitCode::SUCCESS
            }
            Err(e) => config_failure(e),
        },
        Command::Run { config } => {
            let mut cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => return config_failure(e),
            };
            if let Some(seeds) = g.seed_override {
                cfg.seeds = seeds;
                let errors = cfg.validate();
                if !errors.is_empty() {
                    return config_failure(ConfigError::Invalid(errors));
                }
            }
            let out = g.out.unwrap_or_else(|| cfg.output_dir.clone());
            match report::run_experiment(&cfg, &out) {
                Ok(outcome) => {
                    if !g.quiet {
                        print!("{}", outcome.markdown);
                        println!("\nwrote {}", out.display());
                    }
                    for (seed, msg) in &outcome.failures {
                        eprintln!("seed {seed}: {msg}");
                    }
                    if outcome.succeeded() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::FAILURE
                    }
                }
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::FAILURE
                }
            }
        }
        Command::Metrics {
            records,
            reference,
            beta,
            epsilon,
        } => {
            let load = |paths: &[PathBuf]| paths.iter().map(|p| load_record(p)).collect::<Result<Vec<_>, _>>();
            let (records, references) = match (load(&records), load(&reference)) {
                (Ok(r), Ok(c)) => (r, c),
                (Err(e), _) | (_, Err(e)) => {
                    eprintln!("{e}");
                    return ExitCode::FAILURE;
                }
            };
            let opts = MetricOptions {
                beta,
                epsilon,
                ..MetricOptions::default()
            };
            let reports = match report::recompute(&records, &references, &opts) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("{e}");
                    return ExitCode::FAILURE;
                }
            };
            let aggregate = metrics::aggregate(&reports, &opts.weights);
            let markdown = match &g.out {
                Some(dir) => match report::emit_report(dir, &records, &reports, &aggregate) {
                    Ok(md) => md,
                    Err(e) => {
                        eprintln!("{e}");
                        return ExitCode::FAILURE;
                    }
                },
                None => report::render_markdown(&records, &reports, &aggregate, &[]),
            };
            if !g.quiet {
                print!("{markdown}");
            }
            ExitCode::SUCCESS
        }
    }
}
