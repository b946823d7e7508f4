//! Command-line front end: experiment execution, offline dataset generation,
//! and dataset validation, with CSV results and optional SVG charts.
//!
//! Exit codes: 0 success, 1 run or I/O failure, 2 configuration failure.
//! Every output file is written to a temporary sibling and renamed into place
//! so failed invocations leave nothing partial behind.

mod config;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use banditlab::{
    build_offline_dataset, run_experiment_traced, run_sweep, write_trace_csv, Algorithm,
    RunMetrics, SweepTable, TraceRow,
};
use config::{load_config, CliConfig, ConfigError};

#[derive(Parser)]
#[command(name = "banditlab", version, about = "Hybrid offline/online contextual bandit lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a single experiment or a sweep described by a JSON manifest.
    Run(RunArgs),
    /// Materialize the offline logged dataset a manifest describes.
    GenDataset(RunArgs),
    /// Check an offline dataset CSV against the dataset invariants.
    Validate {
        /// Path to a dataset CSV produced by gen-dataset.
        dataset: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment manifest.
    #[arg(long)]
    config: PathBuf,
    /// Override a manifest key, e.g. --set horizon=500 or --set sweep.repeats=5.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (overrides the manifest's output.dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides the manifest's seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<banditlab::HarnessError> for CliError {
    fn from(e: banditlab::HarnessError) -> Self {
        match e {
            banditlab::HarnessError::InvalidConfig(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(threads) = std::env::var("BANDITLAB_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("ignoring BANDITLAB_THREADS={threads:?}: not a positive integer"),
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::GenDataset(args) => cmd_gen_dataset(&args),
        Command::Validate { dataset } => cmd_validate(&dataset),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Runtime(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
        Err(CliError::Config(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}

/// Write bytes via a temporary file in the destination directory, then rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    std::io::Write::write_all(&mut tmp, bytes)?;
    tmp.persist(path).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

fn load(args: &RunArgs) -> Result<CliConfig, CliError> {
    let out = args.out.as_ref().map(|p| p.display().to_string());
    Ok(load_config(&args.config, &args.set, out.as_deref(), args.seed)?)
}

fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let cfg = load(args)?;
    let out_dir = PathBuf::from(&cfg.output.dir);
    std::fs::create_dir_all(&out_dir)?;

    match &cfg.sweep {
        Some(sweep) => {
            let table = run_sweep(&cfg.run, sweep.axis, &sweep.values, sweep.repeats)?;
            let mut rows = Vec::new();
            table.write_rows_csv(&mut rows)?;
            write_atomic(&out_dir.join("sweep.csv"), &rows)?;
            let mut summary = Vec::new();
            table.write_summary_csv(&mut summary)?;
            write_atomic(&out_dir.join("sweep_summary.csv"), &summary)?;
            if cfg.output.emit_svg {
                emit_sweep_chart(&out_dir, &cfg, &table)?;
            }
            println!(
                "sweep {} over {} values x {} repeats ({}) -> {}",
                table.axis.as_str(),
                sweep.values.len(),
                sweep.repeats,
                cfg.run.algorithm.as_str(),
                out_dir.join("sweep.csv").display()
            );
        }
        None => {
            let (metrics, trace) = run_experiment_traced(&cfg.run)?;
            let mut metrics_csv = Vec::new();
            write_metrics_csv(&cfg, &metrics, &mut metrics_csv)?;
            write_atomic(&out_dir.join("metrics.csv"), &metrics_csv)?;
            let mut trace_csv = Vec::new();
            write_trace_csv(&trace, &mut trace_csv)?;
            write_atomic(
                &out_dir.join(format!("trace_{}.csv", cfg.run.seed)),
                &trace_csv,
            )?;
            if cfg.output.emit_svg {
                emit_run_charts(&out_dir, &cfg, &metrics, &trace)?;
            }
            println!(
                "{} seed {}: {} steps, {} reward calls, final regret {:.4}, average reward {:.4} -> {}",
                cfg.run.algorithm.as_str(),
                cfg.run.seed,
                metrics.steps_executed,
                metrics.reward_calls,
                metrics.final_regret(),
                metrics.average_reward,
                out_dir.join("metrics.csv").display()
            );
        }
    }
    Ok(())
}

fn write_metrics_csv(
    cfg: &CliConfig,
    metrics: &RunMetrics,
    writer: &mut Vec<u8>,
) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "seed",
        "algorithm",
        "horizon",
        "steps_executed",
        "reward_calls",
        "below_threshold_skips",
        "epsilon_skips",
        "final_regret",
        "average_reward",
        "classification_error",
    ])
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    w.write_record(&[
        cfg.run.seed.to_string(),
        cfg.run.algorithm.as_str().to_string(),
        cfg.run.horizon.to_string(),
        metrics.steps_executed.to_string(),
        metrics.reward_calls.to_string(),
        metrics.below_threshold_skips.to_string(),
        metrics.epsilon_skips.to_string(),
        metrics.final_regret().to_string(),
        metrics.average_reward.to_string(),
        metrics
            .classification_error
            .map(|e| e.to_string())
            .unwrap_or_default(),
    ])
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

fn emit_run_charts(
    out_dir: &Path,
    cfg: &CliConfig,
    metrics: &RunMetrics,
    trace: &[TraceRow],
) -> Result<(), CliError> {
    let algorithm = cfg.run.algorithm.as_str();
    let regret: Vec<(f64, f64)> = metrics
        .cumulative_regret
        .iter()
        .enumerate()
        .map(|(i, r)| ((i + 1) as f64, *r))
        .collect();
    let regret_chart = svg::line_chart(
        &format!("Cumulative regret ({algorithm})"),
        "t",
        "cumulative regret",
        &[svg::Series::new(algorithm, regret)],
    );
    write_atomic(&out_dir.join("regret_vs_t.svg"), regret_chart.as_bytes())?;

    let mut calls = 0u64;
    let cumulative_calls: Vec<(f64, f64)> = trace
        .iter()
        .map(|row| {
            if row.reward_called {
                calls += 1;
            }
            (row.t as f64, calls as f64)
        })
        .collect();
    let calls_chart = svg::line_chart(
        &format!("Cumulative reward calls ({algorithm})"),
        "t",
        "reward calls",
        &[svg::Series::new(algorithm, cumulative_calls)],
    );
    write_atomic(&out_dir.join("reward_calls_vs_t.svg"), calls_chart.as_bytes())?;
    Ok(())
}

fn emit_sweep_chart(out_dir: &Path, cfg: &CliConfig, table: &SweepTable) -> Result<(), CliError> {
    let axis = table.axis.as_str();
    let algorithm = cfg.run.algorithm.as_str();
    let mean_reward: Vec<(f64, f64)> = table
        .summaries
        .iter()
        .map(|s| (s.axis_value, s.mean_average_reward))
        .collect();
    let chart = svg::line_chart(
        &format!("Average reward vs {axis} ({algorithm})"),
        axis,
        "average reward",
        &[svg::Series::new(format!("{algorithm} mean"), mean_reward)],
    );
    write_atomic(
        &out_dir.join(format!("average_reward_vs_{axis}.svg")),
        chart.as_bytes(),
    )?;
    let mean_calls: Vec<(f64, f64)> = table
        .summaries
        .iter()
        .map(|s| (s.axis_value, s.mean_reward_calls))
        .collect();
    let calls_chart = svg::line_chart(
        &format!("Reward calls vs {axis} ({algorithm})"),
        axis,
        "reward calls",
        &[svg::Series::new(format!("{algorithm} mean"), mean_calls)],
    );
    write_atomic(
        &out_dir.join(format!("reward_calls_vs_{axis}.svg")),
        calls_chart.as_bytes(),
    )?;
    Ok(())
}

fn cmd_gen_dataset(args: &RunArgs) -> Result<(), CliError> {
    let cfg = load(args)?;
    let out_dir = PathBuf::from(&cfg.output.dir);
    std::fs::create_dir_all(&out_dir)?;
    let dataset = build_offline_dataset(&cfg.run)?;
    let mut bytes = Vec::new();
    dataset
        .write_csv(&mut bytes)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let path = out_dir.join("dataset.csv");
    write_atomic(&path, &bytes)?;
    println!(
        "wrote {} events ({} actions, dim {}) -> {}",
        dataset.len(),
        dataset.k(),
        dataset.dim(),
        path.display()
    );
    // The algorithm field is irrelevant here but harmless; note when a run
    // would have rejected it so manifests stay interchangeable.
    if cfg.run.algorithm == Algorithm::Opr && cfg.run.offline_size < cfg.run.horizon {
        log::warn!("manifest would not pass run validation for opr");
    }
    Ok(())
}

fn cmd_validate(dataset_path: &Path) -> Result<(), CliError> {
    let file = std::fs::File::open(dataset_path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", dataset_path.display())))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| CliError::Runtime(e.to_string()))?
        .clone();
    if headers.len() < 4 || &headers[0] != "context_id" {
        return Err(CliError::Runtime(format!(
            "{}: not an offline dataset CSV (unexpected header)",
            dataset_path.display()
        )));
    }
    let d = headers.len() - 4;

    let mut violations: Vec<String> = Vec::new();
    let mut seen_contexts = std::collections::HashSet::new();
    let mut actions: Vec<usize> = Vec::new();
    let mut propensities: Vec<f64> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2; // 1-based, after the header
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                violations.push(format!("row {row}: unreadable record ({e})"));
                continue;
            }
        };
        if record.len() != d + 4 {
            violations.push(format!(
                "row {row}: expected {} fields, found {}",
                d + 4,
                record.len()
            ));
            continue;
        }
        match record[0].parse::<usize>() {
            Ok(ctx) => {
                if !seen_contexts.insert(ctx) {
                    violations.push(format!(
                        "row {row}: duplicate context id {ctx} (one event per context)"
                    ));
                }
            }
            Err(_) => violations.push(format!("row {row}: bad context id {:?}", &record[0])),
        }
        for j in 0..d {
            if record[1 + j].parse::<f64>().map(f64::is_finite) != Ok(true) {
                violations.push(format!("row {row}: non-numeric feature x_{j}"));
            }
        }
        match record[d + 1].parse::<usize>() {
            Ok(a) => actions.push(a),
            Err(_) => violations.push(format!("row {row}: bad action {:?}", &record[d + 1])),
        }
        if record[d + 2].parse::<f64>().map(f64::is_finite) != Ok(true) {
            violations.push(format!("row {row}: non-finite reward"));
        }
        match record[d + 3].parse::<f64>() {
            Ok(p) if p > 0.0 && p <= 1.0 => propensities.push(p),
            Ok(p) => violations.push(format!(
                "row {row}: propensity {p} outside (0, 1] (logged actions must be supported)"
            )),
            Err(_) => violations.push(format!("row {row}: bad propensity {:?}", &record[d + 3])),
        }
    }
    if seen_contexts.is_empty() && violations.is_empty() {
        violations.push("dataset has no events".into());
    }

    if !violations.is_empty() {
        for v in &violations {
            eprintln!("invariant violation: {v}");
        }
        return Err(CliError::Runtime(format!(
            "{} invariant violation(s) in {}",
            violations.len(),
            dataset_path.display()
        )));
    }

    let k = actions.iter().map(|&a| a + 1).max().unwrap_or(1);
    let mut per_action = vec![0usize; k];
    for &a in &actions {
        per_action[a] += 1;
    }
    // Uniform logging propensity 1/s per event implies s supported actions;
    // the unsupported fraction per context follows as 1 - s/k.
    let mean_unsupported: f64 = propensities
        .iter()
        .map(|&p| 1.0 - (1.0 / p).round() / k as f64)
        .sum::<f64>()
        / propensities.len() as f64;
    println!(
        "{}: {} events, {} actions, dim {}",
        dataset_path.display(),
        propensities.len(),
        k,
        d
    );
    println!(
        "per-action counts: min {}, max {}",
        per_action.iter().min().unwrap(),
        per_action.iter().max().unwrap()
    );
    println!("empirical unsupported-action fraction: {mean_unsupported:.4}");
    Ok(())
}
