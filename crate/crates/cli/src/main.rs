//! `zoomctl`: simulate, verify and size fixed-rate zoom quantizers for
//! systems with random multiplicative gain.
//!
//! Exit codes: 0 pass or stable, 1 usage or configuration error, 2 negative
//! result, 3 inconclusive.

mod config;
mod verify;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use zoomctl_core::analysis::feasibility::{feasibility_for, search_feasible, FeasibilityReport};
use zoomctl_core::codec::{rate_for_levels, StrategyParams};
use zoomctl_core::control::{read_trace_csv, PolicyKind};
use zoomctl_core::harness::{
    run_experiment_with, stability_verdict, sweep, write_curve_csv, write_sweep_csv, ExperimentConfig, RunOptions,
    SummaryStats, SweepDim, Verdict,
};
use zoomctl_core::parallel::Execution;
use zoomctl_core::Error as CoreError;

const EXIT_OK: u8 = 0;
const EXIT_ERROR: u8 = 1;
const EXIT_NEGATIVE: u8 = 2;
const EXIT_INCONCLUSIVE: u8 = 3;

const THREADS_VAR: &str = "ZOOMCTL_THREADS";

/// `println!` that reports write errors instead of panicking, so a closed
/// pipe ends the command quietly.
macro_rules! outln {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout().lock(), $($arg)*)?
    };
}

#[derive(Parser, Debug)]
#[command(name = "zoomctl", version, about = "Fixed-rate zoom quantized control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct ConfigArgs {
    /// Experiment file (`key = value` lines, optional [sections]).
    config: PathBuf,
    /// Override a key, e.g. `--set L=64`. Repeatable; applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the ensemble; write summary.json, curve.csv and trace CSVs.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Write the traces of the first N trials.
        #[arg(long, default_value_t = 0)]
        keep_traces: usize,
    },
    /// Run analysis checks and print a pass/fail table.
    Verify {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated: domination, drift, containment,
        /// tracker_equality, oracle_match, or all.
        #[arg(long)]
        checks: Option<String>,
        /// Check a recorded trace CSV instead of a fresh ensemble.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Evaluate the parameter conditions, or search for feasible P and L.
    Feasibility {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Find the smallest P with tail bound below EPS and the smallest L
        /// with a positive drift margin, keeping M0, K and c.
        #[arg(long, value_name = "EPS")]
        search: Option<f64>,
    },
    /// One ensemble per value of a strategy constant; write sweep.csv.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// P, L, K, M0 or R.
        #[arg(long)]
        dim: String,
        /// Comma-separated values.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Print the rate R = ceil(log2(2L + 1)) for a level count L.
    Rate { levels: u128 },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match init_threads().and_then(|()| run(cli.command)) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("{THREADS_VAR} must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("building the thread pool")
}

fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Simulate { cfg, out, keep_traces } => simulate(&cfg, &out, keep_traces),
        Command::Verify { cfg, checks, trace } => verify_cmd(&cfg, checks.as_deref(), trace.as_deref()),
        Command::Feasibility { cfg, search } => feasibility_cmd(&cfg, search),
        Command::Sweep { cfg, dim, values, out } => sweep_cmd(&cfg, &dim, &values, &out),
        Command::Rate { levels } => {
            if !(1..=StrategyParams::MAX_LEVELS).contains(&levels) {
                bail!("L must be in [1, {}], got {levels}", StrategyParams::MAX_LEVELS);
            }
            outln!("{}", rate_for_levels(levels));
            Ok(EXIT_OK)
        }
    }
}

fn load(args: &ConfigArgs) -> Result<ExperimentConfig> {
    config::load(&args.config, &args.overrides)
}

/// `#` lines naming the tool, the command and every resolved key.
fn provenance(command: &str, cfg: &ExperimentConfig) -> String {
    let mut s = format!("# zoomctl {} {command}\n", env!("CARGO_PKG_VERSION"));
    for line in config::render(cfg) {
        s.push_str("# ");
        s.push_str(&line);
        s.push('\n');
    }
    s
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn warn_if_infeasible(cfg: &ExperimentConfig) {
    if cfg.policy != PolicyKind::AdaptiveFixedRate {
        return;
    }
    match feasibility_for(&cfg.system, &cfg.params, cfg.alpha) {
        Ok(r) if r.ok => {}
        Ok(r) => eprintln!(
            "warning: parameters are not feasible (drift margin {:.3e}, K margin {:.3e}, eps {:.3e}); the stability guarantee does not apply",
            r.margin_drift, r.margin_k, r.epsilon_estimate
        ),
        Err(e) => eprintln!("warning: feasibility not evaluated: {e}"),
    }
}

#[derive(Serialize)]
struct SimulateSummary<'a> {
    config: &'a ExperimentConfig,
    resolved: Vec<String>,
    verdict: Verdict,
    /// Present unless every trial diverged.
    stats: Option<StatsView>,
    error: Option<String>,
}

/// [`SummaryStats`] without the curve, which lives in curve.csv.
#[derive(Serialize)]
struct StatsView {
    horizon: u64,
    trials: u64,
    diverged_count: u64,
    emergency_fraction: f64,
    window_ratio: f64,
    terminal_mean: f64,
    final_mean: f64,
    max_mean_nsq: Option<f64>,
    tracker_mismatches: u64,
    max_symbol: Option<String>,
}

impl StatsView {
    fn of(s: &SummaryStats) -> Self {
        StatsView {
            horizon: s.horizon,
            trials: s.trials,
            diverged_count: s.diverged_count,
            emergency_fraction: s.emergency_fraction,
            window_ratio: s.window_ratio,
            terminal_mean: s.terminal_mean,
            final_mean: s.second_moment_curve.last().map_or(f64::NAN, |p| p.mean),
            max_mean_nsq: s.max_mean_nsq,
            tracker_mismatches: s.tracker_mismatches,
            // Symbols exceed 2^64; keep them exact as strings.
            max_symbol: s.max_symbol.map(|v| v.to_string()),
        }
    }
}

fn verdict_code(v: Verdict) -> u8 {
    match v {
        Verdict::Stable => EXIT_OK,
        Verdict::Unstable => EXIT_NEGATIVE,
        Verdict::Inconclusive => EXIT_INCONCLUSIVE,
    }
}

fn simulate(args: &ConfigArgs, out: &Path, keep_traces: usize) -> Result<u8> {
    let cfg = load(args)?;
    warn_if_infeasible(&cfg);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let result = run_experiment_with(&cfg, Execution::Parallel, RunOptions { keep_traces });
    let (verdict, output, error) = match result {
        Ok(o) => (stability_verdict(&o.stats, 0.5), Some(o), None),
        Err(e @ CoreError::AllDiverged { .. }) => (Verdict::Unstable, None, Some(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    let summary = SimulateSummary {
        config: &cfg,
        resolved: config::render(&cfg),
        verdict,
        stats: output.as_ref().map(|o| StatsView::of(&o.stats)),
        error,
    };
    let mut w = create(&out.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut w, &summary)?;
    writeln!(w)?;
    w.flush()?;

    if let Some(o) = &output {
        let mut w = create(&out.join("curve.csv"))?;
        w.write_all(provenance("simulate", &cfg).as_bytes())?;
        write_curve_csv(&o.stats, &mut w)?;
        w.flush()?;
        for (i, tr) in o.traces.iter().enumerate() {
            let mut w = create(&out.join(format!("trace_{i:04}.csv")))?;
            w.write_all(provenance("simulate", &cfg).as_bytes())?;
            writeln!(w, "# trial = {i}\n# trial_seed = {}", tr.seed)?;
            tr.write_csv(&mut w)?;
            w.flush()?;
        }
        let s = &o.stats;
        outln!(
            "{verdict}: window_ratio={:.4} diverged={}/{} terminal_mean={:.4} emergency_fraction={:.3e}",
            s.window_ratio, s.diverged_count, s.trials, s.terminal_mean, s.emergency_fraction
        );
    } else {
        outln!("{verdict}: all {} trials diverged", cfg.trials);
    }
    Ok(verdict_code(verdict))
}

fn verify_cmd(args: &ConfigArgs, checks: Option<&str>, trace: Option<&Path>) -> Result<u8> {
    let cfg = load(args)?;
    let selected = verify::parse_checks(checks, trace.is_some())?;
    let outcomes = match trace {
        Some(path) => {
            let rows = read_trace_csv(File::open(path).with_context(|| format!("opening {}", path.display()))?)
                .with_context(|| format!("reading {}", path.display()))?;
            verify::verify_trace(&cfg, rows, &selected)?
        }
        None => verify::verify_ensemble(&cfg, &selected)?,
    };
    let width = outcomes.iter().map(|o| o.check.to_string().len()).max().unwrap_or(0);
    for o in &outcomes {
        outln!(
            "{:<width$}  {}  {}",
            o.check.to_string(),
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    Ok(if outcomes.iter().all(|o| o.passed) { EXIT_OK } else { EXIT_NEGATIVE })
}

fn report_table(r: &FeasibilityReport) -> Vec<(&'static str, String)> {
    vec![
        ("ok", r.ok.to_string()),
        ("R", r.rate.to_string()),
        ("margin_drift", format!("{:e}", r.margin_drift)),
        ("margin_drift_strict", format!("{:e}", r.margin_drift_strict)),
        ("margin_k", format!("{:e}", r.margin_k)),
        ("margin_drift_literal", format!("{:e}", r.margin_drift_literal)),
        ("margin_k_literal", format!("{:e}", r.margin_k_literal)),
        ("epsilon_estimate", format!("{:e}", r.epsilon_estimate)),
        ("tail_ratio", format!("{:e}", r.tail_ratio)),
        ("c", r.decay_rate.to_string()),
        ("contraction_cap", r.contraction_cap.to_string()),
        ("D", r.d.to_string()),
        ("C", r.c_bound.to_string()),
        ("alpha", r.alpha.to_string()),
        ("m_alpha", r.m_alpha.to_string()),
        ("ell_alpha", r.ell_alpha.to_string()),
    ]
}

fn feasibility_cmd(args: &ConfigArgs, search: Option<f64>) -> Result<u8> {
    let mut cfg = load(args)?;
    let report = match search {
        Some(eps) => {
            let p = &cfg.params;
            let found = search_feasible(&cfg.system, cfg.alpha, p.decay_rate, p.error_weight, p.range_floor, eps)?;
            cfg.params = found.params;
            outln!("# feasible constants for eps < {eps}");
            outln!("P = {}", found.params.zoom);
            outln!("L = {}", found.params.levels);
            found.report
        }
        None => feasibility_for(&cfg.system, &cfg.params, cfg.alpha)?,
    };
    for (k, v) in report_table(&report) {
        outln!("{k:<22}{v}");
    }
    #[derive(Serialize)]
    struct Out<'a> {
        resolved: Vec<String>,
        report: &'a FeasibilityReport,
    }
    outln!(
        "{}",
        serde_json::to_string_pretty(&Out {
            resolved: config::render(&cfg),
            report: &report,
        })?
    );
    Ok(if report.ok { EXIT_OK } else { EXIT_NEGATIVE })
}

fn sweep_cmd(args: &ConfigArgs, dim: &str, values: &str, out: &Path) -> Result<u8> {
    let cfg = load(args)?;
    let dim: SweepDim = dim.parse()?;
    let values: Vec<f64> = values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse::<f64>().map_err(|e| anyhow!("sweep value {v:?}: {e}")))
        .collect::<Result<_>>()?;
    if values.is_empty() {
        bail!("--values is empty");
    }
    let rows = sweep(&cfg, dim, &values, Execution::Parallel)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = create(&out.join("sweep.csv"))?;
    w.write_all(provenance(&format!("sweep --dim {dim}"), &cfg).as_bytes())?;
    write_sweep_csv(&rows, &mut w)?;
    w.flush()?;
    for r in &rows {
        outln!(
            "{dim}={:<12} R={:<4} verdict={:<12} window_ratio={:<10.4} diverged={} feasible={}",
            r.value,
            r.rate,
            r.verdict.to_string(),
            r.window_ratio,
            r.diverged_count,
            r.feasible.map_or("n/a".to_owned(), |f| f.to_string())
        );
    }
    Ok(EXIT_OK)
}
