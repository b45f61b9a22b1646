//! Monte Carlo ensembles, stability verdicts and parameter sweeps.
//!
//! Trial `i` of an ensemble is seeded with [`trial_seed`]`(master, i)` and is
//! otherwise independent of every other trial. Trials are grouped into
//! fixed chunks of [`CHUNK_TRIALS`]; each chunk folds its trials into a
//! partial accumulator and partials are merged in chunk order. The result is
//! therefore bit-identical whether chunks run on one thread or many.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::drift::DriftAccumulator;
use crate::analysis::feasibility::feasibility_for;
use crate::codec::{self, StrategyParams};
use crate::control::{run_policy_trial, Mode, Plant, PolicyKind, SystemSpec, Trace};
use crate::parallel::{map_indexed, Execution};
use crate::stats::{merge_series, RunningStats};
use crate::stochastic;
use crate::{Error, Result};

/// Trials folded by one worker before its partial is merged.
pub const CHUNK_TRIALS: u64 = 32;

/// Shortest horizon for which a verdict other than inconclusive is given.
pub const MIN_VERDICT_HORIZON: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub system: SystemSpec,
    pub params: StrategyParams,
    pub policy: PolicyKind,
    pub horizon: u64,
    pub trials: u64,
    pub master_seed: u64,
    pub alpha: f64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::InvalidExperiment("horizon must be >= 1".into()));
        }
        if self.trials < 1 {
            return Err(Error::InvalidExperiment("trials must be >= 1".into()));
        }
        self.system.a.validate()?;
        self.system.w.validate()?;
        self.params.validate()?;
        self.policy.validate()
    }

    /// `D = 2σ_W² + (1 + K)M0²`.
    pub fn drift_constant(&self) -> Result<f64> {
        let (_, var_w) = stochastic::moments(&self.system.w)?;
        let m0 = self.params.range_floor;
        Ok(2.0 * var_w + (1.0 + self.params.error_weight) * m0 * m0)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of trial `index`: two rounds of SplitMix64 over the master seed and
/// the index.
pub fn trial_seed(master_seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master_seed) ^ index)
}

/// Runs every trial of `cfg` and folds them with `fold`.
///
/// `init` builds an empty accumulator, `fold` adds trial `i`, and `merge`
/// appends a later chunk's accumulator to an earlier one.
pub fn fold_trials<A, I, F, M>(cfg: &ExperimentConfig, exec: Execution, init: I, fold: F, merge: M) -> Result<A>
where
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(&mut A, u64, Trace) + Sync + Send,
    M: Fn(&mut A, A),
{
    cfg.validate()?;
    let plant = Plant::new(&cfg.system)?;
    let chunks = cfg.trials.div_ceil(CHUNK_TRIALS) as usize;
    let partials = map_indexed(chunks, exec, |c| -> Result<A> {
        let mut acc = init();
        let start = c as u64 * CHUNK_TRIALS;
        for i in start..(start + CHUNK_TRIALS).min(cfg.trials) {
            let trace = run_policy_trial(
                &plant,
                &cfg.params,
                &cfg.policy,
                cfg.horizon,
                trial_seed(cfg.master_seed, i),
            )?;
            fold(&mut acc, i, trace);
        }
        Ok(acc)
    });
    let mut it = partials.into_iter();
    let mut total = it.next().expect("at least one trial")?;
    for p in it {
        merge(&mut total, p?);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: u64,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub policy: PolicyKind,
    pub horizon: u64,
    pub trials: u64,
    /// Mean and standard error of `X_n²` over non-diverged trials.
    pub second_moment_curve: Vec<CurvePoint>,
    pub diverged_count: u64,
    /// Share of recorded steps, over all trials, spent in emergency mode.
    pub emergency_fraction: f64,
    /// [`window_ratio`] at split 1/2.
    pub window_ratio: f64,
    /// Mean of `X_n²` over the last quarter of the curve.
    pub terminal_mean: f64,
    /// Largest mean of `N_n²` over `n`; adaptive policy only.
    pub max_mean_nsq: Option<f64>,
    pub tracker_mismatches: u64,
    pub max_symbol: Option<u128>,
}

/// Mean of the curve over the last half of `[split·len, len)` divided by its
/// mean over the first half. Two all-zero windows give 1.
pub fn window_ratio(means: &[f64], split: f64) -> f64 {
    let len = means.len();
    let start = ((split * len as f64).floor() as usize).min(len);
    let mid = start + (len - start) / 2;
    let avg = |w: &[f64]| if w.is_empty() { f64::NAN } else { w.iter().sum::<f64>() / w.len() as f64 };
    let (early, late) = (avg(&means[start..mid]), avg(&means[mid..]));
    if early == 0.0 && late == 0.0 {
        1.0
    } else {
        late / early
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Stable,
    Unstable,
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Stable => "stable",
            Verdict::Unstable => "unstable",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

/// Stable when the late-window ratio is in `[0.5, 1.5]` and nothing
/// diverged; unstable when it exceeds 4 or more than 1% of trials diverged.
/// Horizons below [`MIN_VERDICT_HORIZON`] are always inconclusive.
pub fn stability_verdict(stats: &SummaryStats, split: f64) -> Verdict {
    if stats.horizon < MIN_VERDICT_HORIZON {
        return Verdict::Inconclusive;
    }
    let means: Vec<f64> = stats.second_moment_curve.iter().map(|p| p.mean).collect();
    let ratio = window_ratio(&means, split);
    if (0.5..=1.5).contains(&ratio) && stats.diverged_count == 0 {
        Verdict::Stable
    } else if ratio > 4.0 || stats.diverged_count as f64 > 0.01 * stats.trials as f64 {
        Verdict::Unstable
    } else {
        Verdict::Inconclusive
    }
}

/// Extra outputs of [`run_experiment_with`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Keep the traces of the first this-many trials.
    pub keep_traces: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub stats: SummaryStats,
    pub traces: Vec<Trace>,
    /// Per-index `N_n²` statistics; adaptive policy only.
    pub drift: Option<DriftAccumulator>,
}

struct Ensemble {
    curve: Vec<RunningStats>,
    diverged: u64,
    steps: u64,
    emergency_steps: u64,
    mismatches: u64,
    max_symbol: Option<u128>,
    kept: Vec<Trace>,
    drift: Option<DriftAccumulator>,
}

impl Ensemble {
    fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            curve: Vec::new(),
            diverged: 0,
            steps: 0,
            emergency_steps: 0,
            mismatches: 0,
            max_symbol: None,
            kept: Vec::new(),
            drift: (cfg.policy == PolicyKind::AdaptiveFixedRate)
                .then(|| DriftAccumulator::new(cfg.params.error_weight, cfg.params.decay_rate)),
        }
    }

    fn push(&mut self, index: u64, trace: Trace, keep: usize) {
        self.steps += trace.rows.len() as u64;
        self.emergency_steps += trace.rows.iter().filter(|r| r.mode == Mode::Emergency).count() as u64;
        self.mismatches += u64::from(trace.tracker_mismatch.is_some());
        self.max_symbol = self.max_symbol.max(trace.rows.iter().filter_map(|r| r.symbol).max());
        if let Some(d) = self.drift.as_mut() {
            d.push_trace(&trace);
        }
        if trace.diverged {
            self.diverged += 1;
        } else {
            if self.curve.len() < trace.rows.len() {
                self.curve.resize(trace.rows.len(), RunningStats::new());
            }
            for (s, r) in self.curve.iter_mut().zip(&trace.rows) {
                s.push(r.x * r.x);
            }
        }
        if (index as usize) < keep {
            self.kept.push(trace);
        }
    }

    fn merge(&mut self, other: Ensemble) {
        merge_series(&mut self.curve, &other.curve);
        self.diverged += other.diverged;
        self.steps += other.steps;
        self.emergency_steps += other.emergency_steps;
        self.mismatches += other.mismatches;
        self.max_symbol = self.max_symbol.max(other.max_symbol);
        self.kept.extend(other.kept);
        if let (Some(a), Some(b)) = (self.drift.as_mut(), other.drift.as_ref()) {
            a.merge(b);
        }
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<SummaryStats> {
    Ok(run_experiment_with(cfg, Execution::default(), RunOptions::default())?.stats)
}

pub fn run_experiment_with(cfg: &ExperimentConfig, exec: Execution, opts: RunOptions) -> Result<ExperimentOutput> {
    let ens = fold_trials(
        cfg,
        exec,
        || Ensemble::new(cfg),
        |acc, i, tr| acc.push(i, tr, opts.keep_traces),
        Ensemble::merge,
    )?;
    if ens.diverged == cfg.trials {
        return Err(Error::AllDiverged { trials: cfg.trials as usize });
    }
    let curve: Vec<CurvePoint> = ens
        .curve
        .iter()
        .enumerate()
        .map(|(n, s)| CurvePoint {
            n: n as u64,
            mean: s.mean(),
            stderr: s.stderr(),
        })
        .collect();
    let means: Vec<f64> = curve.iter().map(|p| p.mean).collect();
    let tail = &means[means.len() - means.len().div_ceil(4)..];
    let max_mean_nsq = ens
        .drift
        .as_ref()
        .map(|d| d.mean_nsq().into_iter().fold(f64::NEG_INFINITY, f64::max));
    let stats = SummaryStats {
        policy: cfg.policy,
        horizon: cfg.horizon,
        trials: cfg.trials,
        diverged_count: ens.diverged,
        emergency_fraction: ens.emergency_steps as f64 / ens.steps.max(1) as f64,
        window_ratio: window_ratio(&means, 0.5),
        terminal_mean: tail.iter().sum::<f64>() / tail.len() as f64,
        max_mean_nsq,
        tracker_mismatches: ens.mismatches,
        max_symbol: ens.max_symbol,
        second_moment_curve: curve,
    };
    Ok(ExperimentOutput {
        stats,
        traces: ens.kept,
        drift: ens.drift,
    })
}

/// `n,mean,stderr` rows of the second-moment curve.
pub fn write_curve_csv<W: Write>(stats: &SummaryStats, out: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    for p in &stats.second_moment_curve {
        wr.serialize(p)?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepDim {
    P,
    L,
    K,
    M0,
    /// Rate in bits; sets `L = 2^{R−1} − 1`, the largest codebook that fits.
    R,
}

impl FromStr for SweepDim {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "P" => SweepDim::P,
            "L" => SweepDim::L,
            "K" => SweepDim::K,
            "M0" => SweepDim::M0,
            "R" => SweepDim::R,
            other => {
                return Err(Error::InvalidExperiment(format!(
                    "unknown sweep dimension {other:?} (expected P, L, K, M0 or R)"
                )))
            }
        })
    }
}

impl fmt::Display for SweepDim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepDim::P => "P",
            SweepDim::L => "L",
            SweepDim::K => "K",
            SweepDim::M0 => "M0",
            SweepDim::R => "R",
        })
    }
}

fn integral_u128(v: f64, what: &str) -> Result<u128> {
    if v.fract() != 0.0 || !(v >= 1.0) || v >= StrategyParams::MAX_LEVELS as f64 {
        return Err(Error::InvalidExperiment(format!("{what} must be a positive integer, got {v}")));
    }
    Ok(v as u128)
}

/// Copy of `params` with one dimension set to `value`.
pub fn with_dimension(params: &StrategyParams, dim: SweepDim, value: f64) -> Result<StrategyParams> {
    let mut p = *params;
    match dim {
        SweepDim::P => p.zoom = value,
        SweepDim::L => p.levels = integral_u128(value, "L")?,
        SweepDim::K => p.error_weight = value,
        SweepDim::M0 => p.range_floor = value,
        SweepDim::R => {
            let r = integral_u128(value, "R")?;
            if !(2..=127).contains(&r) {
                return Err(Error::InvalidExperiment(format!("R must be in [2, 127], got {r}")));
            }
            p.levels = (1u128 << (r - 1)) - 1;
        }
    }
    p.validate()?;
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    #[serde(rename = "L")]
    pub levels: u128,
    #[serde(rename = "P")]
    pub zoom: f64,
    #[serde(rename = "K")]
    pub error_weight: f64,
    #[serde(rename = "M0")]
    pub range_floor: f64,
    #[serde(rename = "R")]
    pub rate: u32,
    pub margin_drift: Option<f64>,
    pub feasible: Option<bool>,
    pub verdict: Verdict,
    pub window_ratio: f64,
    pub diverged_count: u64,
    pub emergency_fraction: f64,
    pub terminal_mean: f64,
}

/// One ensemble per value of `dim`. An ensemble in which every trial
/// diverged is reported as unstable rather than aborting the sweep.
pub fn sweep(cfg: &ExperimentConfig, dim: SweepDim, values: &[f64], exec: Execution) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::InvalidExperiment("sweep needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let params = with_dimension(&cfg.params, dim, value)?;
        let run = ExperimentConfig { params, ..cfg.clone() };
        let feas = feasibility_for(&cfg.system, &params, cfg.alpha).ok();
        let base = SweepRow {
            value,
            levels: params.levels,
            zoom: params.zoom,
            error_weight: params.error_weight,
            range_floor: params.range_floor,
            rate: codec::rate(&params),
            margin_drift: feas.as_ref().map(|f| f.margin_drift),
            feasible: feas.as_ref().map(|f| f.ok),
            verdict: Verdict::Unstable,
            window_ratio: f64::NAN,
            diverged_count: run.trials,
            emergency_fraction: f64::NAN,
            terminal_mean: f64::NAN,
        };
        let row = match run_experiment_with(&run, exec, RunOptions::default()) {
            Ok(out) => SweepRow {
                verdict: stability_verdict(&out.stats, 0.5),
                window_ratio: out.stats.window_ratio,
                diverged_count: out.stats.diverged_count,
                emergency_fraction: out.stats.emergency_fraction,
                terminal_mean: out.stats.terminal_mean,
                ..base
            },
            Err(Error::AllDiverged { .. }) => base,
            Err(e) => return Err(e),
        };
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}
