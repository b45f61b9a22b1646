//! The `verify` command: analysis checks over a fresh ensemble or a
//! recorded trace file.

use std::fmt;
use std::str::FromStr;

use anyhow::{bail, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zoomctl_core::analysis::checks::{check_invariants, replay_trace, InvariantReport};
use zoomctl_core::analysis::dominating::{check_domination, DominationReport};
use zoomctl_core::analysis::drift::{DriftAccumulator, MIN_DRIFT_TRACES};
use zoomctl_core::analysis::oracle::{moment_recursion_oracle, OraclePolicy};
use zoomctl_core::control::{Plant, PolicyKind, Trace, TraceRow};
use zoomctl_core::harness::{fold_trials, run_experiment_with, trial_seed, ExperimentConfig, RunOptions};
use zoomctl_core::parallel::Execution;
use zoomctl_core::stochastic;
use zoomctl_core::Error as CoreError;

/// Random `n0` per trial for the domination check.
const N0_PER_TRIAL: usize = 10;
/// Cap on `n0` checked in a single trace file.
const N0_PER_FILE: usize = 1000;
/// Horizon of the zero-control oracle comparison.
const ZERO_CONTROL_HORIZON: u64 = 20;
/// Floor on zero-control trials. `X_n²` under zero control has an enormous
/// kurtosis; below this the sample stderr is not a usable scale.
const ZERO_CONTROL_MIN_TRIALS: u64 = 20_000;
const Z_LIMIT: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Check {
    Domination,
    Drift,
    Containment,
    TrackerEquality,
    OracleMatch,
}

impl Check {
    pub const ALL: [Check; 5] = [
        Check::Domination,
        Check::Drift,
        Check::Containment,
        Check::TrackerEquality,
        Check::OracleMatch,
    ];

    /// Checks that need a whole ensemble rather than one trace.
    fn needs_ensemble(self) -> bool {
        matches!(self, Check::Drift | Check::OracleMatch)
    }

    fn needs_adaptive(self) -> bool {
        !matches!(self, Check::OracleMatch)
    }
}

impl FromStr for Check {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "domination" => Check::Domination,
            "drift" => Check::Drift,
            "containment" => Check::Containment,
            "tracker_equality" => Check::TrackerEquality,
            "oracle_match" => Check::OracleMatch,
            other => bail!(
                "unknown check {other:?} (domination, drift, containment, tracker_equality, oracle_match or all)"
            ),
        })
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Check::Domination => "domination",
            Check::Drift => "drift",
            Check::Containment => "containment",
            Check::TrackerEquality => "tracker_equality",
            Check::OracleMatch => "oracle_match",
        })
    }
}

/// Parses a comma-separated list; `all` or an empty list selects every check
/// that applies (`trace_mode` drops the ensemble-only ones).
pub fn parse_checks(list: Option<&str>, trace_mode: bool) -> Result<Vec<Check>> {
    let mut out: Vec<Check> = match list.map(str::trim) {
        None | Some("") | Some("all") => Check::ALL
            .into_iter()
            .filter(|c| !(trace_mode && c.needs_ensemble()))
            .collect(),
        Some(list) => list.split(',').map(str::parse).collect::<Result<_>>()?,
    };
    out.sort();
    out.dedup();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub check: Check,
    pub passed: bool,
    pub detail: String,
}

#[derive(Default)]
struct TrackerTally {
    checked: usize,
    failures: usize,
    first: Option<(u64, usize, String)>,
}

impl TrackerTally {
    fn record(&mut self, trial: u64, index: usize, reason: String) {
        self.failures += 1;
        if self.first.is_none() {
            self.first = Some((trial, index, reason));
        }
    }

    fn merge(&mut self, other: TrackerTally) {
        self.checked += other.checked;
        self.failures += other.failures;
        if self.first.is_none() {
            self.first = other.first;
        }
    }

    fn outcome(self) -> CheckOutcome {
        CheckOutcome {
            check: Check::TrackerEquality,
            passed: self.failures == 0,
            detail: match self.first {
                None => format!("{} traces replayed bit for bit", self.checked),
                Some((trial, index, reason)) => format!(
                    "{} of {} traces diverge; first: trial {trial}, index {index}: {reason}",
                    self.failures, self.checked
                ),
            },
        }
    }
}

#[derive(Default)]
struct Tally {
    domination: Option<DominationReport>,
    invariants: Option<InvariantReport>,
    tracker: Option<TrackerTally>,
    drift: Option<DriftAccumulator>,
}

impl Tally {
    fn merge(&mut self, other: Tally) {
        if let (Some(a), Some(b)) = (self.domination.as_mut(), other.domination) {
            a.merge(b);
        }
        if let (Some(a), Some(b)) = (self.invariants.as_mut(), other.invariants) {
            a.merge(&b);
        }
        if let (Some(a), Some(b)) = (self.tracker.as_mut(), other.tracker) {
            a.merge(b);
        }
        if let (Some(a), Some(b)) = (self.drift.as_mut(), other.drift) {
            a.merge(&b);
        }
    }
}

fn domination_outcome(r: &DominationReport, scope: &str) -> CheckOutcome {
    CheckOutcome {
        check: Check::Domination,
        passed: r.passed(),
        detail: match r.violations.first() {
            None => format!("{} n0 checked {scope}, |X_n0| <= N_n0 at all of them", r.checked),
            Some(v) => format!("{} of {} n0 violate |X_n0| <= N_n0; first: {v:?}", r.violations.len(), r.checked),
        },
    }
}

fn containment_outcome(r: &InvariantReport) -> CheckOutcome {
    CheckOutcome {
        check: Check::Containment,
        passed: r.passed(),
        detail: format!(
            "{} normal steps ({} unclamped): {} containment, {} control-error, {} emergency, {} mode, {} range violations",
            r.normal_steps,
            r.unclamped_steps,
            r.containment_violations,
            r.control_error_violations,
            r.emergency_violations,
            r.mode_violations,
            r.range_violations
        ),
    }
}

fn require_adaptive(cfg: &ExperimentConfig, checks: &[Check]) -> Result<()> {
    if cfg.policy != PolicyKind::AdaptiveFixedRate {
        if let Some(c) = checks.iter().find(|c| c.needs_adaptive()) {
            bail!("check {c} needs policy adaptive_fixed_rate, config has {}", cfg.policy);
        }
    }
    Ok(())
}

/// Runs `checks` on a fresh ensemble of `cfg`.
pub fn verify_ensemble(cfg: &ExperimentConfig, checks: &[Check]) -> Result<Vec<CheckOutcome>> {
    require_adaptive(cfg, checks)?;
    let want = |c: Check| checks.contains(&c);
    if want(Check::Drift) && cfg.trials < MIN_DRIFT_TRACES as u64 {
        return Err(CoreError::InsufficientTrials {
            have: cfg.trials as usize,
            need: MIN_DRIFT_TRACES,
        }
        .into());
    }
    let mut out = Vec::new();
    let trace_level = [Check::Domination, Check::Drift, Check::Containment, Check::TrackerEquality];
    if trace_level.iter().any(|&c| want(c)) {
        let plant = Plant::new(&cfg.system)?;
        let (mu_a, mu_w) = (plant.mu_a, plant.mu_w);
        let k = cfg.params.error_weight;
        let init = || Tally {
            domination: want(Check::Domination).then(DominationReport::default),
            invariants: want(Check::Containment).then(InvariantReport::default),
            tracker: want(Check::TrackerEquality).then(TrackerTally::default),
            drift: want(Check::Drift).then(|| DriftAccumulator::new(k, cfg.params.decay_rate)),
        };
        let fold = |acc: &mut Tally, i: u64, tr: Trace| {
            if let Some(d) = acc.domination.as_mut() {
                let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(cfg.master_seed, i) ^ 0xD0D0);
                let n0s: Vec<usize> = (0..N0_PER_TRIAL).map(|_| rng.random_range(0..tr.len())).collect();
                match check_domination(&tr, k, &n0s) {
                    Ok(r) => d.merge(r),
                    // Machinery failure counts against the check.
                    Err(_) => d.checked += n0s.len(),
                }
            }
            if let Some(inv) = acc.invariants.as_mut() {
                inv.merge(&check_invariants(&tr.rows, &cfg.params, mu_a, mu_w));
            }
            if let Some(t) = acc.tracker.as_mut() {
                t.checked += 1;
                if let Some(n) = tr.tracker_mismatch {
                    t.record(i, n as usize, "encoder and controller trackers differ".into());
                } else {
                    match replay_trace(&tr.rows, &cfg.params, &cfg.policy, mu_a, mu_w) {
                        Ok(r) => {
                            if let Some(m) = r.first_mismatch {
                                t.record(i, m.index, m.reason);
                            }
                        }
                        Err(e) => t.record(i, 0, e.to_string()),
                    }
                }
            }
            if let Some(d) = acc.drift.as_mut() {
                d.push_trace(&tr);
            }
        };
        let tally = fold_trials(cfg, Execution::Parallel, init, fold, Tally::merge)?;
        if let Some(d) = &tally.domination {
            out.push(domination_outcome(d, &format!("over {} trials", cfg.trials)));
        }
        if let Some(d) = &tally.drift {
            let report = d.finish(cfg.drift_constant()?)?;
            out.push(CheckOutcome {
                check: Check::Drift,
                passed: report.passed(),
                detail: format!(
                    "{} traces, {} indices: {} drift excesses, {} cap violations, {} halving violations; max mean N^2 = {:.4} vs D/c = {}",
                    report.traces,
                    report.rows.len(),
                    report.flagged.len(),
                    report.cap_violations.len(),
                    report.halving.violations,
                    report.max_mean_nsq,
                    report.cap
                ),
            });
        }
        if let Some(inv) = &tally.invariants {
            out.push(containment_outcome(inv));
        }
        if let Some(t) = tally.tracker {
            out.push(t.outcome());
        }
    }
    if want(Check::OracleMatch) {
        out.push(oracle_match(cfg)?);
    }
    out.sort_by_key(|o| o.check);
    Ok(out)
}

/// Zero control for `n ≤ 20` (at least 20000 trials) and perfect observation at `n = 1, 10, 100, …`
/// against the exact second-moment recursion, within three standard errors
/// of the simulated curve.
fn oracle_match(cfg: &ExperimentConfig) -> Result<CheckOutcome> {
    let a = stochastic::moments(&cfg.system.a)?;
    let w = stochastic::moments(&cfg.system.w)?;
    let mut worst = (0.0f64, "", 0u64);
    let mut failures = 0usize;
    let mut checked = 0usize;
    for (policy, oracle, horizon, trials) in [
        (
            PolicyKind::ZeroControl,
            OraclePolicy::ZeroControl,
            cfg.horizon.min(ZERO_CONTROL_HORIZON),
            cfg.trials.max(ZERO_CONTROL_MIN_TRIALS),
        ),
        (PolicyKind::PerfectObservation, OraclePolicy::PerfectObservation, cfg.horizon, cfg.trials),
    ] {
        let run = ExperimentConfig {
            policy,
            horizon,
            trials,
            ..cfg.clone()
        };
        let stats = run_experiment_with(&run, Execution::Parallel, RunOptions::default())?.stats;
        let points = stats.second_moment_curve.iter().filter(|p| match oracle {
            OraclePolicy::ZeroControl => p.n > 0,
            OraclePolicy::PerfectObservation => p.n > 0 && 10u64.pow(p.n.ilog10()) == p.n,
        });
        for p in points {
            let exact = moment_recursion_oracle(oracle, a, w, p.n as usize);
            let dev = (p.mean - exact).abs();
            let z = if p.stderr > 0.0 { dev / p.stderr } else if dev == 0.0 { 0.0 } else { f64::INFINITY };
            checked += 1;
            failures += usize::from(z > Z_LIMIT);
            if z > worst.0 {
                worst = (z, policy.name(), p.n);
            }
        }
    }
    Ok(CheckOutcome {
        check: Check::OracleMatch,
        passed: failures == 0,
        detail: format!(
            "{checked} curve points vs the exact recursion, {failures} beyond {Z_LIMIT} stderr; worst {:.2} stderr ({} at n = {})",
            worst.0, worst.1, worst.2
        ),
    })
}

/// Runs the trace-level `checks` on recorded `rows` under `cfg`.
pub fn verify_trace(cfg: &ExperimentConfig, rows: Vec<TraceRow>, checks: &[Check]) -> Result<Vec<CheckOutcome>> {
    if let Some(c) = checks.iter().find(|c| c.needs_ensemble()) {
        bail!("check {c} needs an ensemble; drop --trace to run it");
    }
    require_adaptive(cfg, checks)?;
    zoomctl_core::analysis::checks::validate_rows(&rows)?;
    let plant = Plant::new(&cfg.system)?;
    let mut out = Vec::new();
    for &c in checks {
        out.push(match c {
            Check::TrackerEquality => {
                let mut t = TrackerTally {
                    checked: 1,
                    ..Default::default()
                };
                let r = replay_trace(&rows, &cfg.params, &cfg.policy, plant.mu_a, plant.mu_w)?;
                if let Some(m) = r.first_mismatch {
                    t.record(0, m.index, m.reason);
                }
                t.outcome()
            }
            Check::Containment => containment_outcome(&check_invariants(&rows, &cfg.params, plant.mu_a, plant.mu_w)),
            Check::Domination => {
                let trace = Trace {
                    horizon: rows.len() as u64 - 1,
                    rows: rows.clone(),
                    params: cfg.params,
                    policy: cfg.policy,
                    system: cfg.system.clone(),
                    seed: 0,
                    diverged: false,
                    tracker_mismatch: None,
                };
                let n0s: Vec<usize> = if trace.len() <= N0_PER_FILE {
                    (0..trace.len()).collect()
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
                    (0..N0_PER_FILE).map(|_| rng.random_range(0..trace.len())).collect()
                };
                domination_outcome(&check_domination(&trace, cfg.params.error_weight, &n0s)?, "in the trace file")
            }
            Check::Drift | Check::OracleMatch => unreachable!("rejected above"),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use zoomctl_core::codec::StrategyParams;
    use zoomctl_core::control::{run_policy_trial, SystemSpec};

    fn cfg(trials: u64) -> ExperimentConfig {
        ExperimentConfig {
            system: SystemSpec::reference(),
            params: StrategyParams::new(16, 2.0, 0.1, 2.0, 0.2).unwrap(),
            policy: PolicyKind::AdaptiveFixedRate,
            horizon: 300,
            trials,
            master_seed: 11,
            alpha: 4.5,
        }
    }

    #[test]
    fn check_lists() {
        assert_eq!(parse_checks(None, false).unwrap(), Check::ALL.to_vec());
        assert_eq!(
            parse_checks(Some("all"), true).unwrap(),
            vec![Check::Domination, Check::Containment, Check::TrackerEquality]
        );
        assert_eq!(
            parse_checks(Some("drift,domination,drift"), false).unwrap(),
            vec![Check::Domination, Check::Drift]
        );
        assert!(parse_checks(Some("domination,nope"), false).is_err());
    }

    #[test]
    fn selection_runs_only_the_requested_checks() {
        let out = verify_ensemble(&cfg(8), &[Check::Domination]).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].check, Check::Domination);
        assert!(out[0].passed, "{out:?}");
    }

    #[test]
    fn drift_needs_enough_trials() {
        let e = verify_ensemble(&cfg(10), &[Check::Drift]).unwrap_err();
        assert!(e.to_string().contains(&MIN_DRIFT_TRACES.to_string()), "{e}");
    }

    #[test]
    fn all_checks_pass_on_feasible_constants() {
        let c = ExperimentConfig {
            params: StrategyParams::new(8_098_920_141_276_734_029_824, 7.537_691_768_103_941e20, 4.0, 2.0, 0.2).unwrap(),
            ..cfg(128)
        };
        let out = verify_ensemble(&c, &Check::ALL).unwrap();
        assert_eq!(out.len(), 5);
        for o in &out {
            assert!(o.passed, "{o:?}");
        }
    }

    #[test]
    fn drift_cap_fails_on_small_codebook() {
        // P = 2, L = 16, M0 = 0.1 is far from feasible; the cap D/c is blown.
        let out = verify_ensemble(&cfg(128), &[Check::Drift, Check::Containment]).unwrap();
        assert!(!out[0].passed, "{out:?}");
        assert!(out[1].passed, "containment holds regardless of feasibility: {out:?}");
    }

    #[test]
    fn corrupted_trace_reports_first_divergent_index() {
        let c = cfg(1);
        let plant = Plant::new(&c.system).unwrap();
        let tr = run_policy_trial(&plant, &c.params, &c.policy, 200, 4).unwrap();
        let clean = verify_trace(&c, tr.rows.clone(), &[Check::TrackerEquality]).unwrap();
        assert!(clean[0].passed);
        let mut rows = tr.rows;
        rows[77].i *= 1.5;
        let bad = verify_trace(&c, rows, &[Check::TrackerEquality]).unwrap();
        assert!(!bad[0].passed);
        assert!(bad[0].detail.contains("index 77"), "{}", bad[0].detail);
    }

    #[test]
    fn trace_mode_rejects_ensemble_checks() {
        let e = verify_trace(&cfg(1), Vec::new(), &[Check::Drift]).unwrap_err();
        assert!(e.to_string().contains("ensemble"));
    }
}
