//! Per-trace protocol invariants and exact replay of recorded traces.

use serde::{Deserialize, Serialize};

use crate::codec::{Codeword, StrategyParams};
use crate::control::{self, Mode, PolicyKind, TraceRow, TrackerState};
use crate::{Error, Result};

/// Slack for inequalities whose two sides are computed with a handful of
/// roundings, in units of the magnitude involved.
const ROUNDING_SLACK: f64 = 8.0 * f64::EPSILON;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct InvariantReport {
    pub steps: usize,
    pub normal_steps: usize,
    /// Normal steps where neither `M0` clamp was active.
    pub unclamped_steps: usize,
    /// `X_n ∉ ρ_n[M_n − 2I_n, M_n]` at a normal step.
    pub containment_violations: usize,
    /// Of those, how many were unclamped.
    pub unclamped_containment_violations: usize,
    /// `|μ_A X − (U − μ_W)| > |μ_A| I` at a normal step.
    pub control_error_violations: usize,
    /// Emergency step with `U ≠ μ_W` or `M ≠ P·M_prev`.
    pub emergency_violations: usize,
    /// Step whose mode disagrees with `|X_n| ≤ P·M_{n−1}`.
    pub mode_violations: usize,
    /// Symbol outside `[0, 2L]`, or `M ≥ I ≥ M0` broken.
    pub range_violations: usize,
    pub max_symbol: Option<u128>,
}

impl InvariantReport {
    pub fn passed(&self) -> bool {
        self.containment_violations == 0
            && self.control_error_violations == 0
            && self.emergency_violations == 0
            && self.mode_violations == 0
            && self.range_violations == 0
    }

    pub fn merge(&mut self, o: &InvariantReport) {
        self.steps += o.steps;
        self.normal_steps += o.normal_steps;
        self.unclamped_steps += o.unclamped_steps;
        self.containment_violations += o.containment_violations;
        self.unclamped_containment_violations += o.unclamped_containment_violations;
        self.control_error_violations += o.control_error_violations;
        self.emergency_violations += o.emergency_violations;
        self.mode_violations += o.mode_violations;
        self.range_violations += o.range_violations;
        self.max_symbol = self.max_symbol.max(o.max_symbol);
    }
}

/// Checks the adaptive-scheme invariants on every row.
///
/// Containment is checked at every normal step, clamped or not; it holds in
/// both cases.
pub fn check_invariants(rows: &[TraceRow], params: &StrategyParams, mu_a: f64, mu_w: f64) -> InvariantReport {
    let mut rep = InvariantReport::default();
    let mut prev = TrackerState::initial(params);
    for r in rows {
        rep.steps += 1;
        let fits = r.x.abs() <= params.zoom * prev.range;
        if fits != (r.mode == Mode::Normal) {
            rep.mode_violations += 1;
        }
        match r.symbol {
            Some(s) if s <= params.emergency_symbol() => {
                rep.max_symbol = rep.max_symbol.max(Some(s));
                if (s == params.emergency_symbol()) != (r.mode == Mode::Emergency) {
                    rep.range_violations += 1;
                }
            }
            _ => rep.range_violations += 1,
        }
        if !(r.m >= r.i && r.i >= params.range_floor) {
            rep.range_violations += 1;
        }
        match r.mode {
            Mode::Normal => {
                rep.normal_steps += 1;
                let unclamped = r.symbol.is_some_and(|s| {
                    params
                        .partition(prev.range)
                        .cell(s)
                        .is_ok_and(|c| c.is_unclamped(params.range_floor))
                });
                rep.unclamped_steps += usize::from(unclamped);
                let s = f64::from(r.rho);
                let (lo, hi) = {
                    let ends = (s * (r.m - 2.0 * r.i), s * r.m);
                    (ends.0.min(ends.1), ends.0.max(ends.1))
                };
                let slack = ROUNDING_SLACK * (r.m + 2.0 * r.i);
                if !(lo - slack <= r.x && r.x <= hi + slack) {
                    rep.containment_violations += 1;
                    rep.unclamped_containment_violations += usize::from(unclamped);
                }
                let err = (mu_a * r.x - (r.u - mu_w)).abs();
                let bound = mu_a.abs() * r.i;
                if !(err <= bound + ROUNDING_SLACK * mu_a.abs() * (r.x.abs() + r.m + r.i) + ROUNDING_SLACK * mu_w.abs()) {
                    rep.control_error_violations += 1;
                }
            }
            Mode::Emergency => {
                if r.u != mu_w || r.m != params.zoom * prev.range {
                    rep.emergency_violations += 1;
                }
            }
        }
        prev = r.tracker();
    }
    rep
}

/// Where and why a replay disagreed with the recorded trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayMismatch {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub rows: usize,
    pub first_mismatch: Option<ReplayMismatch>,
}

impl ReplayReport {
    pub fn passed(&self) -> bool {
        self.first_mismatch.is_none()
    }
}

/// Re-runs encoder and controller on the recorded states and compares
/// symbols, trackers, controls and the plant recursion bit for bit.
pub fn replay_trace(
    rows: &[TraceRow],
    params: &StrategyParams,
    policy: &PolicyKind,
    mu_a: f64,
    mu_w: f64,
) -> Result<ReplayReport> {
    let fail = |index: usize, reason: String| {
        Ok(ReplayReport {
            rows: rows.len(),
            first_mismatch: Some(ReplayMismatch { index, reason }),
        })
    };
    let mut enc = TrackerState::initial(params);
    let mut ctl = enc;
    for (idx, r) in rows.iter().enumerate() {
        if r.n != idx as u64 {
            return fail(idx, format!("row index {} out of sequence", r.n));
        }
        let (symbol, u, tracker) = if policy.uses_channel() {
            let (cw, next_enc) = match control::policy_encoder_step(policy, r.x, &enc, params) {
                Ok(v) => v,
                Err(e) => return fail(idx, format!("encoder: {e}")),
            };
            let recorded = match r.symbol {
                Some(s) => Codeword(s),
                None => return fail(idx, "missing symbol".into()),
            };
            if recorded != cw {
                return fail(idx, format!("symbol {} recorded, encoder sends {}", recorded.0, cw.0));
            }
            let (u, next_ctl) = match control::policy_controller_step(policy, recorded, &ctl, mu_a, mu_w, params) {
                Ok(v) => v,
                Err(e) => return fail(idx, format!("controller: {e}")),
            };
            if !next_enc.bit_eq(&next_ctl) {
                return fail(idx, format!("encoder tracker {next_enc:?} != controller tracker {next_ctl:?}"));
            }
            enc = next_enc;
            ctl = next_ctl;
            (Some(cw.0), u, ctl)
        } else {
            let u = match policy {
                PolicyKind::PerfectObservation => mu_a * r.x + mu_w,
                _ => mu_w,
            };
            (None, u, TrackerState { step: ctl.step + 1, ..ctl })
        };
        if r.symbol != symbol {
            return fail(idx, "symbol present for an uncoded policy".into());
        }
        if !r.tracker().bit_eq(&tracker) {
            return fail(
                idx,
                format!(
                    "recorded tracker (M={}, I={}, rho={}, {}) != replayed (M={}, I={}, rho={}, {})",
                    r.m, r.i, r.rho, r.mode, tracker.range, tracker.error_bound, tracker.sign, tracker.mode
                ),
            );
        }
        ctl = tracker;
        if r.u.to_bits() != u.to_bits() {
            return fail(idx, format!("recorded U={} != replayed U={u}", r.u));
        }
        if let Some(next) = rows.get(idx + 1) {
            let x = control::plant_step(r.x, r.u, r.a, r.w);
            if x.to_bits() != next.x.to_bits() {
                return fail(idx + 1, format!("recorded X={} != A·X + W − U = {x}", next.x));
            }
        }
    }
    Ok(ReplayReport {
        rows: rows.len(),
        first_mismatch: None,
    })
}

/// Checks that `rows` can be replayed at all (non-empty, starts at `X_0 = 0`).
pub fn validate_rows(rows: &[TraceRow]) -> Result<()> {
    match rows.first() {
        None => Err(Error::Protocol("empty trace".into())),
        Some(r) if r.x != 0.0 => Err(Error::Protocol(format!("trace starts at X_0 = {}, expected 0", r.x))),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{run_policy_trial, Plant, SystemSpec};

    fn stress() -> (Plant, StrategyParams) {
        (
            Plant::new(&SystemSpec::reference()).unwrap(),
            StrategyParams::new(16, 2.0, 0.1, 2.0, 0.2).unwrap(),
        )
    }

    #[test]
    fn simulated_traces_satisfy_invariants() {
        let (plant, p) = stress();
        let mut total = InvariantReport::default();
        for seed in 0..20 {
            let tr = run_policy_trial(&plant, &p, &PolicyKind::AdaptiveFixedRate, 2000, seed).unwrap();
            total.merge(&check_invariants(&tr.rows, &p, plant.mu_a, plant.mu_w));
        }
        assert!(total.passed(), "{total:?}");
        assert!(total.unclamped_steps > 0);
        assert!(total.normal_steps < total.steps, "stress config should hit emergencies");
    }

    #[test]
    fn replay_accepts_clean_and_flags_corruption() {
        let (plant, p) = stress();
        let tr = run_policy_trial(&plant, &p, &PolicyKind::AdaptiveFixedRate, 300, 5).unwrap();
        let ok = replay_trace(&tr.rows, &p, &tr.policy, plant.mu_a, plant.mu_w).unwrap();
        assert!(ok.passed(), "{ok:?}");

        let mut bad = tr.rows.clone();
        bad[117].m = f64::from_bits(bad[117].m.to_bits() + 1);
        let rep = replay_trace(&bad, &p, &tr.policy, plant.mu_a, plant.mu_w).unwrap();
        assert_eq!(rep.first_mismatch.unwrap().index, 117);

        let mut bad = tr.rows.clone();
        bad[40].x += 1e-9;
        let rep = replay_trace(&bad, &p, &tr.policy, plant.mu_a, plant.mu_w).unwrap();
        assert_eq!(rep.first_mismatch.unwrap().index, 40);
    }

    #[test]
    fn replay_uncoded() {
        let (plant, p) = stress();
        for policy in [PolicyKind::ZeroControl, PolicyKind::PerfectObservation] {
            let tr = run_policy_trial(&plant, &p, &policy, 100, 2).unwrap();
            assert!(replay_trace(&tr.rows, &p, &policy, plant.mu_a, plant.mu_w).unwrap().passed());
        }
    }
}
