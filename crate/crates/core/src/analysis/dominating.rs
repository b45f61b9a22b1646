//! Frozen sequences, round-end times `τ(n)`, `Q_n` and the dominating
//! sequence `N_n`.
//!
//! Index `n` of every sequence here is the time index of the trace row.
//! `τ(n)` is the first `m ≥ n` whose state fits the partition built from the
//! previous range, `|X̃_m| ≤ P·M̃_{m−1}`, with `M̃_{−1} = M0`.

use serde::{Deserialize, Serialize};

use crate::control::{Mode, Trace};
use crate::{Error, Result};

/// A trace with `X` held at `X_{n0}` from `n0` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenTrace {
    pub n0: usize,
    /// `X̃_n`.
    pub xt: Vec<f64>,
    /// `M̃_n`.
    pub mt: Vec<f64>,
    /// `Ĩ_n`.
    pub it: Vec<f64>,
    pub zoom: f64,
    pub range_floor: f64,
}

impl FrozenTrace {
    pub fn len(&self) -> usize {
        self.xt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xt.is_empty()
    }

    /// Whether step `m` ends a round: `|X̃_m| ≤ P·M̃_{m−1}`.
    pub fn is_round_end(&self, m: usize) -> bool {
        let prev = if m == 0 { self.range_floor } else { self.mt[m - 1] };
        self.xt[m].abs() <= self.zoom * prev
    }
}

/// Freezes `trace` at `n0`.
///
/// After `n0`, `M̃_n = P·M̃_{n−1}` while `|X_{n0}| > M̃_{n−1}` and stays put
/// otherwise; `Ĩ_n = I_{n0}`. The sequence is extended up to and including
/// the first index at which `M̃` stops growing, which is far enough for
/// `τ(n0)` to exist.
pub fn freeze(trace: &Trace, n0: usize) -> Result<FrozenTrace> {
    let rows = &trace.rows;
    if n0 >= rows.len() {
        return Err(Error::IndexOutOfRange {
            index: n0,
            len: rows.len(),
        });
    }
    let p = trace.params.zoom;
    let mut xt: Vec<f64> = rows[..=n0].iter().map(|r| r.x).collect();
    let mut mt: Vec<f64> = rows[..=n0].iter().map(|r| r.m).collect();
    let mut it: Vec<f64> = rows[..=n0].iter().map(|r| r.i).collect();
    let x0 = rows[n0].x;
    let i0 = rows[n0].i;
    loop {
        let prev = *mt.last().expect("non-empty");
        let grows = x0.abs() > prev;
        xt.push(x0);
        it.push(i0);
        mt.push(if grows { p * prev } else { prev });
        if !grows {
            break;
        }
        if !prev.is_finite() {
            return Err(Error::Diverged {
                step: n0 as u64,
                magnitude: x0.abs(),
            });
        }
    }
    Ok(FrozenTrace {
        n0,
        xt,
        mt,
        it,
        zoom: p,
        range_floor: trace.params.range_floor,
    })
}

/// `τ`, `Q` and `N` over a sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominatingSeq {
    pub tau: Vec<usize>,
    pub q: Vec<f64>,
    pub n: Vec<f64>,
    pub k: f64,
}

/// `Q = sqrt(M² + K·I²)`.
#[inline]
pub fn q_value(m: f64, i: f64, k: f64) -> f64 {
    (m * m + k * i * i).sqrt()
}

/// `N_n = Q_{τ(n)}·2^{τ(n)−n}`. Scaling by a power of two is exact.
#[inline]
pub fn n_value(q_tau: f64, lag: usize) -> f64 {
    q_tau * 2f64.powi(lag as i32)
}

/// `τ(n)` for every `n`, scanning backwards; `None` where no round end follows.
fn round_ends(len: usize, is_end: impl Fn(usize) -> bool) -> Vec<Option<usize>> {
    let mut tau = vec![None; len];
    let mut next = None;
    for m in (0..len).rev() {
        if is_end(m) {
            next = Some(m);
        }
        tau[m] = next;
    }
    tau
}

fn assemble(tau: Vec<usize>, m: &[f64], i: &[f64], k: f64) -> DominatingSeq {
    let q: Vec<f64> = m.iter().zip(i).map(|(&m, &i)| q_value(m, i, k)).collect();
    let n = tau.iter().enumerate().map(|(n, &t)| n_value(q[t], t - n)).collect();
    DominatingSeq { tau, q, n, k }
}

/// Dominating sequence of a frozen trace. `p` must be the zoom the trace was
/// frozen with.
pub fn dominating_seq(frozen: &FrozenTrace, k: f64, p: f64) -> Result<DominatingSeq> {
    if p != frozen.zoom {
        return Err(Error::InvalidParams(format!(
            "zoom {p} differs from the frozen trace's {}",
            frozen.zoom
        )));
    }
    let tau = round_ends(frozen.len(), |m| frozen.is_round_end(m));
    let tau = tau
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or(Error::RoundUnterminated {
            last_index: frozen.len().saturating_sub(1),
        })?;
    Ok(assemble(tau, &frozen.mt, &frozen.it, k))
}

/// Dominating sequence of an unfrozen trace, where round ends are exactly
/// the normal steps. Covers the longest prefix on which `τ` exists, so a
/// trailing emergency run is dropped.
pub fn unfrozen_dominating(trace: &Trace, k: f64) -> DominatingSeq {
    let rows = &trace.rows;
    let tau = round_ends(rows.len(), |m| rows[m].mode == Mode::Normal);
    let defined = tau.iter().take_while(|t| t.is_some()).count();
    let tau: Vec<usize> = tau.into_iter().take(defined).map(|t| t.expect("prefix")).collect();
    let m: Vec<f64> = rows.iter().map(|r| r.m).collect();
    let i: Vec<f64> = rows.iter().map(|r| r.i).collect();
    let mut seq = assemble(tau, &m[..defined], &i[..defined], k);
    // `q` past the prefix is still well defined and useful to callers.
    seq.q = m.iter().zip(&i).map(|(&m, &i)| q_value(m, i, k)).collect();
    seq
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominationViolation {
    pub n0: usize,
    pub x: f64,
    pub n: f64,
    pub tau: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DominationReport {
    pub checked: usize,
    pub violations: Vec<DominationViolation>,
}

impl DominationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn merge(&mut self, other: DominationReport) {
        self.checked += other.checked;
        self.violations.extend(other.violations);
    }
}

/// Checks `|X_{n0}| ≤ N_{n0}` on the trace frozen at each `n0`, with no
/// tolerance.
pub fn check_domination(trace: &Trace, k: f64, n0_set: &[usize]) -> Result<DominationReport> {
    let mut report = DominationReport::default();
    for &n0 in n0_set {
        let frozen = freeze(trace, n0)?;
        let seq = dominating_seq(&frozen, k, trace.params.zoom)?;
        let x = trace.rows[n0].x;
        report.checked += 1;
        if !(x.abs() <= seq.n[n0]) {
            report.violations.push(DominationViolation {
                n0,
                x,
                n: seq.n[n0],
                tau: seq.tau[n0],
            });
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HalvingReport {
    /// Steps with `τ(n) > n` whose successor is also covered.
    pub checked: usize,
    pub violations: usize,
    pub first_violation: Option<usize>,
}

impl HalvingReport {
    pub fn merge(&mut self, other: &HalvingReport) {
        self.checked += other.checked;
        self.violations += other.violations;
        self.first_violation = self.first_violation.or(other.first_violation);
    }
}

/// `N_{n+1} = N_n / 2` exactly wherever `τ(n) > n`.
pub fn check_halving(seq: &DominatingSeq) -> HalvingReport {
    let mut report = HalvingReport::default();
    for n in 0..seq.n.len().saturating_sub(1) {
        if seq.tau[n] > n {
            report.checked += 1;
            if seq.n[n + 1] != seq.n[n] / 2.0 {
                report.violations += 1;
                report.first_violation.get_or_insert(n);
            }
        }
    }
    report
}
