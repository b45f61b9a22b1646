//! Ensemble drift diagnostics for `N_n²`.
//!
//! At each `n` the paired difference `N_{n+1}² − (1 − c)·N_n²` is averaged
//! over traces; index `n` is flagged when its mean exceeds `D` by more than
//! three standard errors. Separately, `mean N_n²` must stay below
//! `(D/c)·(1 + 3·relative stderr)`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::dominating::{check_halving, unfrozen_dominating, HalvingReport};
use crate::control::Trace;
use crate::stats::{merge_series, RunningStats};
use crate::{Error, Result};

/// Fewer traces than this give no usable standard errors.
pub const MIN_DRIFT_TRACES: usize = 100;

/// Streaming per-index statistics; merge partial accumulators in a fixed
/// order for reproducible results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftAccumulator {
    pub error_weight: f64,
    pub decay_rate: f64,
    traces: usize,
    skipped_diverged: usize,
    nsq: Vec<RunningStats>,
    next: Vec<RunningStats>,
    diff: Vec<RunningStats>,
    halving: HalvingReport,
    base_case_max_rel_err: f64,
}

impl DriftAccumulator {
    pub fn new(error_weight: f64, decay_rate: f64) -> Self {
        Self {
            error_weight,
            decay_rate,
            traces: 0,
            skipped_diverged: 0,
            nsq: Vec::new(),
            next: Vec::new(),
            diff: Vec::new(),
            halving: HalvingReport::default(),
            base_case_max_rel_err: 0.0,
        }
    }

    pub fn traces(&self) -> usize {
        self.traces
    }

    /// Adds one trace. Diverged traces are counted and skipped.
    pub fn push_trace(&mut self, trace: &Trace) {
        if trace.diverged {
            self.skipped_diverged += 1;
            return;
        }
        self.traces += 1;
        let seq = unfrozen_dominating(trace, self.error_weight);
        self.halving.merge(&check_halving(&seq));
        let len = seq.n.len();
        if self.nsq.len() < len {
            self.nsq.resize(len, RunningStats::new());
            self.next.resize(len.saturating_sub(1).max(self.next.len()), RunningStats::new());
            self.diff.resize(self.next.len(), RunningStats::new());
        }
        let keep = 1.0 - self.decay_rate;
        for (n, &v) in seq.n.iter().enumerate() {
            let sq = v * v;
            self.nsq[n].push(sq);
            if let Some(&w) = seq.n.get(n + 1) {
                self.next[n].push(w * w);
                self.diff[n].push(w * w - keep * sq);
            }
        }
        if let Some(&n0) = seq.n.first() {
            let m0 = trace.params.range_floor;
            let expect = (1.0 + self.error_weight) * m0 * m0;
            let err = ((n0 * n0) - expect).abs() / expect;
            self.base_case_max_rel_err = self.base_case_max_rel_err.max(err);
        }
    }

    pub fn merge(&mut self, other: &DriftAccumulator) {
        self.traces += other.traces;
        self.skipped_diverged += other.skipped_diverged;
        merge_series(&mut self.nsq, &other.nsq);
        merge_series(&mut self.next, &other.next);
        merge_series(&mut self.diff, &other.diff);
        self.halving.merge(&other.halving);
        self.base_case_max_rel_err = self.base_case_max_rel_err.max(other.base_case_max_rel_err);
    }

    /// Mean of `N_n²` at each index.
    pub fn mean_nsq(&self) -> Vec<f64> {
        self.nsq.iter().map(RunningStats::mean).collect()
    }

    pub fn finish(&self, d: f64) -> Result<DriftReport> {
        if self.traces < MIN_DRIFT_TRACES {
            return Err(Error::InsufficientTrials {
                have: self.traces,
                need: MIN_DRIFT_TRACES,
            });
        }
        let c = self.decay_rate;
        let cap = d / c;
        let mut rows = Vec::with_capacity(self.nsq.len());
        let mut flagged = Vec::new();
        let mut cap_violations = Vec::new();
        let mut max_mean_nsq = f64::NEG_INFINITY;
        for (n, s) in self.nsq.iter().enumerate() {
            let mean = s.mean();
            max_mean_nsq = max_mean_nsq.max(mean);
            let rel = if mean > 0.0 { s.stderr() / mean } else { 0.0 };
            let cap_ok = mean <= cap * (1.0 + 3.0 * rel);
            if !cap_ok {
                cap_violations.push(n);
            }
            let (mean_next, diff_mean, diff_stderr, is_flagged) = match (self.next.get(n), self.diff.get(n)) {
                (Some(nx), Some(df)) if df.count() > 0 => {
                    let f = df.mean() > d + 3.0 * df.stderr();
                    (nx.mean(), df.mean(), df.stderr(), f)
                }
                _ => (f64::NAN, f64::NAN, f64::NAN, false),
            };
            if is_flagged {
                flagged.push(n);
            }
            rows.push(DriftRow {
                n,
                count: s.count(),
                mean_nsq: mean,
                stderr_nsq: s.stderr(),
                mean_nsq_next: mean_next,
                diff_mean,
                diff_stderr,
                flagged: is_flagged,
                cap_ok,
            });
        }
        Ok(DriftReport {
            traces: self.traces,
            skipped_diverged: self.skipped_diverged,
            error_weight: self.error_weight,
            decay_rate: c,
            d,
            cap,
            max_mean_nsq,
            flagged,
            cap_violations,
            halving: self.halving,
            base_case_max_rel_err: self.base_case_max_rel_err,
            rows,
        })
    }
}

/// One index of a [`DriftReport`]. `diff_*` are NaN where no trace covers
/// `n + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    pub n: usize,
    pub count: u64,
    pub mean_nsq: f64,
    pub stderr_nsq: f64,
    pub mean_nsq_next: f64,
    /// Mean of `N_{n+1}² − (1 − c)·N_n²`.
    pub diff_mean: f64,
    pub diff_stderr: f64,
    pub flagged: bool,
    pub cap_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub traces: usize,
    pub skipped_diverged: usize,
    pub error_weight: f64,
    pub decay_rate: f64,
    pub d: f64,
    /// `D / c`.
    pub cap: f64,
    pub max_mean_nsq: f64,
    pub flagged: Vec<usize>,
    pub cap_violations: Vec<usize>,
    pub halving: HalvingReport,
    /// Largest `|N_0² − (1 + K)M0²| / ((1 + K)M0²)` seen.
    pub base_case_max_rel_err: f64,
    pub rows: Vec<DriftRow>,
}

impl DriftReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty() && self.cap_violations.is_empty() && self.halving.violations == 0
    }

    /// JSON with non-finite reals written as `null`.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(out);
        for row in &self.rows {
            wr.serialize(row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Drift statistics over a set of traces sharing `K` and `c`.
pub fn drift_estimate(traces: &[Trace], error_weight: f64, decay_rate: f64, d: f64) -> Result<DriftReport> {
    let mut acc = DriftAccumulator::new(error_weight, decay_rate);
    for t in traces {
        acc.push_trace(t);
    }
    acc.finish(d)
}
