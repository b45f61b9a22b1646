//! Streaming sample statistics.

use serde::{Deserialize, Serialize};

/// Welford accumulator for count, mean and sum of squared deviations.
///
/// `merge` uses the pairwise update of Chan et al., so folding partial
/// accumulators in a fixed order gives a result independent of how the
/// samples were split across workers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, value: f64) {
        self.count += 1;
        let delta = value - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (value - self.mean);
    }

    pub fn merge(&mut self, other: &RunningStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let total = self.count + other.count;
        let delta = other.mean - self.mean;
        let weight = other.count as f64 / total as f64;
        self.mean += delta * weight;
        self.m2 += other.m2 + delta * delta * self.count as f64 * weight;
        self.count = total;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Sample mean; NaN when empty.
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.mean
        }
    }

    /// Unbiased sample variance; zero for fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn stderr(&self) -> f64 {
        if self.count == 0 {
            return f64::NAN;
        }
        (self.variance() / self.count as f64).sqrt()
    }
}

/// Element-wise merge of two per-index accumulator vectors; `into` grows as
/// needed.
pub fn merge_series(into: &mut Vec<RunningStats>, from: &[RunningStats]) {
    if into.len() < from.len() {
        into.resize(from.len(), RunningStats::default());
    }
    for (dst, src) in into.iter_mut().zip(from) {
        dst.merge(src);
    }
}
