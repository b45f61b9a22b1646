//! Exact second and fourth moments of `X_n` for the two uncoded baselines.
//!
//! Both baselines leave a linear recursion `X_{n+1} = A' X_n + W'` with
//! `W' = W − μ_W` centered and `A' = A` (zero control) or `A − μ_A`
//! (perfect observation). Since `X_0 = 0`, `E X_n = 0` for all `n`, and
//! independence gives
//!
//! ```text
//! E X²_{n+1} = E A'²·E X²_n + σ_W²
//! E X⁴_{n+1} = E A'⁴·E X⁴_n + 6·E A'²·σ_W²·E X²_n + E W'⁴
//! ```
//!
//! The fourth moment yields the exact variance of `X_n²`, hence the exact
//! standard error of an ensemble mean.

use serde::{Deserialize, Serialize};

use crate::control::SystemSpec;
use crate::stochastic;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OraclePolicy {
    ZeroControl,
    PerfectObservation,
}

/// `E X_n²` from the mean and variance of `A` and the variance of `W`.
pub fn moment_recursion_oracle(policy: OraclePolicy, a_moments: (f64, f64), w_moments: (f64, f64), n: usize) -> f64 {
    moment_recursion_curve(policy, a_moments, w_moments, n)[n]
}

/// `E X_k²` for `k = 0..=n`.
pub fn moment_recursion_curve(policy: OraclePolicy, a_moments: (f64, f64), w_moments: (f64, f64), n: usize) -> Vec<f64> {
    let (mu_a, var_a) = a_moments;
    let gain = match policy {
        OraclePolicy::ZeroControl => mu_a * mu_a + var_a,
        OraclePolicy::PerfectObservation => var_a,
    };
    let mut e = vec![0.0; n + 1];
    for k in 0..n {
        e[k + 1] = gain * e[k] + w_moments.1;
    }
    e
}

/// Fixed point `σ_W² / (1 − σ_A²)` of the perfect-observation recursion.
pub fn perfect_observation_plateau(var_a: f64, var_w: f64) -> f64 {
    var_w / (1.0 - var_a)
}

/// Exact `E X_k²` and `Var X_k²` for `k = 0..=n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareMoments {
    pub second: Vec<f64>,
    pub fourth: Vec<f64>,
}

impl SquareMoments {
    pub fn variance_of_square(&self, k: usize) -> f64 {
        self.fourth[k] - self.second[k] * self.second[k]
    }

    /// Standard error of the mean of `X_k²` over `trials` samples.
    pub fn stderr(&self, k: usize, trials: u64) -> f64 {
        (self.variance_of_square(k).max(0.0) / trials as f64).sqrt()
    }
}

pub fn square_moments(policy: OraclePolicy, system: &SystemSpec, n: usize) -> Result<SquareMoments> {
    let (mu_a, var_a) = stochastic::moments(&system.a)?;
    let (_, var_w) = stochastic::moments(&system.w)?;
    let w4 = stochastic::central_moment(&system.w, 4)?;
    let (a2, a4) = match policy {
        OraclePolicy::ZeroControl => (mu_a * mu_a + var_a, stochastic::raw_moment(&system.a, 4)?),
        OraclePolicy::PerfectObservation => (var_a, stochastic::central_moment(&system.a, 4)?),
    };
    let mut second = vec![0.0; n + 1];
    let mut fourth = vec![0.0; n + 1];
    for k in 0..n {
        second[k + 1] = a2 * second[k] + var_w;
        fourth[k + 1] = a4 * fourth[k] + 6.0 * a2 * var_w * second[k] + w4;
    }
    Ok(SquareMoments { second, fourth })
}
