//! Feasibility of the strategy constants and the tail bound `ε(P, M0)`.
//!
//! With `x = P·δ` the drift inequality reads
//!
//! ```text
//! σ_A² + (2|μ_A| + σ_A)·2x + (2 + K)·x² ≤ 1 − c
//! ```
//!
//! and the weight on the error tracker must satisfy `(1 − c)·K ≥ μ_A²`.
//! The tail contribution `ε` adds to the contraction rate, so a usable
//! `(P, L)` pair also needs `c + ε < min(1 − σ_A², 3/4)`.

use serde::{Deserialize, Serialize};

use crate::codec::{self, StrategyParams};
use crate::control::SystemSpec;
use crate::stochastic::{self, MomentSummary};
use crate::{Error, Result};

/// Explicit constants of the tail bound for one `(α, M0, m_α, ℓ_α)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonConstants {
    /// `(1 − 2^{−1/α})^{−α}`: geometric weights in the `L_α` triangle
    /// inequality over infinitely many terms.
    pub c_alpha: f64,
    /// `2^α·max(2^α, C(α))`.
    pub c1: f64,
    /// `C1·max(2, m_α, ℓ_α)`. Each term of the tail series carries one
    /// moment factor, which is at most the largest of `m_α` and `ℓ_α`.
    pub c2: f64,
    /// `C2·(1 + M0^{−α})`.
    pub c3: f64,
    /// `8·C3`.
    pub c4: f64,
}

impl EpsilonConstants {
    pub fn new(alpha: f64, m0: f64, m_alpha: f64, ell_alpha: f64) -> Self {
        let c_alpha = (1.0 - 2f64.powf(-1.0 / alpha)).powf(-alpha);
        let c1 = 2f64.powf(alpha) * 2f64.powf(alpha).max(c_alpha);
        let c2 = c1 * m_alpha.max(ell_alpha).max(2.0);
        let c3 = c2 * (1.0 + m0.powf(-alpha));
        Self {
            c_alpha,
            c1,
            c2,
            c3,
            c4: 8.0 * c3,
        }
    }
}

/// Ratio `4·P^{2−α}·M0^{−α}·m_α` of the tail series.
pub fn tail_ratio(p: f64, m0: f64, alpha: f64, m_alpha: f64) -> f64 {
    4.0 * p.powf(2.0 - alpha) * m0.powf(-alpha) * m_alpha
}

/// `C4·P^{4−α}·m_α / (1 − 4·P^{2−α}·M0^{−α}·m_α)`.
///
/// Strictly decreasing in `P` and tends to 0 as `P → ∞`.
pub fn epsilon_bound(p: f64, m0: f64, alpha: f64, m_alpha: f64, ell_alpha: f64) -> Result<f64> {
    if !(alpha > 4.0) {
        return Err(Error::AlphaTooSmall { alpha });
    }
    if !(p > 1.0 && m0 > 0.0) {
        return Err(Error::InvalidParams(format!("need P > 1 and M0 > 0, got P={p}, M0={m0}")));
    }
    let ratio = tail_ratio(p, m0, alpha, m_alpha);
    if !(ratio < 1.0) {
        return Err(Error::TailSeriesDiverges { ratio });
    }
    let k = EpsilonConstants::new(alpha, m0, m_alpha, ell_alpha);
    Ok(k.c4 * p.powf(4.0 - alpha) * m_alpha / (1.0 - ratio))
}

/// Tail moments of the system at `alpha`: `m_α = max(2, E(|A| + |μ_A|)^α)`
/// and `ℓ_α = E|W − μ_W|^α`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailMoments {
    pub alpha: f64,
    pub m_alpha: f64,
    pub ell_alpha: f64,
}

impl TailMoments {
    pub fn of(system: &SystemSpec, alpha: f64) -> Result<Self> {
        if !(alpha > 4.0) {
            return Err(Error::AlphaTooSmall { alpha });
        }
        let a = MomentSummary::of(&system.a, alpha)?;
        Ok(Self {
            alpha,
            m_alpha: stochastic::gain_tail_moment(&a),
            ell_alpha: stochastic::disturbance_tail_moment(&system.w, alpha)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub ok: bool,
    /// `(1 − c) − [σ_A² + (2|μ_A| + σ_A)(2Pδ) + (2 + K)P²δ²]`.
    pub margin_drift: f64,
    /// Same with `1 − c − ε` on the right: room left once the tail term is
    /// charged to the contraction.
    pub margin_drift_strict: f64,
    /// `(1 − c)K − μ_A²`.
    pub margin_k: f64,
    /// Drift margin with signed `μ_A` in the coefficient.
    pub margin_drift_literal: f64,
    /// `(1 − c)K − μ_A`.
    pub margin_k_literal: f64,
    /// `ε(P, M0)`; infinite when the tail series does not converge.
    pub epsilon_estimate: f64,
    pub tail_ratio: f64,
    /// `min(1 − σ_A², 3/4)`.
    pub contraction_cap: f64,
    /// `2σ_W² + (1 + K)M0²`.
    #[serde(rename = "D")]
    pub d: f64,
    /// `D / c`.
    #[serde(rename = "C")]
    pub c_bound: f64,
    #[serde(rename = "R")]
    pub rate: u32,
    pub decay_rate: f64,
    pub m_alpha: f64,
    pub ell_alpha: f64,
    pub alpha: f64,
}

fn drift_coefficient(mu_a: f64, sigma_a: f64, k: f64, x: f64) -> f64 {
    sigma_a * sigma_a + (2.0 * mu_a + sigma_a) * (2.0 * x) + (2.0 + k) * x * x
}

/// Evaluates every condition on the constants.
///
/// `a` and `w` are the moment summaries of `A` and of `W`; only the mean
/// and standard deviation are read from them. Tail moments come from `tail`.
pub fn feasibility(
    params: &StrategyParams,
    a: &MomentSummary,
    w: &MomentSummary,
    tail: &TailMoments,
) -> Result<FeasibilityReport> {
    if !(tail.alpha > 4.0) {
        return Err(Error::AlphaTooSmall { alpha: tail.alpha });
    }
    let var_a = a.variance();
    if var_a >= 1.0 {
        return Err(Error::Unstabilizable { variance: var_a });
    }
    let c = params.decay_rate;
    let k = params.error_weight;
    let m0 = params.range_floor;
    let x = params.zoom * params.delta();
    let ratio = tail_ratio(params.zoom, m0, tail.alpha, tail.m_alpha);
    let epsilon = match epsilon_bound(params.zoom, m0, tail.alpha, tail.m_alpha, tail.ell_alpha) {
        Ok(e) => e,
        Err(Error::TailSeriesDiverges { .. }) => f64::INFINITY,
        Err(e) => return Err(e),
    };
    let coeff = drift_coefficient(a.mean.abs(), a.stddev, k, x);
    let margin_drift = (1.0 - c) - coeff;
    let margin_k = (1.0 - c) * k - a.mean * a.mean;
    let cap = (1.0 - var_a).min(0.75);
    let d = 2.0 * w.variance() + (1.0 + k) * m0 * m0;
    Ok(FeasibilityReport {
        ok: margin_drift >= 0.0 && margin_k >= 0.0 && c + epsilon < cap,
        margin_drift,
        margin_drift_strict: margin_drift - epsilon,
        margin_k,
        margin_drift_literal: (1.0 - c) - drift_coefficient(a.mean, a.stddev, k, x),
        margin_k_literal: (1.0 - c) * k - a.mean,
        epsilon_estimate: epsilon,
        tail_ratio: ratio,
        contraction_cap: cap,
        d,
        c_bound: d / c,
        rate: codec::rate(params),
        decay_rate: c,
        m_alpha: tail.m_alpha,
        ell_alpha: tail.ell_alpha,
        alpha: tail.alpha,
    })
}

/// [`feasibility`] with all moments computed from the system.
pub fn feasibility_for(system: &SystemSpec, params: &StrategyParams, alpha: f64) -> Result<FeasibilityReport> {
    let (_, var_a) = stochastic::moments(&system.a)?;
    if var_a >= 1.0 {
        return Err(Error::Unstabilizable { variance: var_a });
    }
    let tail = TailMoments::of(system, alpha)?;
    let a = MomentSummary::of(&system.a, alpha)?;
    let w = MomentSummary::of(&system.w.centered()?, alpha)?;
    feasibility(params, &a, &w, &tail)
}

/// Smallest `P` (to relative precision `1e-12`) with `ε(P, M0) < target`.
pub fn find_zoom(target: f64, m0: f64, tail: &TailMoments) -> Result<f64> {
    if !(target > 0.0) {
        return Err(Error::InvalidParams(format!("target must be > 0, got {target}")));
    }
    let below = |p: f64| -> Result<bool> {
        match epsilon_bound(p, m0, tail.alpha, tail.m_alpha, tail.ell_alpha) {
            Ok(e) => Ok(e < target),
            Err(Error::TailSeriesDiverges { .. }) => Ok(false),
            Err(e) => Err(e),
        }
    };
    let mut lo = 1.0f64;
    let mut hi = 2.0f64;
    while !below(hi)? {
        lo = hi;
        hi *= hi;
        if !hi.is_finite() {
            return Err(Error::InvalidParams(format!("no finite P reaches epsilon < {target}")));
        }
    }
    // Bisect in log space; the bound is monotone in P.
    while hi / lo - 1.0 > 1e-12 {
        let mid = (lo.ln() + 0.5 * (hi.ln() - lo.ln())).exp().clamp(lo, hi);
        if mid == lo || mid == hi {
            break;
        }
        if below(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Largest `x = P·δ` with drift coefficient `≤ budget`: the positive root of
/// `(2 + K)x² + 2(2|μ_A| + σ_A)x + σ_A² − budget`.
pub fn max_step_ratio(mu_a: f64, sigma_a: f64, k: f64, budget: f64) -> Result<f64> {
    let qa = 2.0 + k;
    let qb = 2.0 * (2.0 * mu_a.abs() + sigma_a);
    let qc = sigma_a * sigma_a - budget;
    if !(qc < 0.0) {
        return Err(Error::InvalidParams(format!(
            "sigma_A^2 = {} leaves no drift budget (budget {budget})",
            sigma_a * sigma_a
        )));
    }
    // Stable form of the positive root.
    Ok(-2.0 * qc / (qb + (qb * qb - 4.0 * qa * qc).sqrt()))
}

/// Smallest `L` whose drift coefficient at zoom `p` fits in `budget`.
pub fn min_levels(p: f64, mu_a: f64, sigma_a: f64, k: f64, budget: f64) -> Result<u128> {
    let x = max_step_ratio(mu_a, sigma_a, k, budget)?;
    let ok = |l: u128| drift_coefficient(mu_a.abs(), sigma_a, k, p * (1.0 / l as f64)) <= budget;
    let mut l = (p / x).ceil().max(1.0);
    if l >= StrategyParams::MAX_LEVELS as f64 {
        return Err(Error::InvalidParams(format!("required L = {l:e} exceeds the symbol width")));
    }
    let mut levels = l as u128;
    // Rounding in the root can leave the coefficient a hair over budget.
    while !ok(levels) {
        l = (levels as f64 * (1.0 + 1e-12)).ceil().max(levels as f64 + 1.0);
        levels = l as u128;
    }
    Ok(levels)
}

/// Constants found by [`search_feasible`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibleParams {
    pub params: StrategyParams,
    pub report: FeasibilityReport,
}

/// Picks `P` from the tail bound, then the smallest `L` that leaves the
/// drift inequality satisfied with `ε` charged against it.
pub fn search_feasible(
    system: &SystemSpec,
    alpha: f64,
    decay_rate: f64,
    error_weight: f64,
    range_floor: f64,
    epsilon_target: f64,
) -> Result<FeasibleParams> {
    let tail = TailMoments::of(system, alpha)?;
    let (mu_a, var_a) = stochastic::moments(&system.a)?;
    if var_a >= 1.0 {
        return Err(Error::Unstabilizable { variance: var_a });
    }
    let zoom = find_zoom(epsilon_target, range_floor, &tail)?;
    let epsilon = epsilon_bound(zoom, range_floor, alpha, tail.m_alpha, tail.ell_alpha)?;
    let levels = min_levels(zoom, mu_a, var_a.sqrt(), error_weight, 1.0 - decay_rate - epsilon)?;
    let mut params = StrategyParams::new(levels, zoom, range_floor, error_weight, decay_rate)?;
    let mut report = feasibility_for(system, &params, alpha)?;
    // The report subtracts in a different order; settle any last-ulp deficit.
    while report.margin_drift_strict < 0.0 {
        let bumped = (params.levels as f64 * (1.0 + 1e-12)).ceil() as u128;
        params = StrategyParams::new(bumped.max(params.levels + 1), zoom, range_floor, error_weight, decay_rate)?;
        report = feasibility_for(system, &params, alpha)?;
    }
    Ok(FeasibleParams { params, report })
}
