//! Laws of the random gain `A` and disturbance `W`.
//!
//! | kind | parameters | mean | variance |
//! |---|---|---|---|
//! | gaussian | mean, stddev | mean | stddev² |
//! | uniform | lo, hi | (lo+hi)/2 | (hi−lo)²/12 |
//! | two_point | v1 w.p. p, else v2 | p·v1+(1−p)·v2 | p(1−p)(v1−v2)² |
//! | student_t | dof, scale, shift | shift (dof>1) | scale²·dof/(dof−2) (dof>2) |
//!
//! Absolute moments `E[(|Z| + s)^α]` are returned in closed form where one
//! exists (two-point, uniform, centered Gaussian and centered Student-t with
//! `s = 0`) and by double-exponential quadrature otherwise. Quadrature is
//! accurate to a relative tolerance of 1e-6.

use std::f64::consts::PI;
use std::fmt;

use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma, ln_gamma};

use crate::{Error, Result};

/// Relative accuracy promised by [`abs_moment`] on the quadrature route.
pub const QUADRATURE_RTOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistributionSpec {
    Gaussian { mean: f64, stddev: f64 },
    Uniform { lo: f64, hi: f64 },
    /// `v1` with probability `p`, otherwise `v2`.
    TwoPoint { v1: f64, p: f64, v2: f64 },
    /// `shift + scale * T` with `T` a standard Student-t with `dof` degrees
    /// of freedom.
    StudentT { dof: f64, scale: f64, shift: f64 },
}

impl DistributionSpec {
    pub fn gaussian(mean: f64, stddev: f64) -> Result<Self> {
        Self::Gaussian { mean, stddev }.validated()
    }

    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        Self::Uniform { lo, hi }.validated()
    }

    pub fn two_point(v1: f64, p: f64, v2: f64) -> Result<Self> {
        Self::TwoPoint { v1, p, v2 }.validated()
    }

    pub fn student_t(dof: f64, scale: f64, shift: f64) -> Result<Self> {
        Self::StudentT { dof, scale, shift }.validated()
    }

    /// Student-t law with `dof` degrees of freedom rescaled to the given mean
    /// and standard deviation (requires `dof > 2`).
    pub fn student_t_with_moments(dof: f64, mean: f64, stddev: f64) -> Result<Self> {
        if !(dof > 2.0) {
            return Err(Error::InvalidDistribution(format!(
                "student_t needs dof > 2 for a finite variance, got {dof}"
            )));
        }
        Self::student_t(dof, stddev * ((dof - 2.0) / dof).sqrt(), mean)
    }

    /// A law that is identically `value`.
    pub fn constant(value: f64) -> Self {
        Self::TwoPoint {
            v1: value,
            p: 1.0,
            v2: value,
        }
    }

    pub fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidDistribution(msg));
        let finite = |vals: &[f64]| vals.iter().all(|v| v.is_finite());
        match *self {
            Self::Gaussian { mean, stddev } => {
                if !finite(&[mean, stddev]) || !(stddev > 0.0) {
                    return bad(format!("gaussian needs finite mean and stddev > 0, got {self}"));
                }
            }
            Self::Uniform { lo, hi } => {
                if !finite(&[lo, hi]) || !(lo < hi) {
                    return bad(format!("uniform needs lo < hi, got {self}"));
                }
            }
            Self::TwoPoint { v1, p, v2 } => {
                if !finite(&[v1, v2]) || !(0.0..=1.0).contains(&p) {
                    return bad(format!("two_point needs 0 <= p <= 1, got {self}"));
                }
            }
            Self::StudentT { dof, scale, shift } => {
                if !finite(&[dof, scale, shift]) || !(dof > 0.0) || !(scale > 0.0) {
                    return bad(format!("student_t needs dof > 0 and scale > 0, got {self}"));
                }
            }
        }
        Ok(())
    }

    /// The same law translated to have mean zero.
    pub fn centered(&self) -> Result<Self> {
        let (mean, _) = moments(self)?;
        Ok(match *self {
            Self::Gaussian { stddev, .. } => Self::Gaussian { mean: 0.0, stddev },
            Self::Uniform { lo, hi } => Self::Uniform {
                lo: lo - mean,
                hi: hi - mean,
            },
            Self::TwoPoint { v1, p, v2 } => Self::TwoPoint {
                v1: v1 - mean,
                p,
                v2: v2 - mean,
            },
            Self::StudentT { dof, scale, .. } => Self::StudentT {
                dof,
                scale,
                shift: 0.0,
            },
        })
    }

    pub fn sampler(&self) -> Result<Sampler> {
        self.validate()?;
        let invalid = |e: &dyn fmt::Display| Error::InvalidDistribution(e.to_string());
        Ok(match *self {
            Self::Gaussian { mean, stddev } => {
                Sampler::Normal(rand_distr::Normal::new(mean, stddev).map_err(|e| invalid(&e))?)
            }
            Self::Uniform { lo, hi } => Sampler::Uniform(
                rand_distr::Uniform::new_inclusive(lo, hi).map_err(|e| invalid(&e))?,
            ),
            Self::TwoPoint { v1, p, v2 } => Sampler::TwoPoint { v1, p, v2 },
            Self::StudentT { dof, scale, shift } => Sampler::StudentT {
                t: rand_distr::StudentT::new(dof).map_err(|e| invalid(&e))?,
                scale,
                shift,
            },
        })
    }

    /// Probability density; `None` for the discrete two-point law.
    fn density(&self) -> Option<impl Fn(f64) -> f64> {
        let spec = *self;
        let norm = match spec {
            Self::Gaussian { stddev, .. } => 1.0 / (stddev * (2.0 * PI).sqrt()),
            Self::Uniform { lo, hi } => 1.0 / (hi - lo),
            Self::TwoPoint { .. } => return None,
            Self::StudentT { dof, scale, .. } => (ln_gamma((dof + 1.0) / 2.0)
                - ln_gamma(dof / 2.0)
                - 0.5 * (dof * PI).ln()
                - scale.ln())
            .exp(),
        };
        Some(move |x: f64| match spec {
            Self::Gaussian { mean, stddev } => {
                let z = (x - mean) / stddev;
                norm * (-0.5 * z * z).exp()
            }
            Self::Uniform { lo, hi } => {
                if (lo..=hi).contains(&x) {
                    norm
                } else {
                    0.0
                }
            }
            Self::StudentT { dof, scale, shift } => {
                let z = (x - shift) / scale;
                norm * (1.0 + z * z / dof).powf(-(dof + 1.0) / 2.0)
            }
            Self::TwoPoint { .. } => unreachable!(),
        })
    }

    /// Location and width used to lay out quadrature pieces.
    fn location_scale(&self) -> (f64, f64) {
        match *self {
            Self::Gaussian { mean, stddev } => (mean, stddev),
            Self::Uniform { lo, hi } => (0.5 * (lo + hi), hi - lo),
            Self::TwoPoint { v1, v2, .. } => (0.5 * (v1 + v2), (v1 - v2).abs().max(1.0)),
            Self::StudentT { scale, shift, .. } => (shift, scale),
        }
    }
}

impl fmt::Display for DistributionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Gaussian { mean, stddev } => write!(f, "gaussian(mean={mean}, stddev={stddev})"),
            Self::Uniform { lo, hi } => write!(f, "uniform(lo={lo}, hi={hi})"),
            Self::TwoPoint { v1, p, v2 } => write!(f, "two_point(v1={v1}, p={p}, v2={v2})"),
            Self::StudentT { dof, scale, shift } => {
                write!(f, "student_t(dof={dof}, scale={scale}, shift={shift})")
            }
        }
    }
}

/// A ready-to-draw form of a [`DistributionSpec`].
#[derive(Debug, Clone, Copy)]
pub enum Sampler {
    Normal(rand_distr::Normal<f64>),
    Uniform(rand_distr::Uniform<f64>),
    TwoPoint { v1: f64, p: f64, v2: f64 },
    StudentT { t: rand_distr::StudentT<f64>, scale: f64, shift: f64 },
}

impl Sampler {
    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Self::Normal(d) => d.sample(rng),
            Self::Uniform(d) => d.sample(rng),
            Self::TwoPoint { v1, p, v2 } => {
                // Always consume one uniform so degenerate laws keep streams aligned.
                if rng.random::<f64>() < *p {
                    *v1
                } else {
                    *v2
                }
            }
            Self::StudentT { t, scale, shift } => shift + scale * t.sample(rng),
        }
    }
}

/// One i.i.d. draw from `spec`.
pub fn sample<R: Rng + ?Sized>(spec: &DistributionSpec, rng: &mut R) -> Result<f64> {
    Ok(spec.sampler()?.sample(rng))
}

/// Exact mean and variance.
pub fn moments(spec: &DistributionSpec) -> Result<(f64, f64)> {
    spec.validate()?;
    Ok(match *spec {
        DistributionSpec::Gaussian { mean, stddev } => (mean, stddev * stddev),
        DistributionSpec::Uniform { lo, hi } => (0.5 * (lo + hi), (hi - lo).powi(2) / 12.0),
        DistributionSpec::TwoPoint { v1, p, v2 } => {
            (p * v1 + (1.0 - p) * v2, p * (1.0 - p) * (v1 - v2).powi(2))
        }
        DistributionSpec::StudentT { dof, scale, shift } => {
            if !(dof > 2.0) {
                return Err(Error::MomentUndefined(format!(
                    "student_t variance requires dof > 2, got dof = {dof}"
                )));
            }
            (shift, scale * scale * dof / (dof - 2.0))
        }
    })
}

/// Central moment `E[(Z − mean)^k]` for `k ∈ {2, 3, 4}`.
pub fn central_moment(spec: &DistributionSpec, k: u32) -> Result<f64> {
    let (_, var) = moments(spec)?;
    match (k, *spec) {
        (2, _) => Ok(var),
        (3, DistributionSpec::TwoPoint { v1, p, v2 }) => {
            Ok(p * (1.0 - p) * (1.0 - 2.0 * p) * (v1 - v2).powi(3))
        }
        (3, DistributionSpec::StudentT { dof, .. }) if dof <= 3.0 => Err(Error::MomentUndefined(
            format!("student_t third moment requires dof > 3, got dof = {dof}"),
        )),
        (3, _) => Ok(0.0),
        (4, DistributionSpec::Gaussian { stddev, .. }) => Ok(3.0 * stddev.powi(4)),
        (4, DistributionSpec::Uniform { lo, hi }) => Ok((hi - lo).powi(4) / 80.0),
        (4, DistributionSpec::TwoPoint { v1, p, v2 }) => {
            let q = 1.0 - p;
            Ok(p * q * (q.powi(3) + p.powi(3)) * (v1 - v2).powi(4))
        }
        (4, DistributionSpec::StudentT { dof, scale, .. }) => {
            if dof <= 4.0 {
                return Err(Error::MomentUndefined(format!(
                    "student_t fourth moment requires dof > 4, got dof = {dof}"
                )));
            }
            Ok(scale.powi(4) * 3.0 * dof * dof / ((dof - 2.0) * (dof - 4.0)))
        }
        _ => Err(Error::MomentUndefined(format!(
            "central moment of order {k} is not provided"
        ))),
    }
}

/// Raw moment `E[Z^k]` for `k ∈ {1, 2, 3, 4}`.
pub fn raw_moment(spec: &DistributionSpec, k: u32) -> Result<f64> {
    let (mu, var) = moments(spec)?;
    match k {
        1 => Ok(mu),
        2 => Ok(mu * mu + var),
        3 => Ok(mu.powi(3) + 3.0 * mu * var + central_moment(spec, 3)?),
        4 => Ok(mu.powi(4)
            + 6.0 * mu * mu * var
            + 4.0 * mu * central_moment(spec, 3)?
            + central_moment(spec, 4)?),
        _ => Err(Error::MomentUndefined(format!(
            "raw moment of order {k} is not provided"
        ))),
    }
}

fn check_abs_moment_args(spec: &DistributionSpec, alpha: f64, shift: f64) -> Result<()> {
    spec.validate()?;
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::MomentUndefined(format!(
            "absolute moment order must be positive and finite, got {alpha}"
        )));
    }
    if !(shift >= 0.0) || !shift.is_finite() {
        return Err(Error::MomentUndefined(format!(
            "shift must be finite and non-negative, got {shift}"
        )));
    }
    if let DistributionSpec::StudentT { dof, .. } = *spec {
        if alpha >= dof {
            return Err(Error::MomentUndefined(format!(
                "student_t has E|Z|^alpha only for alpha < dof; got alpha = {alpha}, dof = {dof}"
            )));
        }
    }
    Ok(())
}

/// `E[(|Z| + shift)^alpha]`.
pub fn abs_moment(spec: &DistributionSpec, alpha: f64, shift: f64) -> Result<f64> {
    check_abs_moment_args(spec, alpha, shift)?;
    if let Some(v) = abs_moment_closed_form(spec, alpha, shift) {
        return Ok(v);
    }
    abs_moment_quadrature(spec, alpha, shift)
}

fn abs_moment_closed_form(spec: &DistributionSpec, alpha: f64, shift: f64) -> Option<f64> {
    match *spec {
        DistributionSpec::TwoPoint { v1, p, v2 } => {
            Some(p * (v1.abs() + shift).powf(alpha) + (1.0 - p) * (v2.abs() + shift).powf(alpha))
        }
        DistributionSpec::Uniform { lo, hi } => {
            // Antiderivative of (u + s)^α in u = |x|, applied on each sign piece.
            let prim = |u: f64| (u + shift).powf(alpha + 1.0) / (alpha + 1.0);
            let total = if lo >= 0.0 {
                prim(hi) - prim(lo)
            } else if hi <= 0.0 {
                prim(-lo) - prim(-hi)
            } else {
                prim(-lo) + prim(hi) - 2.0 * prim(0.0)
            };
            Some(total / (hi - lo))
        }
        DistributionSpec::Gaussian { mean, stddev } if mean == 0.0 && shift == 0.0 => Some(
            stddev.powf(alpha) * 2f64.powf(alpha / 2.0) * gamma((alpha + 1.0) / 2.0) / PI.sqrt(),
        ),
        DistributionSpec::StudentT { dof, scale, shift: loc } if loc == 0.0 && shift == 0.0 => {
            let log = alpha * scale.ln() + 0.5 * alpha * dof.ln() + ln_gamma((alpha + 1.0) / 2.0)
                + ln_gamma((dof - alpha) / 2.0)
                - 0.5 * PI.ln()
                - ln_gamma(dof / 2.0);
            Some(log.exp())
        }
        _ => None,
    }
}

/// Quadrature route for `E[(|Z| + shift)^alpha]`, bypassing closed forms.
///
/// The real line is cut at 0 (kink of `|x|`) and at the law's location; the
/// two half-lines are mapped onto `[0, 1)` by `x = p ± w·t/(1−t)`. Two-point
/// laws have no density and are summed directly.
pub fn abs_moment_quadrature(spec: &DistributionSpec, alpha: f64, shift: f64) -> Result<f64> {
    check_abs_moment_args(spec, alpha, shift)?;
    let Some(pdf) = spec.density() else {
        return Ok(abs_moment_closed_form(spec, alpha, shift).expect("two-point is closed form"));
    };
    let (loc, width) = spec.location_scale();
    let g = |x: f64| (x.abs() + shift).powf(alpha) * pdf(x);
    // Target well below the promised tolerance; the integrator stops early
    // once its own error estimate gets there.
    let magnitude = (loc.abs() + width + shift).powf(alpha).max(f64::MIN_POSITIVE);
    let target = magnitude * QUADRATURE_RTOL * 1e-4;

    let (lo_cut, hi_cut) = if loc < 0.0 { (loc, 0.0) } else { (0.0, loc) };
    let integrate = |f: &dyn Fn(f64) -> f64, a: f64, b: f64| {
        quadrature::double_exponential::integrate(f, a, b, target).integral
    };

    let mut total = 0.0;
    if let DistributionSpec::Uniform { lo, hi } = *spec {
        if lo < 0.0 && hi > 0.0 {
            total += integrate(&g, lo, 0.0) + integrate(&g, 0.0, hi);
        } else {
            total += integrate(&g, lo, hi);
        }
        return Ok(total);
    }
    if hi_cut > lo_cut {
        total += integrate(&g, lo_cut, hi_cut);
    }
    let right = |t: f64| {
        let one_minus = 1.0 - t;
        g(hi_cut + width * t / one_minus) * width / (one_minus * one_minus)
    };
    let left = |t: f64| {
        let one_minus = 1.0 - t;
        g(lo_cut - width * t / one_minus) * width / (one_minus * one_minus)
    };
    total += integrate(&right, 0.0, 1.0);
    total += integrate(&left, 0.0, 1.0);
    Ok(total)
}

/// Mean, standard deviation and the two `alpha`-th absolute moments of a law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentSummary {
    pub mean: f64,
    pub stddev: f64,
    /// `E[|Z|^alpha]`.
    pub abs_moment_alpha: f64,
    /// `E[(|Z| + |mean|)^alpha]`.
    pub shifted_abs_moment_alpha: f64,
    pub alpha: f64,
}

impl MomentSummary {
    pub fn of(spec: &DistributionSpec, alpha: f64) -> Result<Self> {
        let (mean, var) = moments(spec)?;
        Ok(Self {
            mean,
            stddev: var.sqrt(),
            abs_moment_alpha: abs_moment(spec, alpha, 0.0)?,
            shifted_abs_moment_alpha: abs_moment(spec, alpha, mean.abs())?,
            alpha,
        })
    }

    pub fn variance(&self) -> f64 {
        self.stddev * self.stddev
    }
}

/// Gain moment term `m_α = max(2, E[(|A| + |μ_A|)^α])`.
pub fn gain_tail_moment(a: &MomentSummary) -> f64 {
    a.shifted_abs_moment_alpha.max(2.0)
}

/// Disturbance moment term `ℓ_α = E[|W − μ_W|^α]`.
///
/// The loop recenters `W` by adding `μ_W` to every action, so the centered
/// law is what reaches the state.
pub fn disturbance_tail_moment(w: &DistributionSpec, alpha: f64) -> Result<f64> {
    abs_moment(&w.centered()?, alpha, 0.0)
}
