//! Closed-loop encoder / controller / plant and full trials.
//!
//! One step at time `n`:
//!
//! 1. the encoder sees `X_n` and sends a codeword (or nothing, for the
//!    uncoded baselines);
//! 2. the controller decodes the wire bytes and applies `U_n`;
//! 3. `A_n` then `W_n` are drawn and `X_{n+1} = A_n X_n + W_n − U_n`.
//!
//! Encoder and controller each keep their own [`TrackerState`]. The
//! controller only ever sees the wire bytes, so any disagreement between the
//! two is a real protocol bug and is recorded on the trace.

use std::fmt;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, Codeword, Partition, StrategyParams, Symbol};
use crate::stochastic::{self, DistributionSpec, Sampler};
use crate::{Error, Result};

/// States beyond this magnitude end the trial.
pub const DIVERGENCE_THRESHOLD: f64 = 1e150;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Normal,
    Emergency,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Normal => "normal",
            Mode::Emergency => "emergency",
        })
    }
}

/// Common-knowledge quantities after `step` steps (so after time index
/// `step − 1`).
///
/// `range ≥ error_bound ≥ M0` always holds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerState {
    pub mode: Mode,
    /// `M_n`.
    pub range: f64,
    /// `I_n`.
    pub error_bound: f64,
    /// `ρ_n`.
    pub sign: i8,
    pub step: u64,
}

impl TrackerState {
    /// State before the first step: `M = I = M0`, `ρ = +1`.
    pub fn initial(params: &StrategyParams) -> Self {
        Self {
            mode: Mode::Normal,
            range: params.range_floor,
            error_bound: params.range_floor,
            sign: 1,
            step: 0,
        }
    }

    /// Exact equality, comparing reals by bit pattern.
    pub fn bit_eq(&self, other: &TrackerState) -> bool {
        self.mode == other.mode
            && self.range.to_bits() == other.range.to_bits()
            && self.error_bound.to_bits() == other.error_bound.to_bits()
            && self.sign == other.sign
            && self.step == other.step
    }

    fn normal(update: codec::TrackerUpdate, step: u64) -> Self {
        Self {
            mode: Mode::Normal,
            range: update.range,
            error_bound: update.error_bound,
            sign: update.sign,
            step,
        }
    }

    fn next_step(&self) -> u64 {
        self.step + 1
    }
}

/// Which closed loop a trial runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    /// Zoom-in / zoom-out quantizer.
    #[default]
    AdaptiveFixedRate,
    /// Same codebook on the fixed interval `[-range, range]`. States outside
    /// it send the emergency codeword and the controller idles.
    StaticQuantizer { range: f64 },
    /// Controller sees `X_n` exactly: `U = μ_A X + μ_W`.
    PerfectObservation,
    /// `U = μ_W`.
    ZeroControl,
}

impl PolicyKind {
    /// Static quantizer with the default range `10·M0`.
    pub fn static_default(params: &StrategyParams) -> Self {
        PolicyKind::StaticQuantizer {
            range: 10.0 * params.range_floor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let PolicyKind::StaticQuantizer { range } = self {
            if !(*range > 0.0 && range.is_finite()) {
                return Err(Error::InvalidParams(format!("static quantizer range must be > 0, got {range}")));
            }
        }
        Ok(())
    }

    pub fn uses_channel(&self) -> bool {
        matches!(self, PolicyKind::AdaptiveFixedRate | PolicyKind::StaticQuantizer { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::AdaptiveFixedRate => "adaptive_fixed_rate",
            PolicyKind::StaticQuantizer { .. } => "static_quantizer",
            PolicyKind::PerfectObservation => "perfect_observation",
            PolicyKind::ZeroControl => "zero_control",
        }
    }

    /// Normal-mode partition for a pre-step tracker.
    fn partition(&self, tracker: &TrackerState, params: &StrategyParams) -> Option<Partition> {
        match *self {
            PolicyKind::AdaptiveFixedRate => Some(params.partition(tracker.range)),
            PolicyKind::StaticQuantizer { range } => Some(Partition::new(range, params.levels)),
            _ => None,
        }
    }

    fn emergency_tracker(&self, tracker: &TrackerState, params: &StrategyParams) -> TrackerState {
        let range = match self {
            PolicyKind::AdaptiveFixedRate => params.zoom * tracker.range,
            _ => tracker.range,
        };
        TrackerState {
            mode: Mode::Emergency,
            range,
            step: tracker.next_step(),
            ..*tracker
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyKind::StaticQuantizer { range } => write!(f, "static_quantizer(range={range})"),
            other => f.write_str(other.name()),
        }
    }
}

/// Encoder decision for the adaptive scheme.
///
/// `|x| ≤ P·M_prev` is quantized normally; anything larger sends the
/// emergency codeword and zooms out by `P`.
pub fn encoder_step(x: f64, tracker: &TrackerState, params: &StrategyParams) -> Result<(Codeword, TrackerState)> {
    policy_encoder_step(&PolicyKind::AdaptiveFixedRate, x, tracker, params)
}

/// [`encoder_step`] for any channel policy.
pub fn policy_encoder_step(
    policy: &PolicyKind,
    x: f64,
    tracker: &TrackerState,
    params: &StrategyParams,
) -> Result<(Codeword, TrackerState)> {
    if !x.is_finite() {
        return Err(Error::Diverged {
            step: tracker.step,
            magnitude: x.abs(),
        });
    }
    let part = policy
        .partition(tracker, params)
        .ok_or_else(|| Error::InvalidParams(format!("{policy} has no encoder")))?;
    if part.contains(x) {
        let cw = part.encode(x)?;
        let cell = part.cell(cw.0)?;
        let next = TrackerState::normal(cell.tracker(params.range_floor), tracker.next_step());
        Ok((cw, next))
    } else {
        Ok((Codeword(params.emergency_symbol()), policy.emergency_tracker(tracker, params)))
    }
}

/// Controller action for a received adaptive-scheme codeword.
///
/// Normal symbols give `U = ρ μ_A (M − I) + μ_W`; the emergency codeword
/// gives `U = μ_W` and `M ← P·M_prev`.
pub fn controller_step(
    cw: Codeword,
    tracker: &TrackerState,
    mu_a: f64,
    mu_w: f64,
    params: &StrategyParams,
) -> Result<(f64, TrackerState)> {
    policy_controller_step(&PolicyKind::AdaptiveFixedRate, cw, tracker, mu_a, mu_w, params)
}

/// [`controller_step`] for any channel policy.
pub fn policy_controller_step(
    policy: &PolicyKind,
    cw: Codeword,
    tracker: &TrackerState,
    mu_a: f64,
    mu_w: f64,
    params: &StrategyParams,
) -> Result<(f64, TrackerState)> {
    if cw.0 > params.emergency_symbol() {
        return Err(Error::Protocol(format!(
            "symbol {} outside codebook of {} symbols",
            cw.0,
            params.num_symbols()
        )));
    }
    if cw.is_emergency(params) {
        return Ok((mu_w, policy.emergency_tracker(tracker, params)));
    }
    let part = policy
        .partition(tracker, params)
        .ok_or_else(|| Error::InvalidParams(format!("{policy} has no decoder")))?;
    let next = TrackerState::normal(part.cell(cw.0)?.tracker(params.range_floor), tracker.next_step());
    let u = f64::from(next.sign) * mu_a * (next.range - next.error_bound) + mu_w;
    Ok((u, next))
}

/// `A x + W − U`.
#[inline]
pub fn plant_step(x: f64, u: f64, a_draw: f64, w_draw: f64) -> f64 {
    a_draw * x + w_draw - u
}

/// The laws of `A` and `W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub a: DistributionSpec,
    pub w: DistributionSpec,
}

impl SystemSpec {
    pub fn new(a: DistributionSpec, w: DistributionSpec) -> Self {
        Self { a, w }
    }

    /// `A ~ N(1, 0.5²)`, `W ~ N(0, 1)`.
    pub fn reference() -> Self {
        Self::new(
            DistributionSpec::Gaussian { mean: 1.0, stddev: 0.5 },
            DistributionSpec::Gaussian { mean: 0.0, stddev: 1.0 },
        )
    }
}

/// Samplers and means of a [`SystemSpec`], built once per ensemble.
#[derive(Debug, Clone)]
pub struct Plant {
    pub spec: SystemSpec,
    pub mu_a: f64,
    pub mu_w: f64,
    a: Sampler,
    w: Sampler,
}

impl Plant {
    pub fn new(spec: &SystemSpec) -> Result<Self> {
        let (mu_a, _) = stochastic::moments(&spec.a)?;
        let (mu_w, _) = stochastic::moments(&spec.w)?;
        Ok(Self {
            spec: spec.clone(),
            mu_a,
            mu_w,
            a: spec.a.sampler()?,
            w: spec.w.sampler()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub n: u64,
    #[serde(rename = "X")]
    pub x: f64,
    pub symbol: Option<Symbol>,
    pub mode: Mode,
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "I")]
    pub i: f64,
    pub rho: i8,
    #[serde(rename = "U")]
    pub u: f64,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "W")]
    pub w: f64,
    pub round_id: u64,
}

impl TraceRow {
    pub fn tracker(&self) -> TrackerState {
        TrackerState {
            mode: self.mode,
            range: self.m,
            error_bound: self.i,
            sign: self.rho,
            step: self.n + 1,
        }
    }
}

pub const TRACE_HEADER: [&str; 11] = ["n", "X", "symbol", "mode", "M", "I", "rho", "U", "A", "W", "round_id"];

/// One closed-loop trial.
///
/// `rows[n]` holds `X_n`, what was sent and done at step `n`, the tracker
/// after step `n`, and the draws `A_n`, `W_n` that produce `X_{n+1}`. A
/// complete trial of horizon `H` has rows `0..=H`; a diverged one stops at
/// the last step whose successor state is still recorded nowhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
    pub params: StrategyParams,
    pub policy: PolicyKind,
    pub system: SystemSpec,
    pub seed: u64,
    pub horizon: u64,
    pub diverged: bool,
    /// First step at which encoder and controller trackers differed.
    pub tracker_mismatch: Option<u64>,
}

/// Headline numbers of a trace, for JSON output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub seed: u64,
    pub policy: PolicyKind,
    pub params: StrategyParams,
    pub system: SystemSpec,
    pub horizon: u64,
    pub steps: usize,
    pub diverged: bool,
    pub tracker_mismatch: Option<u64>,
    pub final_x: f64,
    pub max_abs_x: f64,
    pub mean_x_squared: f64,
    pub emergency_steps: usize,
    pub rounds: u64,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn emergency_steps(&self) -> usize {
        self.rows.iter().filter(|r| r.mode == Mode::Emergency).count()
    }

    pub fn summary(&self) -> TraceSummary {
        let n = self.rows.len().max(1) as f64;
        TraceSummary {
            seed: self.seed,
            policy: self.policy,
            params: self.params,
            system: self.system.clone(),
            horizon: self.horizon,
            steps: self.rows.len(),
            diverged: self.diverged,
            tracker_mismatch: self.tracker_mismatch,
            final_x: self.rows.last().map_or(0.0, |r| r.x),
            max_abs_x: self.rows.iter().fold(0.0, |m, r| m.max(r.x.abs())),
            mean_x_squared: self.rows.iter().map(|r| r.x * r.x).sum::<f64>() / n,
            emergency_steps: self.emergency_steps(),
            rounds: self.rows.last().map_or(0, |r| r.round_id + 1),
        }
    }

    /// CSV with header `n,X,symbol,mode,M,I,rho,U,A,W,round_id`. Reals use
    /// shortest round-trip formatting so [`read_trace_csv`] restores them
    /// bit for bit.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(out);
        for row in &self.rows {
            wr.serialize(row)?;
        }
        if self.rows.is_empty() {
            wr.write_record(TRACE_HEADER)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Rows of a trace CSV written by [`Trace::write_csv`]. Lines starting with
/// `#` are skipped.
pub fn read_trace_csv<R: Read>(input: R) -> Result<Vec<TraceRow>> {
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_owned).collect();
    if header != TRACE_HEADER {
        return Err(Error::Protocol(format!("unexpected trace header {header:?}")));
    }
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Adaptive-scheme trial with a fresh [`Plant`].
pub fn run_trial(
    a: &DistributionSpec,
    w: &DistributionSpec,
    params: &StrategyParams,
    horizon: u64,
    seed: u64,
) -> Result<Trace> {
    let plant = Plant::new(&SystemSpec::new(*a, *w))?;
    run_policy_trial(&plant, params, &PolicyKind::AdaptiveFixedRate, horizon, seed)
}

/// Runs `horizon + 1` steps of `policy`, seeding ChaCha8 with `seed`.
///
/// Parameters are not required to be feasible; infeasible ones are how the
/// failure baselines are produced.
pub fn run_policy_trial(
    plant: &Plant,
    params: &StrategyParams,
    policy: &PolicyKind,
    horizon: u64,
    seed: u64,
) -> Result<Trace> {
    params.validate()?;
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wire_len = codec::wire_len(codec::rate(params));
    let mut rows = Vec::with_capacity(horizon as usize + 1);
    let mut enc = TrackerState::initial(params);
    let mut ctl = enc;
    let mut x = 0.0;
    let mut round_id = 0u64;
    let mut diverged = false;
    let mut tracker_mismatch = None;

    for n in 0..=horizon {
        let (symbol, u, tracker) = match policy {
            PolicyKind::AdaptiveFixedRate | PolicyKind::StaticQuantizer { .. } => {
                let (cw, next_enc) = policy_encoder_step(policy, x, &enc, params)?;
                let bytes = cw.0.to_le_bytes();
                let received = codec::from_wire(&bytes[..wire_len], params)?;
                let (u, next_ctl) = policy_controller_step(policy, received, &ctl, plant.mu_a, plant.mu_w, params)?;
                if tracker_mismatch.is_none() && !next_enc.bit_eq(&next_ctl) {
                    tracker_mismatch = Some(n);
                }
                enc = next_enc;
                ctl = next_ctl;
                (Some(cw.0), u, ctl)
            }
            PolicyKind::PerfectObservation => (None, plant.mu_a * x + plant.mu_w, uncoded(&ctl, n + 1)),
            PolicyKind::ZeroControl => (None, plant.mu_w, uncoded(&ctl, n + 1)),
        };
        if n > 0 && tracker.mode == Mode::Normal {
            round_id += 1;
        }
        let a = plant.a.sample(&mut rng);
        let w = plant.w.sample(&mut rng);
        rows.push(TraceRow {
            n,
            x,
            symbol,
            mode: tracker.mode,
            m: tracker.range,
            i: tracker.error_bound,
            rho: tracker.sign,
            u,
            a,
            w,
            round_id,
        });
        x = plant_step(x, u, a, w);
        if !x.is_finite() || x.abs() > DIVERGENCE_THRESHOLD {
            diverged = true;
            break;
        }
    }

    Ok(Trace {
        rows,
        params: *params,
        policy: *policy,
        system: plant.spec.clone(),
        seed,
        horizon,
        diverged,
        tracker_mismatch,
    })
}

fn uncoded(tracker: &TrackerState, steps: u64) -> TrackerState {
    TrackerState { step: steps, ..*tracker }
}
