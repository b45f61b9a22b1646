//! `key=value` experiment files.
//!
//! ```text
//! # reference system
//! [system]
//! A.kind = gaussian
//! A.mean = 1
//! A.stddev = 0.5
//! W.kind = gaussian
//! W.mean = 0
//! W.stddev = 1
//!
//! [strategy]
//! P = 753769176810394100000
//! L = 8098920141268634828800
//! M0 = 4
//! K = 2
//! c = 0.2
//!
//! [experiment]
//! horizon = 10000
//! trials = 2000
//! seed = 1
//! policy = adaptive_fixed_rate
//! alpha = 4.5
//! ```
//!
//! Section headers are optional; when present, a key must sit in its own
//! section. `#` starts a comment anywhere on a line. Unknown keys,
//! duplicate keys and keys the chosen law or policy does not read are
//! errors.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

use zoomctl_core::codec::StrategyParams;
use zoomctl_core::control::{PolicyKind, SystemSpec};
use zoomctl_core::harness::ExperimentConfig;
use zoomctl_core::stochastic::{self, DistributionSpec};
use zoomctl_core::Error as CoreError;

const LAW_FIELDS: [&str; 12] = [
    "kind", "mean", "stddev", "lo", "hi", "v1", "p", "v2", "dof", "scale", "shift", "value",
];
const STRATEGY_KEYS: [&str; 5] = ["P", "L", "M0", "K", "c"];
const EXPERIMENT_KEYS: [&str; 6] = ["horizon", "trials", "seed", "policy", "range", "alpha"];

pub const DEFAULT_HORIZON: u64 = 10_000;
pub const DEFAULT_TRIALS: u64 = 2000;
pub const DEFAULT_ALPHA: f64 = 4.5;

/// Where a value came from, for error messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    Line { file: String, line: usize },
    Override(String),
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Line { file, line } => write!(f, "{file}:{line}"),
            Origin::Override(arg) => write!(f, "--set {arg}"),
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    origin: Origin,
    used: bool,
}

fn section_of(key: &str) -> Option<&'static str> {
    if let Some((prefix, field)) = key.split_once('.') {
        return ((prefix == "A" || prefix == "W") && LAW_FIELDS.contains(&field)).then_some("system");
    }
    if STRATEGY_KEYS.contains(&key) {
        Some("strategy")
    } else if EXPERIMENT_KEYS.contains(&key) {
        Some("experiment")
    } else {
        None
    }
}

/// Parsed but unresolved key/value pairs.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, Entry>,
}

impl RawConfig {
    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        let mut section: Option<String> = None;
        for (idx, line) in text.lines().enumerate() {
            let origin = Origin::Line {
                file: file.to_owned(),
                line: idx + 1,
            };
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| anyhow!("{origin}: malformed section header {line:?}"))?
                    .trim();
                if !["system", "strategy", "experiment"].contains(&name) {
                    bail!("{origin}: unknown section [{name}] (expected system, strategy or experiment)");
                }
                section = Some(name.to_owned());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}: expected key = value, got {line:?}"))?;
            let (key, value) = (key.trim(), value.trim());
            let home = section_of(key).ok_or_else(|| anyhow!("{origin}: unknown key {key:?}"))?;
            if let Some(s) = &section {
                if s != home {
                    bail!("{origin}: key {key:?} belongs in [{home}], not [{s}]");
                }
            }
            if let Some(prev) = raw.entries.get(key) {
                bail!("{origin}: duplicate key {key:?} (first set at {})", prev.origin);
            }
            raw.insert(key, value, origin);
        }
        Ok(raw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text, &path.display().to_string())
    }

    fn insert(&mut self, key: &str, value: &str, origin: Origin) {
        self.entries.insert(
            key.to_owned(),
            Entry {
                value: value.to_owned(),
                origin,
                used: false,
            },
        );
    }

    /// Applies one `key=value` override, replacing any value from the file.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let origin = Origin::Override(assignment.to_owned());
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("{origin}: expected key=value"))?;
        let key = key.trim();
        if section_of(key).is_none() {
            bail!("{origin}: unknown key {key:?}");
        }
        self.insert(key, value.trim(), origin);
        Ok(())
    }

    fn take(&mut self, key: &str) -> Option<(String, Origin)> {
        self.entries.get_mut(key).map(|e| {
            e.used = true;
            (e.value.clone(), e.origin.clone())
        })
    }

    fn has(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn num<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.take(key) {
            None => Ok(None),
            Some((v, origin)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| anyhow!("{origin}: {key} = {v:?}: {e}")),
        }
    }

    fn required<T: std::str::FromStr>(&mut self, key: &str, why: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        self.num(key)?.ok_or_else(|| anyhow!("missing key {key:?} ({why})"))
    }

    fn law(&mut self, prefix: &str) -> Result<DistributionSpec> {
        let key = |f: &str| format!("{prefix}.{f}");
        let (kind, origin) = self
            .take(&key("kind"))
            .ok_or_else(|| anyhow!("missing key \"{prefix}.kind\" (gaussian, uniform, two_point, student_t or constant)"))?;
        let mut req = |f: &str| self.required::<f64>(&key(f), &format!("{prefix} is {kind}"));
        let spec = match kind.as_str() {
            "gaussian" => DistributionSpec::gaussian(req("mean")?, req("stddev")?),
            "uniform" => DistributionSpec::uniform(req("lo")?, req("hi")?),
            "two_point" => DistributionSpec::two_point(req("v1")?, req("p")?, req("v2")?),
            "constant" => Ok(DistributionSpec::constant(req("value")?)),
            "student_t" => {
                let dof = req("dof")?;
                if self.has(&key("mean")) || self.has(&key("stddev")) {
                    let mut req = |f: &str| self.required::<f64>(&key(f), "student_t given by mean and stddev");
                    DistributionSpec::student_t_with_moments(dof, req("mean")?, req("stddev")?)
                } else {
                    let mut req = |f: &str| self.required::<f64>(&key(f), "student_t given by scale and shift");
                    DistributionSpec::student_t(dof, req("scale")?, req("shift")?)
                }
            }
            other => bail!("{origin}: unknown law {other:?} for {prefix}"),
        };
        spec.map_err(|e| anyhow!("{prefix}: {e}"))
    }

    /// Resolves into an experiment, checking every key was read.
    pub fn resolve(mut self) -> Result<ExperimentConfig> {
        let system = SystemSpec::new(self.law("A")?, self.law("W")?);
        let (_, var_a) = stochastic::moments(&system.a)?;
        if var_a >= 1.0 {
            return Err(CoreError::Unstabilizable { variance: var_a }.into());
        }
        stochastic::moments(&system.w)?;

        let policy_name = self.take("policy").map(|(v, _)| v);
        let policy_name = policy_name.as_deref().unwrap_or("adaptive_fixed_rate");
        let adaptive = policy_name == "adaptive_fixed_rate";
        let static_q = policy_name == "static_quantizer";
        let why = format!("policy {policy_name}");
        // Placeholders for constants a policy never reads.
        let (mut levels, mut zoom, mut floor, mut weight, mut decay) = (1u128, 2.0, 1.0, 2.0, 0.2);
        if adaptive {
            zoom = self.required("P", &why)?;
            levels = self.required("L", &why)?;
            floor = self.required("M0", &why)?;
            weight = self.required("K", &why)?;
            decay = self.required("c", &why)?;
        } else {
            zoom = self.num("P")?.unwrap_or(zoom);
            weight = self.num("K")?.unwrap_or(weight);
            decay = self.num("c")?.unwrap_or(decay);
            if static_q {
                levels = self.required("L", "the static quantizer's symbol budget")?;
                floor = if self.has("range") {
                    self.num("M0")?.unwrap_or(floor)
                } else {
                    self.required("M0", "the static quantizer's default range is 10·M0")?
                };
            } else {
                levels = self.num("L")?.unwrap_or(levels);
                floor = self.num("M0")?.unwrap_or(floor);
            }
        }
        let params = StrategyParams::new(levels, zoom, floor, weight, decay)?;
        let policy = match policy_name {
            "adaptive_fixed_rate" => PolicyKind::AdaptiveFixedRate,
            "perfect_observation" => PolicyKind::PerfectObservation,
            "zero_control" => PolicyKind::ZeroControl,
            "static_quantizer" => match self.num::<f64>("range")? {
                Some(range) => PolicyKind::StaticQuantizer { range },
                None => PolicyKind::static_default(&params),
            },
            other => bail!(
                "unknown policy {other:?} (adaptive_fixed_rate, static_quantizer, perfect_observation or zero_control)"
            ),
        };
        policy.validate()?;

        let cfg = ExperimentConfig {
            system,
            params,
            policy,
            horizon: self.num("horizon")?.unwrap_or(DEFAULT_HORIZON),
            trials: self.num("trials")?.unwrap_or(DEFAULT_TRIALS),
            master_seed: self.num("seed")?.unwrap_or(0),
            alpha: self.num("alpha")?.unwrap_or(DEFAULT_ALPHA),
        };
        if let Some((key, e)) = self.entries.iter().find(|(_, e)| !e.used) {
            bail!("{}: key {key:?} is not used by this configuration", e.origin);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Loads `path`, applies `overrides` in order and resolves.
pub fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut raw = RawConfig::load(path)?;
    for o in overrides {
        raw.set(o)?;
    }
    raw.resolve()
}

fn law_lines(prefix: &str, spec: &DistributionSpec) -> Vec<String> {
    let kv = |k: &str, v: f64| format!("{prefix}.{k} = {v}");
    let mut out = Vec::new();
    match *spec {
        DistributionSpec::Gaussian { mean, stddev } => {
            out.push(format!("{prefix}.kind = gaussian"));
            out.extend([kv("mean", mean), kv("stddev", stddev)]);
        }
        DistributionSpec::Uniform { lo, hi } => {
            out.push(format!("{prefix}.kind = uniform"));
            out.extend([kv("lo", lo), kv("hi", hi)]);
        }
        DistributionSpec::TwoPoint { v1, p, v2 } => {
            out.push(format!("{prefix}.kind = two_point"));
            out.extend([kv("v1", v1), kv("p", p), kv("v2", v2)]);
        }
        DistributionSpec::StudentT { dof, scale, shift } => {
            out.push(format!("{prefix}.kind = student_t"));
            out.extend([kv("dof", dof), kv("scale", scale), kv("shift", shift)]);
        }
    }
    out
}

/// The fully resolved configuration as config-file lines. Parsing them back
/// gives the same [`ExperimentConfig`].
pub fn render(cfg: &ExperimentConfig) -> Vec<String> {
    let p = &cfg.params;
    let mut out = vec!["[system]".to_owned()];
    out.extend(law_lines("A", &cfg.system.a));
    out.extend(law_lines("W", &cfg.system.w));
    out.push("[strategy]".into());
    out.push(format!("P = {}", p.zoom));
    out.push(format!("L = {}", p.levels));
    out.push(format!("M0 = {}", p.range_floor));
    out.push(format!("K = {}", p.error_weight));
    out.push(format!("c = {}", p.decay_rate));
    out.push("[experiment]".into());
    out.push(format!("horizon = {}", cfg.horizon));
    out.push(format!("trials = {}", cfg.trials));
    out.push(format!("seed = {}", cfg.master_seed));
    out.push(format!("policy = {}", cfg.policy.name()));
    if let PolicyKind::StaticQuantizer { range } = cfg.policy {
        out.push(format!("range = {range}"));
    }
    out.push(format!("alpha = {}", cfg.alpha));
    out
}
