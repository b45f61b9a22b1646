//! Verification layer over recorded traces.
//!
//! - [`dominating`]: frozen traces, `τ(n)`, `Q_n`, `N_n`, domination and
//!   halving checks.
//! - [`checks`]: per-step protocol invariants and exact trace replay.
//! - [`feasibility`]: conditions on `(P, L, M0, K, c)` and the tail bound.
//! - [`drift`]: ensemble drift statistics for `N_n²`.
//! - [`oracle`]: exact moments for the uncoded baselines.

pub mod checks;
pub mod dominating;
pub mod drift;
pub mod feasibility;
pub mod oracle;

pub use checks::{check_invariants, replay_trace, InvariantReport, ReplayReport};
pub use dominating::{
    check_domination, check_halving, dominating_seq, freeze, unfrozen_dominating, DominatingSeq, DominationReport,
    FrozenTrace,
};
pub use drift::{drift_estimate, DriftAccumulator, DriftReport};
pub use feasibility::{
    epsilon_bound, feasibility, feasibility_for, find_zoom, min_levels, search_feasible, FeasibilityReport,
    FeasibleParams, TailMoments,
};
pub use oracle::{moment_recursion_oracle, square_moments, OraclePolicy, SquareMoments};
