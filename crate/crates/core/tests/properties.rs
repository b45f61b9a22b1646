//! Protocol, analysis and harness invariants over random constants, laws
//! and seeds. None of these need feasible constants.

use proptest::prelude::*;

use zoomctl_core::analysis::checks::{check_invariants, replay_trace};
use zoomctl_core::analysis::dominating::{check_domination, check_halving, unfrozen_dominating};
use zoomctl_core::analysis::feasibility::feasibility_for;
use zoomctl_core::codec::StrategyParams;
use zoomctl_core::control::{read_trace_csv, run_policy_trial, Mode, Plant, PolicyKind, SystemSpec};
use zoomctl_core::harness::{run_experiment_with, ExperimentConfig, RunOptions};
use zoomctl_core::parallel::Execution;
use zoomctl_core::stochastic::DistributionSpec;

fn arb_params() -> impl Strategy<Value = StrategyParams> {
    (1u128..64, 1.01f64..8.0, 0.01f64..5.0, 0.5f64..4.0, 0.05f64..0.5)
        .prop_map(|(l, p, m0, k, c)| StrategyParams::new(l, p, m0, k, c).unwrap())
}

fn arb_system() -> impl Strategy<Value = SystemSpec> {
    let gain = prop_oneof![
        (-1.5f64..1.5, 0.0f64..0.99).prop_map(|(m, s)| DistributionSpec::gaussian(m, s).unwrap()),
        (-1.5f64..1.5, 0.1f64..0.99).prop_map(|(m, s)| DistributionSpec::student_t_with_moments(5.0, m, s).unwrap()),
        (-1.0f64..1.5, 0.0f64..1.0).prop_map(|(lo, w)| DistributionSpec::uniform(lo, lo + w + 1e-3).unwrap()),
    ];
    let noise = (-1.0f64..1.0, 0.1f64..2.0).prop_map(|(m, s)| DistributionSpec::gaussian(m, s).unwrap());
    (gain, noise).prop_map(|(a, w)| SystemSpec::new(a, w))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, ..ProptestConfig::default() })]

    #[test]
    fn protocol_invariants_hold(p in arb_params(), sys in arb_system(), seed in any::<u64>()) {
        let plant = Plant::new(&sys).unwrap();
        let tr = run_policy_trial(&plant, &p, &PolicyKind::AdaptiveFixedRate, 300, seed).unwrap();
        prop_assert_eq!(tr.tracker_mismatch, None);
        let inv = check_invariants(&tr.rows, &p, plant.mu_a, plant.mu_w);
        prop_assert!(inv.passed(), "{:?}", inv);
        let replay = replay_trace(&tr.rows, &p, &tr.policy, plant.mu_a, plant.mu_w).unwrap();
        prop_assert!(replay.passed(), "{:?}", replay.first_mismatch);
    }

    #[test]
    fn emergencies_grow_range_by_p(p in arb_params(), sys in arb_system(), seed in any::<u64>()) {
        let plant = Plant::new(&sys).unwrap();
        let tr = run_policy_trial(&plant, &p, &PolicyKind::AdaptiveFixedRate, 300, seed).unwrap();
        let mut prev_m = p.range_floor;
        for r in &tr.rows {
            let fits = r.x.abs() <= p.zoom * prev_m;
            prop_assert_eq!(r.mode == Mode::Normal, fits, "n = {}", r.n);
            if r.mode == Mode::Emergency {
                prop_assert_eq!(r.u, plant.mu_w);
                prop_assert_eq!(r.m, p.zoom * prev_m);
                prop_assert_eq!(r.symbol, Some(p.emergency_symbol()));
            } else {
                prop_assert!(r.symbol.unwrap() < p.emergency_symbol());
            }
            prev_m = r.m;
        }
    }

    #[test]
    fn tau_domination_and_halving(p in arb_params(), sys in arb_system(), seed in any::<u64>()) {
        let plant = Plant::new(&sys).unwrap();
        let tr = run_policy_trial(&plant, &p, &PolicyKind::AdaptiveFixedRate, 200, seed).unwrap();
        let k = p.error_weight;
        let seq = unfrozen_dominating(&tr, k);
        for (n, &t) in seq.tau.iter().enumerate() {
            prop_assert!(t >= n);
            if let Some(&tt) = seq.tau.get(t) {
                prop_assert_eq!(tt, t, "tau(tau({})) != tau({})", n, n);
            }
        }
        prop_assert_eq!(check_halving(&seq).violations, 0);
        let n0s: Vec<usize> = (0..tr.len()).collect();
        let dom = check_domination(&tr, k, &n0s).unwrap();
        prop_assert!(dom.passed(), "{:?}", dom.violations.first());
        prop_assert_eq!(dom.checked, tr.len());
    }

    #[test]
    fn trace_csv_round_trips(p in arb_params(), sys in arb_system(), seed in any::<u64>()) {
        let plant = Plant::new(&sys).unwrap();
        let tr = run_policy_trial(&plant, &p, &PolicyKind::AdaptiveFixedRate, 60, seed).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let rows = read_trace_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(rows.len(), tr.rows.len());
        for (a, b) in rows.iter().zip(&tr.rows) {
            prop_assert_eq!(a.x.to_bits(), b.x.to_bits());
            prop_assert_eq!(a.u.to_bits(), b.u.to_bits());
            prop_assert!(a.tracker().bit_eq(&b.tracker()));
            prop_assert_eq!((a.symbol, a.round_id, a.a.to_bits(), a.w.to_bits()), (b.symbol, b.round_id, b.a.to_bits(), b.w.to_bits()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn margin_drift_monotone_in_levels(l in 1u128..1_000_000, extra in 1u128..1_000_000, p in 1.01f64..1e6) {
        let sys = SystemSpec::reference();
        let coarse = StrategyParams::new(l, p, 4.0, 2.0, 0.2).unwrap();
        let fine = StrategyParams::new(l + extra, p, 4.0, 2.0, 0.2).unwrap();
        let a = feasibility_for(&sys, &coarse, 4.5).unwrap();
        let b = feasibility_for(&sys, &fine, 4.5).unwrap();
        prop_assert!(b.margin_drift >= a.margin_drift, "{} < {}", b.margin_drift, a.margin_drift);
        prop_assert_eq!(a.epsilon_estimate.to_bits(), b.epsilon_estimate.to_bits(), "eps ignores L");
    }

    #[test]
    fn ok_iff_conditions(l in 1u128..u64::MAX as u128, p in 1.01f64..1e24, m0 in 0.5f64..8.0, c in 0.01f64..0.74) {
        let sys = SystemSpec::reference();
        let params = StrategyParams::new(l, p, m0, 2.0, c).unwrap();
        let r = feasibility_for(&sys, &params, 4.5).unwrap();
        let expect = r.margin_drift >= 0.0 && r.margin_k >= 0.0 && c + r.epsilon_estimate < r.contraction_cap;
        prop_assert_eq!(r.ok, expect);
    }

    #[test]
    fn ensembles_deterministic_and_independent_of_retention(
        p in arb_params(),
        sys in arb_system(),
        seed in any::<u64>(),
        trials in 1u64..80,
        policy in prop_oneof![
            Just(PolicyKind::AdaptiveFixedRate),
            Just(PolicyKind::ZeroControl),
            Just(PolicyKind::PerfectObservation),
            (0.5f64..20.0).prop_map(|range| PolicyKind::StaticQuantizer { range }),
        ],
    ) {
        let cfg = ExperimentConfig { system: sys, params: p, policy, horizon: 120, trials, master_seed: seed, alpha: 4.5 };
        let run = |exec, keep| run_experiment_with(&cfg, exec, RunOptions { keep_traces: keep });
        match run(Execution::Parallel, 0) {
            Ok(base) => {
                let json = |s| serde_json::to_string(s).unwrap();
                let seq = run(Execution::Sequential, 0).unwrap();
                let kept = run(Execution::Parallel, 7).unwrap();
                prop_assert_eq!(json(&base.stats), json(&seq.stats));
                prop_assert_eq!(json(&base.stats), json(&kept.stats));
                prop_assert_eq!(kept.traces.len(), (trials as usize).min(7));
                let s = &base.stats;
                prop_assert!(s.diverged_count <= s.trials);
                prop_assert!((0.0..=1.0).contains(&s.emergency_fraction));
            }
            Err(e) => {
                let all_diverged = matches!(e, zoomctl_core::Error::AllDiverged { .. });
                prop_assert!(all_diverged, "{}", e);
            }
        }
    }
}
