mod common;

use closshare::apportion::largest_remainder;
use closshare::clos::{default_partition, diff, CapacityMask, ClosConfig};
use closshare::profiler::build_profile;
use closshare::resctrl::{parse_schemata, serialize_schemata};
use closshare::scheduler::{admission_on, infeasible, lc_clos_view, AdmissionOptions};
use closshare::sensitivity::{weights_of, AllocationState, SloSpec};
use closshare::sim::{max_affordable_load, run_scenario, Policy, Scenario, LOAD_SEARCH_TOLERANCE};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn weights_are_proportional(s in prop::collection::vec(1.0f64..50.0, 1..20)) {
        let w = weights_of(&s).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..s.len() {
            prop_assert!((w[i] / w[0] - s[i] / s[0]).abs() < 1e-9 * (s[i] / s[0]));
        }
    }

    #[test]
    fn weights_in_f32(s in prop::collection::vec(1.0f32..50.0, 1..20)) {
        let w = weights_of(&s).unwrap();
        prop_assert!((w.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn interpolation_is_bounded_and_monotone(seed in any::<u64>()) {
        let mut r = rng(seed);
        let m = common::machine(&mut r);
        let p = common::profile(&mut r, &m, 1_000.0);
        for &w in p.ways() {
            for &b in p.mba() {
                let s = AllocationState::new(w, b);
                prop_assert_eq!(p.slowdown_at(s).unwrap(), p.grid_value(s).unwrap());
            }
        }
        for _ in 0..20 {
            let w = r.gen_range(1..=m.llc_ways);
            let b = m.mba_step * r.gen_range(1..=100 / m.mba_step);
            let here = p.slowdown_at(AllocationState::new(w, b)).unwrap();
            prop_assert!(here >= 1.0);
            if w < m.llc_ways {
                prop_assert!(p.slowdown_at(AllocationState::new(w + 1, b)).unwrap() <= here + 1e-12);
            }
            if b < 100 {
                prop_assert!(p.slowdown_at(AllocationState::new(w, b + m.mba_step)).unwrap() <= here + 1e-12);
            }
        }
        prop_assert!(p.slowdown_at(AllocationState::new(m.llc_ways + 1, 100)).is_err());
    }

    #[test]
    fn apportionment_conserves_and_tracks_quotas(
        w in prop::collection::vec(0.0f64..10.0, 1..15),
        total in 0u32..200,
    ) {
        let units = largest_remainder(&w, total, 0).unwrap();
        prop_assert_eq!(units.iter().sum::<u32>(), total);
        let sum: f64 = w.iter().sum();
        if sum > 0.0 {
            for (u, x) in units.iter().zip(&w) {
                prop_assert!((f64::from(*u) - x / sum * f64::from(total)).abs() < 1.0 + 1e-9);
            }
        }
        let n = w.len() as u32;
        if total >= n {
            let floored = largest_remainder(&w, total, 1).unwrap();
            prop_assert_eq!(floored.iter().sum::<u32>(), total);
            prop_assert!(floored.iter().all(|u| *u >= 1));
        } else {
            prop_assert!(largest_remainder(&w, total, 1).is_none());
        }
    }

    #[test]
    fn schemata_round_trip(first in 0u32..64, width in 1u32..=64, mba in 1u32..=100, cache_id in 0u32..8) {
        let width = width.min(64 - first);
        let c = ClosConfig::new(1, CapacityMask::contiguous(first, width), mba);
        let text = serialize_schemata(&c, cache_id).unwrap();
        prop_assert_eq!(parse_schemata(&text).unwrap().to_config(1, cache_id), Some(c));
        let padded = format!("\n  {}  \n", text.replace('\n', " \n "));
        prop_assert_eq!(parse_schemata(&padded).unwrap().to_config(1, cache_id), Some(c));
    }

    #[test]
    fn parser_never_panics(text in "\\PC{0,40}") {
        let _ = parse_schemata(&text);
    }

    #[test]
    fn diff_flags_exactly_the_opposed_changes(seed in any::<u64>()) {
        let mut r = rng(seed);
        let m = common::partition_machine(&mut r);
        let a = common::clos_set(&mut r, &m);
        let b = common::clos_set(&mut r, &m);
        let plan = diff(&a, &b).unwrap();
        prop_assert!(diff(&a, &a).unwrap().is_empty());
        for e in &plan.events {
            prop_assert_eq!(e.conflict, e.delta_ways.signum() * e.delta_mba.signum() < 0);
            let old = a.config(e.clos_id).unwrap();
            let new = b.config(e.clos_id).unwrap();
            prop_assert_eq!(e.flush_required, old.mask != new.mask);
        }
        prop_assert_eq!(plan.valid, plan.conflicts().next().is_none());
    }

    #[test]
    fn profiles_built_from_models_are_valid(seed in any::<u64>()) {
        let mut r = rng(seed);
        let m = common::machine(&mut r);
        let model = common::parametric_model(&mut r);
        let slo = SloSpec::new(0.99, model.floor_latency() * 3.0).unwrap();
        let p = build_profile(&model, &m, &slo).unwrap();
        p.check_machine(&m).unwrap();
        prop_assert_eq!(p.slowdown_at(m.full_state()).unwrap(), 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn admitted_sets_are_feasible(seed in any::<u64>()) {
        let mut r = rng(seed);
        let m = common::machine(&mut r);
        let set = default_partition(&m).unwrap();
        let n = r.gen_range(1..=12);
        let mut ws = common::workloads(&mut r, &m, n);
        for w in &mut ws {
            w.offered_load *= 2.0;
        }
        let view = lc_clos_view(&set);
        let opts = AdmissionOptions::default();
        let a = admission_on(&ws, &view, 20, &opts).unwrap();
        prop_assert_eq!(a.admitted.len() + a.rejected.len(), n);
        if let Some(plan) = a.plan {
            let kept: Vec<_> = ws.iter().filter(|w| a.admitted.contains(&w.name)).cloned().collect();
            prop_assert!(infeasible(&plan, &kept, &opts).unwrap().is_empty());
        }
    }

    #[test]
    fn simulation_is_deterministic_and_conserves_work(seed in any::<u64>(), jitter in 0.0f64..0.3) {
        let mut r = rng(seed);
        let m = common::machine(&mut r);
        let n = r.gen_range(1..=8);
        let ws = common::workloads(&mut r, &m, n);
        let mut s = Scenario::new(m, ws, Policy::Coco);
        s.config.duration = 4;
        s.config.epoch_quanta = 16;
        s.config.jitter = jitter;
        s.config.seed = seed;
        let a = run_scenario(&s).unwrap();
        let b = run_scenario(&s).unwrap();
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let busy = (m.clos_count as usize - 1).min(n) as u64;
        let received: u64 = a.workloads.iter().map(|w| w.quanta_received).sum();
        prop_assert_eq!(received, busy * 16 * 4);
        prop_assert!(a.workloads.iter().all(|w| (0.0..=1.0).contains(&w.retainment)));
        prop_assert!(a.overhead_fraction >= 0.0);
    }

    #[test]
    fn affordable_multiplier_is_bracketed(seed in any::<u64>(), policy in prop::sample::select(Policy::ALL.to_vec())) {
        let mut r = rng(seed);
        let m = common::machine(&mut r);
        let n = r.gen_range(1..=6);
        let mut ws = common::workloads(&mut r, &m, n);
        for w in &mut ws {
            w.offered_load = w.sl_full() * r.gen_range(0.1..1.0);
        }
        let mut s = Scenario::new(m, ws, policy);
        s.config.duration = 3;
        s.config.epoch_quanta = 12;
        let a = max_affordable_load(&s).unwrap();
        prop_assert_eq!(a.metrics.violations(), 0);
        let mut over = s.clone();
        for w in &mut over.workloads {
            w.offered_load *= a.multiplier * (1.0 + 2.0 * LOAD_SEARCH_TOLERANCE);
        }
        prop_assert!(run_scenario(&over).unwrap().violations() >= 1);
    }
}
