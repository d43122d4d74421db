//! Acceptance gate. Runs every criterion, prints one verdict line each and
//! exits non-zero if any failed.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use closshare::calibration::{calibrated_profile, ReferenceApp};
use closshare::clos::{default_partition, diff, CapacityMask, ClosConfig, ClosSet};
use closshare::profiler::{build_profile, max_sustainable_load};
use closshare::resctrl::{apply, parse_schemata, render_set, serialize_schemata, ResctrlLayout};
use closshare::scheduler::{plan_epoch, round_robin_plan};
use closshare::sensitivity::{weights_of, AllocationState, MachineSpec, SloSpec};
use closshare::sim::{compare_policies, max_affordable_load, reference_scenario, Policy, Scenario, WarmupParams};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (u8, &'static str, fn() -> Check, u64);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Slowdowns of every measured cell, worked out by hand as 1 / retainment.
const TABLE_SLOWDOWNS: [(ReferenceApp, u32, u32, f64); 21] = [
    (ReferenceApp::Memcached, 9, 100, 1.13507),
    (ReferenceApp::Memcached, 6, 100, 1.19332),
    (ReferenceApp::Memcached, 3, 100, 1.25),
    (ReferenceApp::Memcached, 20, 80, 1.09409),
    (ReferenceApp::Memcached, 20, 60, 1.14679),
    (ReferenceApp::Memcached, 20, 40, 1.21951),
    (ReferenceApp::Memcached, 20, 20, 1.27551),
    (ReferenceApp::Nginx, 9, 100, 1.33333),
    (ReferenceApp::Nginx, 6, 100, 1.61290),
    (ReferenceApp::Nginx, 3, 100, 3.03030),
    (ReferenceApp::Nginx, 20, 80, 1.07527),
    (ReferenceApp::Nginx, 20, 60, 1.10988),
    (ReferenceApp::Nginx, 20, 40, 1.14548),
    (ReferenceApp::Nginx, 20, 20, 1.23305),
    (ReferenceApp::Mongodb, 9, 100, 1.71527),
    (ReferenceApp::Mongodb, 6, 100, 2.68097),
    (ReferenceApp::Mongodb, 3, 100, 3.84615),
    (ReferenceApp::Mongodb, 20, 80, 1.21212),
    (ReferenceApp::Mongodb, 20, 60, 1.35135),
    (ReferenceApp::Mongodb, 20, 40, 1.43062),
    (ReferenceApp::Mongodb, 20, 20, 1.55763),
];

fn slowdown_and_weights() -> Check {
    let m = MachineSpec::REFERENCE;
    let mut cells = Vec::new();
    for (app, ways, mba, expect) in TABLE_SLOWDOWNS {
        let p = calibrated_profile(app, &m, 1.0).map_err(|e| e.to_string())?;
        let got = p.slowdown_at(AllocationState::new(ways, mba)).map_err(|e| e.to_string())?;
        ensure((got - expect).abs() <= 1e-4, || format!("{app} ({ways}, {mba}%): {got} vs {expect}"))?;
        cells.push(got);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..5_000 {
        let k = rng.gen_range(1..=cells.len());
        let subset: Vec<f64> = cells.choose_multiple(&mut rng, k).copied().collect();
        let w = weights_of(&subset).map_err(|e| e.to_string())?;
        worst = worst.max((w.iter().sum::<f64>() - 1.0).abs());
    }
    ensure(worst <= 1e-9, || format!("weight sum off by {worst}"))?;
    Ok(format!("21 cells within 1e-4, weight sums within {worst:.1e}"))
}

fn profiler_oracle() -> Check {
    let m = MachineSpec::REFERENCE;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_ratio: f64 = 0.0;
    let mut worst_scan: f64 = 0.0;
    for _ in 0..100 {
        let model = common::parametric_model(&mut rng);
        let slo = SloSpec::new(0.99, model.floor_latency() * rng.gen_range(1.5..20.0)).unwrap();
        let profile = build_profile(&model, &m, &slo).map_err(|e| e.to_string())?;
        let cap_full = model.capacity.capacity(m.full_state(), &m).unwrap();
        for &w in profile.ways() {
            for &b in profile.mba() {
                let s = AllocationState::new(w, b);
                let cap = model.capacity.capacity(s, &m).unwrap();
                let truth = cap_full / cap;
                let got = profile.slowdown_at(s).unwrap();
                worst_ratio = worst_ratio.max((got / truth - 1.0).abs());
            }
        }
        for _ in 0..5 {
            let s = AllocationState::new(rng.gen_range(1..=20), 10 * rng.gen_range(1..=10));
            let cap = model.capacity.capacity(s, &m).unwrap();
            let u_search = max_sustainable_load(&model, &m, s, &slo).unwrap() / cap;
            let u_scan = (0..=1000)
                .map(|k| f64::from(k) * 0.001)
                .take_while(|u| model.latency_for(u * cap, cap) <= slo.latency_bound_ms)
                .last()
                .unwrap();
            worst_scan = worst_scan.max((u_search - u_scan).abs());
        }
    }
    ensure(worst_ratio <= 0.01, || format!("slowdown off ground truth by {worst_ratio}"))?;
    ensure(worst_scan <= 0.001, || format!("search off linear scan by {worst_scan}"))?;
    Ok(format!("max slowdown error {worst_ratio:.2e}, max scan gap {worst_scan:.2e}"))
}

fn scheduler_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..1_000 {
        let m = common::machine(&mut rng);
        let set = default_partition(&m).unwrap();
        let n = rng.gen_range(1..=12);
        let e = rng.gen_range(n as u32..=40);
        let ws = common::workloads(&mut rng, &m, n);
        let plan = plan_epoch(&ws, &set, e).map_err(|err| format!("case {case}: {err}"))?;
        ensure(plan.slices.len() == n, || format!("case {case}: {} slices for {n}", plan.slices.len()))?;
        ensure(plan.slices.iter().all(|s| s.quanta >= 1), || format!("case {case}: starved slice"))?;
        for q in &plan.queues {
            if q.slots.is_empty() {
                continue;
            }
            ensure(plan.clos_quanta(q.clos_id) == e, || format!("case {case}: clos {} not conserved", q.clos_id))?;
            let local: Vec<(f64, u32)> = q
                .members()
                .map(|name| {
                    let w = ws.iter().find(|w| &w.name == name).unwrap();
                    (w.profile.slowdown_at(q.state).unwrap(), plan.slice(name).unwrap().quanta)
                })
                .collect();
            for a in &local {
                for b in &local {
                    ensure(!(a.0 > b.0 && a.1 < b.1), || format!("case {case}: slices not weight-monotone"))?;
                }
            }
        }
        ensure(plan_epoch(&ws, &set, e).unwrap() == plan, || format!("case {case}: plan not deterministic"))?;
        let mut shuffled = ws.clone();
        shuffled.shuffle(&mut rng);
        let again = plan_epoch(&shuffled, &set, e).unwrap();
        ensure(again.slice_multisets() == plan.slice_multisets(), || format!("case {case}: order-dependent"))?;

        let shared = common::profile(&mut rng, &m, 1_000.0);
        let same: Vec<_> = (0..n).map(|i| common::workload(format!("s{i:02}"), shared.clone(), 1.0)).collect();
        let wrr = plan_epoch(&same, &set, e).unwrap();
        let rr = round_robin_plan(&same, &set, e, 0).unwrap();
        ensure(wrr.slice_multisets() == rr.slice_multisets(), || format!("case {case}: no degeneracy to RR"))?;
    }
    Ok("1000 scenarios: floor, conservation, monotone, degeneracy, determinism".into())
}

fn policy_ordering() -> Check {
    let s = reference_scenario::<f64>();
    let mba: Vec<u32> = s.clos_set().unwrap().configs.iter().map(|c| c.mba_percent).collect();
    ensure(mba == [10, 10, 30, 50], || format!("reference partition MBA {mba:?}"))?;
    let c = compare_policies(&s, &Policy::ALL).map_err(|e| e.to_string())?;
    let t: BTreeMap<Policy, f64> = c.rows.iter().map(|r| (r.policy, r.metrics.total_retainment)).collect();
    let coco = t[&Policy::Coco];
    ensure(coco >= t[&Policy::RoundRobin], || format!("coco < rr: {t:?}"))?;
    ensure(t[&Policy::RoundRobin] >= t[&Policy::NoPartition], || format!("rr < none: {t:?}"))?;
    for p in [Policy::CatOnly, Policy::MbaOnly, Policy::CocoConflicting] {
        ensure(coco >= t[&p], || format!("coco < {p}: {t:?}"))?;
    }
    let ratio = c.row(Policy::Coco).unwrap().ratio;
    ensure(ratio >= 2.0, || format!("coco/none ratio {ratio:.3} < 2"))?;
    Ok(format!(
        "coco {coco:.3} rr {:.3} none {:.3} cat {:.3} mba {:.3} conflicting {:.3}; ratio {ratio:.2}",
        t[&Policy::RoundRobin],
        t[&Policy::NoPartition],
        t[&Policy::CatOnly],
        t[&Policy::MbaOnly],
        t[&Policy::CocoConflicting]
    ))
}

fn overhead_calibration() -> Check {
    let s = reference_scenario::<f64>();
    let on = max_affordable_load(&s).map_err(|e| e.to_string())?.metrics.overhead_fraction;
    ensure((0.024..=0.061).contains(&on), || format!("overhead {on}"))?;
    for warmup in
        [WarmupParams::disabled(), WarmupParams { window: 0, factor: 1.15 }, WarmupParams { window: 2, factor: 1.0 }]
    {
        let mut off = s.clone();
        off.config.warmup = warmup;
        let f = max_affordable_load(&off).map_err(|e| e.to_string())?.metrics.overhead_fraction;
        ensure(f == 0.0, || format!("overhead {f} with warmup {warmup:?}"))?;
    }
    Ok(format!("overhead {on:.4} with defaults, 0 when disabled"))
}

fn monotonicity_rule() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut valid, mut invalid) = (0, 0);
    for case in 0..2_000 {
        let m = common::partition_machine(&mut rng);
        let old = common::clos_set(&mut rng, &m);
        let new = if rng.gen_bool(0.2) { old.clone() } else { common::clos_set(&mut rng, &m) };
        let plan = diff(&old, &new).map_err(|e| e.to_string())?;
        let mut opposed = false;
        for (a, b) in old.configs.iter().zip(&new.configs) {
            let dw = i64::from(b.mask.width()) - i64::from(a.mask.width());
            let dm = i64::from(b.mba_percent) - i64::from(a.mba_percent);
            let against = dw.signum() * dm.signum() < 0;
            opposed |= against;
            if against {
                let flagged = plan.events.iter().any(|e| e.clos_id == a.id && e.conflict);
                ensure(flagged, || format!("case {case}: clos {} opposed but not flagged", a.id))?;
            }
        }
        if plan.valid {
            valid += 1;
            for e in &plan.events {
                ensure(e.delta_ways.signum() * e.delta_mba.signum() >= 0, || {
                    format!("case {case}: valid plan with {e}")
                })?;
            }
        } else {
            invalid += 1;
        }
        ensure(plan.valid != opposed, || format!("case {case}: valid={} opposed={opposed}", plan.valid))?;
    }
    Ok(format!("{valid} valid and {invalid} invalid plans checked"))
}

fn serialization() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..1_000 {
        let width = rng.gen_range(1..=64);
        let first = rng.gen_range(0..=64 - width);
        let c = ClosConfig::new(rng.gen(), CapacityMask::contiguous(first, width), rng.gen_range(1..=100));
        let cache_id = rng.gen_range(0..4);
        let text = serialize_schemata(&c, cache_id).map_err(|e| e.to_string())?;
        let back = parse_schemata(&text).map_err(|e| format!("case {case}: {e}"))?;
        ensure(back.to_config(c.id, cache_id) == Some(c), || format!("case {case}: {text:?} did not round-trip"))?;
    }
    let golden =
        std::fs::read(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/reference_partition.schemata"))
            .map_err(|e| e.to_string())?;
    let set = default_partition(&MachineSpec::REFERENCE).unwrap();
    let rendered = render_set(&set, 0).map_err(|e| e.to_string())?;
    ensure(rendered.as_bytes() == golden.as_slice(), || format!("golden mismatch:\n{rendered}"))?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let layout = ResctrlLayout::mock(dir.path());
    let first = apply(&set, &layout).map_err(|e| e.to_string())?;
    let second = apply(&set, &layout).map_err(|e| e.to_string())?;
    ensure(first.is_ok() && first.rewrites() == 4, || format!("first apply {first:?}"))?;
    ensure(second.rewrites() == 0, || format!("second apply rewrote {}", second.rewrites()))?;
    Ok("1000 round-trips, golden bytes equal, re-apply rewrote nothing".into())
}

fn pinned_memcached() -> Check {
    let m = MachineSpec::new(20, 2, 10).unwrap();
    let set = ClosSet::new(
        m,
        vec![
            ClosConfig::new(0, CapacityMask::contiguous(3, 17), 10),
            ClosConfig::new(1, CapacityMask::contiguous(0, 3), 90),
        ],
        0,
    )
    .map_err(|e| e.to_string())?;
    let sl_full = 120_000.0;
    let p = calibrated_profile(ReferenceApp::Memcached, &m, sl_full).map_err(|e| e.to_string())?;
    let w = common::workload("memcached".into(), p, sl_full);
    let mut s = Scenario::new(m, vec![w], Policy::CatOnly);
    s.partition = Some(set);
    let a = max_affordable_load(&s).map_err(|e| e.to_string())?;
    let r = a.metrics.workloads[0].retainment;
    ensure((r - 0.80).abs() <= 0.01, || format!("retainment {r}"))?;
    Ok(format!("retainment {r:.4}"))
}

fn main() {
    let criteria: [Criterion; 8] = [
        (1, "slowdown and weight arithmetic", slowdown_and_weights, 1),
        (2, "profiler oracle equivalence", profiler_oracle, 30),
        (3, "scheduler properties", scheduler_properties, 30),
        (4, "policy ordering", policy_ordering, 60),
        (5, "overhead calibration", overhead_calibration, 30),
        (6, "monotonicity rule", monotonicity_rule, 10),
        (7, "serialization", serialization, 10),
        (8, "single-workload pinning", pinned_memcached, 10),
    ];
    let mut failed = 0;
    for (id, name, check, budget) in criteria {
        let start = Instant::now();
        let result = check();
        let took = start.elapsed();
        let result = result.and_then(|d| {
            if took <= Duration::from_secs(budget) {
                Ok(d)
            } else {
                Err(format!("{d}; took {took:.2?}, budget {budget} s"))
            }
        });
        match result {
            Ok(detail) => println!("criterion {id} PASS  {name} ({took:.2?}): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id} FAIL  {name} ({took:.2?}): {detail}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
