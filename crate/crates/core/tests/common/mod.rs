#![allow(dead_code)]

use closshare::clos::{CapacityMask, ClosConfig, ClosSet};
use closshare::default_partition;
use closshare::profiler::{CapacityModel, GroundTruthModel};
use closshare::sensitivity::{MachineSpec, SensitivityProfile, SloSpec, WorkloadSpec};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn machine<R: Rng>(rng: &mut R) -> MachineSpec {
    loop {
        let step = *[5, 10, 20].choose(rng).unwrap();
        let clos = rng.gen_range(2..=8);
        let ways = rng.gen_range(clos..=32);
        let Ok(m) = MachineSpec::new(ways, clos, step) else { continue };
        if default_partition(&m).is_ok() {
            return m;
        }
    }
}

/// Sorted random subset of `lo..=hi` containing both ends.
fn axis<R: Rng>(rng: &mut R, lo: u32, hi: u32, step: u32) -> Vec<u32> {
    let mut v: Vec<u32> = (lo..=hi).step_by(step as usize).filter(|x| *x == lo || rng.gen_bool(0.4)).collect();
    if *v.last().unwrap() != hi {
        v.push(hi);
    }
    v
}

/// Separable power-law slowdown over a random sub-grid of the machine.
pub fn profile<R: Rng>(rng: &mut R, m: &MachineSpec, sl_full: f64) -> SensitivityProfile<f64> {
    let ways = axis(rng, 1, m.llc_ways, 1);
    let mba = axis(rng, m.mba_step, 100, m.mba_step);
    let (a, p) = (rng.gen_range(0.0..3.0), rng.gen_range(0.5..2.0));
    let (b, q) = (rng.gen_range(0.0..2.0), rng.gen_range(0.5..2.0));
    let l = f64::from(m.llc_ways);
    SensitivityProfile::from_fn(ways, mba, sl_full, |s| {
        (1.0 + a * (1.0 - f64::from(s.llc_ways) / l).powf(p))
            * (1.0 + b * (1.0 - f64::from(s.mba_percent) / 100.0).powf(q))
    })
    .unwrap()
}

pub fn workload(name: String, profile: SensitivityProfile<f64>, offered: f64) -> WorkloadSpec<f64> {
    WorkloadSpec::new(name, SloSpec::new(0.99, 5.0).unwrap(), profile, offered).unwrap()
}

pub fn workloads<R: Rng>(rng: &mut R, m: &MachineSpec, n: usize) -> Vec<WorkloadSpec<f64>> {
    (0..n)
        .map(|i| {
            let sl_full = rng.gen_range(1_000.0..100_000.0);
            let p = profile(rng, m, sl_full);
            let offered = sl_full * rng.gen_range(0.0..0.5);
            workload(format!("w{i:02}"), p, offered)
        })
        .collect()
}

pub fn parametric_model<R: Rng>(rng: &mut R) -> GroundTruthModel<f64> {
    GroundTruthModel {
        base_latency_ms: rng.gen_range(0.05..2.0),
        tail_inflation: rng.gen_range(1.0..4.0),
        capacity: CapacityModel::Parametric {
            peak: rng.gen_range(1_000.0..200_000.0),
            llc_sensitivity: rng.gen_range(0.0..0.9),
            llc_exponent: rng.gen_range(0.3..3.0),
            mba_sensitivity: rng.gen_range(0.0..0.9),
            mba_exponent: rng.gen_range(0.3..3.0),
        },
    }
}

/// Random valid CLOS set on `m`: contiguous packed masks, MBA in steps summing to at most 100.
pub fn clos_set<R: Rng>(rng: &mut R, m: &MachineSpec) -> ClosSet {
    let k = m.clos_count as usize;
    let mut widths = vec![1u32; k];
    for _ in 0..rng.gen_range(0..=(m.llc_ways - k as u32)) {
        widths[rng.gen_range(0..k)] += 1;
    }
    let max_units = (100 / m.mba_step) as usize;
    let mut units = vec![1u32; k];
    for _ in 0..rng.gen_range(0..=(max_units - k)) {
        units[rng.gen_range(0..k)] += 1;
    }
    let mut first = 0;
    let configs = (0..k)
        .map(|i| {
            let c = ClosConfig::new(i as u8, CapacityMask::contiguous(first, widths[i]), units[i] * m.mba_step);
            first += widths[i];
            c
        })
        .collect();
    ClosSet::new(*m, configs, 0).unwrap()
}

/// Machine on which [`clos_set`] always succeeds.
pub fn partition_machine<R: Rng>(rng: &mut R) -> MachineSpec {
    let step = *[5, 10, 20].choose(rng).unwrap();
    let clos = rng.gen_range(2..=(100 / step).min(8));
    MachineSpec::new(rng.gen_range(clos..=32), clos, step).unwrap()
}
