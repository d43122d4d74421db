//! Discrete-time simulator: executes epoch plans quantum by quantum against
//! workload profiles and measures how much load each policy lets every
//! workload sustain without SLO violations.
//!
//! Capacity model per active quantum:
//! `SL_full / (slowdown(state) * contention * pairing * warmup)`.
//! A workload's offered load is spread over the quanta it runs in, so a
//! workload active for `a` of `E` quanta must absorb `offered * E / a` while
//! running.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{calibrated_profile, ReferenceApp};
use crate::clos::{default_partition, ClosSet, MigrationEvent};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scheduler::{
    admission_on, lc_clos_view, plan_on, round_robin_on, AdmissionOptions, EpochPlan, LcClos, PlanOptions,
};
use crate::sensitivity::{AllocationState, MachineSpec, SloSpec, WorkloadSpec};

/// Relative tolerance of the load-multiplier search.
pub const LOAD_SEARCH_TOLERANCE: f64 = 0.005;
/// Interference multiplier for unmanaged sharing. Partially managed policies
/// pay its square root.
pub const DEFAULT_INTERFERENCE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// MQ-WRR over the monotone default partition.
    Coco,
    /// MQ-WRR over a partition whose bandwidth shares run against the masks.
    #[serde(alias = "conflicting")]
    CocoConflicting,
    /// Cache partitioned, bandwidth split evenly among running workloads.
    #[serde(alias = "cat")]
    CatOnly,
    /// Bandwidth partitioned, cache split evenly among running workloads.
    #[serde(alias = "mba")]
    MbaOnly,
    /// Equal slices, no pairing, CLOS assignment rotates every epoch.
    #[serde(alias = "rr")]
    RoundRobin,
    /// Everything runs at once on an even split of the whole machine.
    #[serde(alias = "none")]
    NoPartition,
}

impl Policy {
    pub const ALL: [Policy; 6] = [
        Policy::Coco,
        Policy::CocoConflicting,
        Policy::CatOnly,
        Policy::MbaOnly,
        Policy::RoundRobin,
        Policy::NoPartition,
    ];

    /// Short name used on the command line and in reports.
    pub fn short_name(self) -> &'static str {
        match self {
            Policy::Coco => "coco",
            Policy::CocoConflicting => "conflicting",
            Policy::CatOnly => "cat",
            Policy::MbaOnly => "mba",
            Policy::RoundRobin => "rr",
            Policy::NoPartition => "none",
        }
    }

    fn long_name(self) -> &'static str {
        match self {
            Policy::Coco => "coco",
            Policy::CocoConflicting => "coco_conflicting",
            Policy::CatOnly => "cat_only",
            Policy::MbaOnly => "mba_only",
            Policy::RoundRobin => "round_robin",
            Policy::NoPartition => "no_partition",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('-', "_");
        Policy::ALL
            .into_iter()
            .find(|p| p.short_name() == s || p.long_name() == s)
            .ok_or_else(|| Error::Domain(format!("unknown policy {s:?}")))
    }
}

/// Throughput loss after a CLOS changes hands while the cache refills.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", deny_unknown_fields)]
pub struct WarmupParams<T> {
    /// Quanta affected after each ownership change.
    pub window: u32,
    pub factor: T,
}

impl<T: Scalar> WarmupParams<T> {
    pub fn disabled() -> Self {
        WarmupParams { window: 0, factor: T::one() }
    }
}

impl<T: Scalar> Default for WarmupParams<T> {
    fn default() -> Self {
        WarmupParams { window: 2, factor: T::lit(1.15) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", default, deny_unknown_fields)]
pub struct SimConfig<T> {
    /// Simulated quantum length in milliseconds. Reporting only.
    pub quantum_ms: T,
    pub epoch_quanta: u32,
    /// Number of epochs.
    pub duration: u32,
    pub warmup: WarmupParams<T>,
    pub seed: u64,
    /// Per-epoch load jitter amplitude; offered load is scaled by `1 + jitter * u`, `u` uniform in [-1, 1].
    pub jitter: T,
    pub pairing_penalty: T,
    pub interference: T,
    pub overhead_margin: T,
    /// Run admission control before partitioned policies (not round-robin).
    pub admission: bool,
}

impl<T: Scalar> Default for SimConfig<T> {
    fn default() -> Self {
        SimConfig {
            quantum_ms: T::lit(100.0),
            epoch_quanta: 20,
            duration: 10,
            warmup: WarmupParams::default(),
            seed: 0,
            jitter: T::zero(),
            pairing_penalty: T::lit(crate::scheduler::DEFAULT_PAIRING_PENALTY),
            interference: T::lit(DEFAULT_INTERFERENCE),
            overhead_margin: T::lit(crate::scheduler::DEFAULT_OVERHEAD_MARGIN),
            admission: false,
        }
    }
}

impl<T: Scalar> SimConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScenario(m));
        if !(self.quantum_ms > T::zero()) || !self.quantum_ms.is_finite() {
            return bad(format!("quantum {} ms must be > 0", self.quantum_ms));
        }
        if self.epoch_quanta == 0 {
            return bad("epoch_quanta must be >= 1".into());
        }
        if self.duration == 0 {
            return bad("duration must be >= 1 epoch".into());
        }
        if !(self.warmup.factor >= T::one()) || !self.warmup.factor.is_finite() {
            return bad(format!("warmup factor {} must be >= 1", self.warmup.factor));
        }
        if !(self.jitter >= T::zero() && self.jitter < T::one()) {
            return bad(format!("jitter {} must be in [0, 1)", self.jitter));
        }
        for (name, v) in [("pairing_penalty", self.pairing_penalty), ("interference", self.interference)] {
            if !(v >= T::one()) || !v.is_finite() {
                return bad(format!("{name} {v} must be >= 1"));
            }
        }
        if !(self.overhead_margin >= T::zero() && self.overhead_margin < T::one()) {
            return bad(format!("overhead_margin {} must be in [0, 1)", self.overhead_margin));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Scenario<T> {
    pub machine: MachineSpec,
    pub workloads: Vec<WorkloadSpec<T>>,
    pub policy: Policy,
    /// Partition to use instead of the default one.
    #[serde(default)]
    pub partition: Option<ClosSet>,
    #[serde(default)]
    pub config: SimConfig<T>,
}

impl<T: Scalar> Scenario<T> {
    pub fn new(machine: MachineSpec, workloads: Vec<WorkloadSpec<T>>, policy: Policy) -> Self {
        Scenario { machine, workloads, policy, partition: None, config: SimConfig::default() }
    }

    pub fn with_policy(&self, policy: Policy) -> Self {
        Scenario { policy, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.machine.validate()?;
        self.config.validate()?;
        if self.workloads.is_empty() {
            return Err(Error::InvalidScenario("no workloads".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for w in &self.workloads {
            w.validate()?;
            w.profile.check_machine(&self.machine)?;
            if !names.insert(w.name.as_str()) {
                return Err(Error::InvalidScenario(format!("duplicate workload name {:?}", w.name)));
            }
        }
        if let Some(p) = &self.partition {
            if p.machine != self.machine {
                return Err(Error::InvalidScenario("partition was built for another machine".into()));
            }
            ClosSet::new(p.machine, p.configs.clone(), p.reserved_id)?;
        }
        Ok(())
    }

    /// The CLOS set the policy runs on.
    pub fn clos_set(&self) -> Result<ClosSet> {
        let base = match &self.partition {
            Some(p) => p.clone(),
            None => default_partition(&self.machine)?,
        };
        Ok(match self.policy {
            Policy::CocoConflicting => base.with_opposed_mba(),
            _ => base,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct WorkloadMetrics<T> {
    pub name: String,
    /// Requests/sec the workload can absorb.
    pub affordable_load: T,
    pub retainment: T,
    /// Quanta in which demand exceeded capacity.
    pub slo_violations: u64,
    pub quanta_received: u64,
    pub admitted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Metrics<T> {
    pub policy: Policy,
    pub workloads: Vec<WorkloadMetrics<T>>,
    pub migrations: u64,
    pub overhead_fraction: T,
    pub total_retainment: T,
}

impl<T: Scalar> Metrics<T> {
    pub fn workload(&self, name: &str) -> Option<&WorkloadMetrics<T>> {
        self.workloads.iter().find(|w| w.name == name)
    }

    pub fn violations(&self) -> u64 {
        self.workloads.iter().map(|w| w.slo_violations).sum()
    }
}

/// Simulates the scenario at its offered loads.
pub fn run_scenario<T: Scalar>(s: &Scenario<T>) -> Result<Metrics<T>> {
    run_scenario_with(s, |_, _| {})
}

/// Like [`run_scenario`], calling `on_migration(epoch, event)` for every
/// ownership change (the point where a real system would flush the cache).
pub fn run_scenario_with<T: Scalar>(
    s: &Scenario<T>,
    on_migration: impl FnMut(u32, &MigrationEvent),
) -> Result<Metrics<T>> {
    s.validate()?;
    Engine::new(s)?.run(T::one(), on_migration)
}

/// Everything that does not depend on the load multiplier.
struct Engine<'a, T> {
    s: &'a Scenario<T>,
    set: Option<ClosSet>,
    admitted: Vec<bool>,
    /// Fixed plan; `None` for round-robin (replanned per epoch) and NoPartition.
    plan: Option<EpochPlan<T>>,
    view: Vec<LcClos>,
    jitter: Vec<Vec<T>>,
}

impl<'a, T: Scalar> Engine<'a, T> {
    fn new(s: &'a Scenario<T>) -> Result<Self> {
        let cfg = &s.config;
        let n = s.workloads.len();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let jitter = (0..cfg.duration)
            .map(|_| (0..n).map(|_| T::one() + cfg.jitter * T::lit(rng.gen_range(-1.0..=1.0))).collect())
            .collect();
        let mut engine = Engine { s, set: None, admitted: vec![true; n], plan: None, view: Vec::new(), jitter };
        if s.policy == Policy::NoPartition {
            return Ok(engine);
        }
        let set = s.clos_set()?;
        let machine = &s.machine;
        engine.view = lc_clos_view(&set)
            .into_iter()
            .map(|mut c| {
                c.state = match s.policy {
                    Policy::CatOnly => AllocationState::new(c.width, 100),
                    Policy::MbaOnly => AllocationState::new(machine.llc_ways, c.state.mba_percent),
                    _ => c.state,
                };
                c
            })
            .collect();
        if cfg.admission && s.policy != Policy::RoundRobin {
            let opts = AdmissionOptions {
                overhead_margin: cfg.overhead_margin,
                pairing_penalty: cfg.pairing_penalty,
                plan: PlanOptions::default(),
            };
            let a = admission_on(&s.workloads, &engine.view, cfg.epoch_quanta, &opts)?;
            for (flag, w) in engine.admitted.iter_mut().zip(&s.workloads) {
                *flag = a.admitted.contains(&w.name);
            }
        }
        if s.policy != Policy::RoundRobin {
            engine.plan =
                Some(plan_on(&engine.admitted_workloads(), &engine.view, cfg.epoch_quanta, PlanOptions::default())?);
        }
        engine.set = Some(set);
        Ok(engine)
    }

    fn admitted_workloads(&self) -> Vec<WorkloadSpec<T>> {
        self.s.workloads.iter().zip(&self.admitted).filter(|(_, a)| **a).map(|(w, _)| w.clone()).collect()
    }

    fn index_of(&self, name: &str) -> usize {
        self.s.workloads.iter().position(|w| w.name == name).expect("planned workload exists")
    }

    /// Per CLOS (in view order): occupants of every quantum of the epoch.
    fn timeline(&self, plan: &EpochPlan<T>) -> Vec<(u8, Vec<Vec<usize>>)> {
        plan.queues
            .iter()
            .map(|q| {
                let mut quanta = Vec::with_capacity(plan.epoch_quanta as usize);
                for slot in &q.slots {
                    let occ: Vec<usize> = slot.members.iter().map(|m| self.index_of(m)).collect();
                    for _ in 0..slot.quanta {
                        quanta.push(occ.clone());
                    }
                }
                (q.clos_id, quanta)
            })
            .collect()
    }

    fn run(&self, multiplier: T, mut on_migration: impl FnMut(u32, &MigrationEvent)) -> Result<Metrics<T>> {
        let s = self.s;
        let cfg = &s.config;
        let machine = &s.machine;
        let n = s.workloads.len();
        let e_quanta = T::from_count(cfg.epoch_quanta);
        let mut afford = vec![T::infinity(); n];
        let mut violations = vec![0u64; n];
        let mut received = vec![0u64; n];
        let mut migrations = 0u64;
        let mut warm_sum = T::zero();
        let mut active_sum = 0u64;

        // Charges one active quantum; `inflation` excludes warmup.
        let mut charge =
            |w: usize, state: AllocationState, inflation: T, warm: bool, active: u32, jitter: T| -> Result<()> {
                let wl = &s.workloads[w];
                let warm_factor = if warm { cfg.warmup.factor } else { T::one() };
                let cap = wl.sl_full() / (wl.profile.slowdown_at(state)? * inflation * warm_factor);
                let share = T::from_count(active) / e_quanta;
                let demand = multiplier * wl.offered_load * jitter / share;
                if demand > cap {
                    violations[w] += 1;
                }
                afford[w] = afford[w].min(cap * share / jitter);
                warm_sum = warm_sum + (warm_factor - T::one());
                active_sum += 1;
                Ok(())
            };

        if s.policy == Policy::NoPartition {
            let k = n as u32;
            let state = AllocationState::new((machine.llc_ways / k).max(1), machine.floor_mba(100 / k));
            let contention = if k > 1 { cfg.interference } else { T::one() };
            for e in 0..cfg.duration as usize {
                for _ in 0..cfg.epoch_quanta {
                    for w in 0..n {
                        charge(w, state, contention, false, cfg.epoch_quanta, self.jitter[e][w])?;
                    }
                }
                for r in received.iter_mut() {
                    *r += u64::from(cfg.epoch_quanta);
                }
            }
        } else {
            let set = self.set.as_ref().expect("partitioned policy has a CLOS set");
            let width: std::collections::BTreeMap<u8, u32> = set.lc_configs().map(|c| (c.id, c.mask.width())).collect();
            let mut owner: std::collections::BTreeMap<u8, Vec<usize>> = Default::default();
            let mut warm_left: std::collections::BTreeMap<u8, u32> = Default::default();
            let admitted = self.admitted_workloads();
            for e in 0..cfg.duration {
                let rr;
                let plan = match &self.plan {
                    Some(p) => p,
                    None => {
                        rr = round_robin_on(&admitted, &self.view, cfg.epoch_quanta, u64::from(e))?;
                        &rr
                    }
                };
                for sl in &plan.slices {
                    received[self.index_of(&sl.workload)] += u64::from(sl.quanta);
                }
                let active: Vec<u32> =
                    (0..n).map(|w| plan.slice(&s.workloads[w].name).map_or(0, |sl| sl.active_quanta)).collect();
                let timeline = self.timeline(plan);
                for q in 0..cfg.epoch_quanta as usize {
                    let running: u32 = timeline.iter().map(|(_, t)| t.get(q).map_or(0, Vec::len) as u32).sum();
                    let contention = if running > 1 && matches!(s.policy, Policy::CatOnly | Policy::MbaOnly) {
                        cfg.interference.sqrt()
                    } else {
                        T::one()
                    };
                    for (clos, t) in &timeline {
                        let Some(occ) = t.get(q) else { continue };
                        if let Some(prev) = owner.get(clos) {
                            if prev != occ {
                                migrations += 1;
                                on_migration(e, &MigrationEvent::ownership_change(*clos));
                                warm_left.insert(*clos, cfg.warmup.window);
                            }
                        }
                        owner.insert(*clos, occ.clone());
                        let left = warm_left.entry(*clos).or_insert(0);
                        let warm = *left > 0;
                        *left = left.saturating_sub(1);
                        let state = match s.policy {
                            Policy::CatOnly => AllocationState::new(width[clos], machine.floor_mba(100 / running)),
                            Policy::MbaOnly => {
                                let c = set.config(*clos).expect("planned CLOS exists");
                                AllocationState::new((machine.llc_ways / running).max(1), c.mba_percent)
                            }
                            _ => set.effective_state(*clos).expect("planned CLOS exists"),
                        };
                        let pairing = if occ.len() > 1 { cfg.pairing_penalty } else { T::one() };
                        for &w in occ {
                            charge(w, state, contention * pairing, warm, active[w], self.jitter[e as usize][w])?;
                        }
                    }
                }
            }
        }

        let workloads: Vec<WorkloadMetrics<T>> = s
            .workloads
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let affordable = if afford[i].is_finite() { afford[i] } else { T::zero() };
                WorkloadMetrics {
                    name: w.name.clone(),
                    affordable_load: affordable,
                    retainment: (affordable / w.sl_full()).min(T::one()),
                    slo_violations: violations[i],
                    quanta_received: received[i],
                    admitted: self.admitted[i],
                }
            })
            .collect();
        let overhead_fraction = if active_sum > 0 { warm_sum / T::from_u64(active_sum).unwrap() } else { T::zero() };
        Ok(Metrics {
            policy: s.policy,
            total_retainment: workloads.iter().fold(T::zero(), |a, w| a + w.retainment),
            workloads,
            migrations,
            overhead_fraction,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Affordable<T> {
    /// Largest uniform load multiplier with no violations.
    pub multiplier: T,
    /// Metrics at that multiplier; per-workload affordable load is
    /// `multiplier * offered_load`.
    pub metrics: Metrics<T>,
}

/// Binary search on a uniform multiplier over every workload's offered load.
pub fn max_affordable_load<T: Scalar>(s: &Scenario<T>) -> Result<Affordable<T>> {
    s.validate()?;
    if s.workloads.iter().all(|w| w.offered_load == T::zero()) {
        return Err(Error::InvalidScenario("every offered load is zero".into()));
    }
    let engine = Engine::new(s)?;
    let violations = |m: T| engine.run(m, |_, _| {}).map(|r| r.violations());
    if violations(T::zero())? > 0 {
        return Err(Error::Infeasible("SLO violations even at zero load".into()));
    }
    let tol = T::lit(LOAD_SEARCH_TOLERANCE);
    let two = T::lit(2.0);
    let (mut lo, mut hi) = (T::zero(), T::one());
    let mut doublings = 0;
    while violations(hi)? == 0 {
        lo = hi;
        hi = hi * two;
        doublings += 1;
        if doublings > 60 {
            return Err(Error::Infeasible("affordable load is unbounded".into()));
        }
    }
    for _ in 0..200 {
        if hi - lo <= tol * hi {
            break;
        }
        let mid = (lo + hi) / two;
        if violations(mid)? == 0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut metrics = engine.run(lo, |_, _| {})?;
    for (m, w) in metrics.workloads.iter_mut().zip(&s.workloads) {
        m.affordable_load = if m.admitted { lo * w.offered_load } else { T::zero() };
        m.retainment = (m.affordable_load / w.sl_full()).min(T::one());
    }
    metrics.total_retainment = metrics.workloads.iter().fold(T::zero(), |a, w| a + w.retainment);
    Ok(Affordable { multiplier: lo, metrics })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PolicyRow<T> {
    pub policy: Policy,
    pub multiplier: T,
    pub metrics: Metrics<T>,
    /// Total retainment relative to NoPartition.
    pub ratio: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Comparison<T> {
    pub rows: Vec<PolicyRow<T>>,
    pub baseline_total: T,
}

impl<T: Scalar> Comparison<T> {
    pub fn row(&self, policy: Policy) -> Option<&PolicyRow<T>> {
        self.rows.iter().find(|r| r.policy == policy)
    }
}

/// Runs [`max_affordable_load`] for every policy on otherwise identical scenarios.
pub fn compare_policies<T: Scalar>(base: &Scenario<T>, policies: &[Policy]) -> Result<Comparison<T>> {
    if policies.is_empty() {
        return Err(Error::Domain("no policies to compare".into()));
    }
    let mut rows = Vec::with_capacity(policies.len());
    for &p in policies {
        if rows.iter().any(|r: &PolicyRow<T>| r.policy == p) {
            continue;
        }
        let a = max_affordable_load(&base.with_policy(p))?;
        rows.push(PolicyRow { policy: p, multiplier: a.multiplier, metrics: a.metrics, ratio: T::nan() });
    }
    let baseline_total = match rows.iter().find(|r| r.policy == Policy::NoPartition) {
        Some(r) => r.metrics.total_retainment,
        None => max_affordable_load(&base.with_policy(Policy::NoPartition))?.metrics.total_retainment,
    };
    for r in &mut rows {
        r.ratio = r.metrics.total_retainment / baseline_total;
    }
    Ok(Comparison { rows, baseline_total })
}

/// Two instances each of memcached, nginx and mongodb on the reference server,
/// profiled from the measured retainment table. Each instance is offered its
/// full-allocation sustainable load (the application's load split evenly).
pub fn reference_scenario<T: Scalar>() -> Scenario<T> {
    let machine = MachineSpec::REFERENCE;
    let apps = [
        (ReferenceApp::Memcached, 120_000.0, 1.0),
        (ReferenceApp::Nginx, 45_000.0, 10.0),
        (ReferenceApp::Mongodb, 18_000.0, 20.0),
    ];
    let mut workloads = Vec::new();
    for (app, sl_full, bound_ms) in apps {
        let profile = calibrated_profile(app, &machine, T::lit(sl_full)).expect("reference machine is calibrated");
        for suffix in ["a", "b"] {
            let slo = SloSpec::new(T::lit(0.99), T::lit(bound_ms)).expect("valid SLO");
            workloads.push(
                WorkloadSpec::new(format!("{app}-{suffix}"), slo, profile.clone(), T::lit(sl_full))
                    .expect("valid workload"),
            );
        }
    }
    Scenario::new(machine, workloads, Policy::Coco)
}
