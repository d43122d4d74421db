//! Multi-level queue weighted round-robin (MQ-WRR) over the latency-critical CLOSs.
//!
//! Every LC CLOS owns a wait queue. Workloads are ranked by slowdown-derived
//! weight and dealt onto the CLOSs widest-first, so the most sensitive
//! workloads land on the largest partitions. Each epoch of `epoch_quanta`
//! scheduling quanta is then split inside every CLOS in proportion to the
//! members' slowdowns at that CLOS, with at least one quantum per member.
//! Adjacent members that stress different resources may share a CLOS
//! concurrently as a two-member working set.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::apportion::largest_remainder;
use crate::clos::ClosSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sensitivity::{weights_of, AllocationState, Dominance, WorkloadSpec};

/// Admission headroom kept for context switches and cache refills.
pub const DEFAULT_OVERHEAD_MARGIN: f64 = 0.05;
/// Throughput penalty for each member of a two-workload working set.
pub const DEFAULT_PAIRING_PENALTY: f64 = 1.05;

/// An LC CLOS as the planner sees it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LcClos {
    pub clos_id: u8,
    /// Mask width used to rank CLOSs.
    pub width: u32,
    /// State used to evaluate slowdowns on this CLOS.
    pub state: AllocationState,
}

/// LC CLOSs of `set`, widest first (ties by id).
pub fn lc_clos_view(set: &ClosSet) -> Vec<LcClos> {
    let mut v: Vec<LcClos> =
        set.lc_configs().map(|c| LcClos { clos_id: c.id, width: c.mask.width(), state: c.state() }).collect();
    sort_widest_first(&mut v);
    v
}

fn sort_widest_first(v: &mut [LcClos]) {
    v.sort_by(|a, b| b.width.cmp(&a.width).then(a.clos_id.cmp(&b.clos_id)));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanOptions {
    pub pairing: bool,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions { pairing: true }
    }
}

/// A run of consecutive quanta on one CLOS; two members run concurrently.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub members: Vec<String>,
    pub quanta: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueState {
    pub clos_id: u8,
    pub state: AllocationState,
    /// Members waiting behind the working set, in service order.
    pub wait_queue: Vec<String>,
    /// Members running at the start of the epoch.
    pub working_set: Vec<String>,
    /// Service order for the epoch.
    pub slots: Vec<Slot>,
}

impl QueueState {
    pub fn members(&self) -> impl Iterator<Item = &String> {
        self.slots.iter().flat_map(|s| s.members.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSlice {
    pub workload: String,
    pub clos_id: u8,
    /// Quanta apportioned to this workload.
    pub quanta: u32,
    /// Quanta during which it runs; includes its partner's share when paired.
    pub active_quanta: u32,
    pub paired_with: Option<String>,
}

/// One epoch of the schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EpochPlan<T> {
    /// One queue per LC CLOS, widest first.
    pub queues: Vec<QueueState>,
    pub slices: Vec<TimeSlice>,
    /// Global weights from the common reference state, in input order.
    pub weights: Vec<(String, T)>,
    pub epoch_quanta: u32,
}

impl<T: Scalar> EpochPlan<T> {
    pub fn slice(&self, workload: &str) -> Option<&TimeSlice> {
        self.slices.iter().find(|s| s.workload == workload)
    }

    pub fn queue(&self, clos_id: u8) -> Option<&QueueState> {
        self.queues.iter().find(|q| q.clos_id == clos_id)
    }

    /// Sum of apportioned quanta on `clos_id`.
    pub fn clos_quanta(&self, clos_id: u8) -> u32 {
        self.slices.iter().filter(|s| s.clos_id == clos_id).map(|s| s.quanta).sum()
    }

    /// Fraction of the epoch `workload` spends running.
    pub fn share(&self, workload: &str) -> Option<T> {
        self.slice(workload).map(|s| T::from_count(s.active_quanta) / T::from_count(self.epoch_quanta))
    }

    pub fn weight(&self, workload: &str) -> Option<T> {
        self.weights.iter().find(|(n, _)| n == workload).map(|(_, w)| *w)
    }

    /// Quanta multiset per CLOS, sorted, keyed by CLOS position.
    pub fn slice_multisets(&self) -> Vec<Vec<u32>> {
        self.queues
            .iter()
            .map(|q| {
                let mut v: Vec<u32> = self.slices.iter().filter(|s| s.clos_id == q.clos_id).map(|s| s.quanta).collect();
                v.sort_unstable();
                v
            })
            .collect()
    }
}

/// True iff one workload is LLC-dominant and the other bandwidth-dominant.
pub fn pair_compatible<T>(a: &WorkloadSpec<T>, b: &WorkloadSpec<T>) -> bool {
    matches!(
        (a.dominance, b.dominance),
        (Dominance::LlcDominant, Dominance::MbDominant) | (Dominance::MbDominant, Dominance::LlcDominant)
    )
}

fn check_inputs<T: Scalar>(workloads: &[WorkloadSpec<T>], clos: &[LcClos]) -> Result<()> {
    if clos.is_empty() {
        return Err(Error::Domain("no latency-critical CLOS to schedule on".into()));
    }
    let mut names = BTreeSet::new();
    for w in workloads {
        w.validate()?;
        if !names.insert(w.name.as_str()) {
            return Err(Error::Domain(format!("duplicate workload name {:?}", w.name)));
        }
    }
    Ok(())
}

/// The CLOS state at which global weights are evaluated: the smallest LC CLOS.
pub fn reference_state(clos: &[LcClos]) -> Option<AllocationState> {
    clos.iter().min_by_key(|c| (c.width, c.state.mba_percent, c.clos_id)).map(|c| c.state)
}

/// Global weights at the reference state, in input order.
pub fn reference_weights<T: Scalar>(workloads: &[WorkloadSpec<T>], clos: &[LcClos]) -> Result<Vec<T>> {
    let reference = reference_state(clos).ok_or_else(|| Error::Domain("no LC CLOS".into()))?;
    let slowdowns = workloads.iter().map(|w| w.profile.slowdown_at(reference)).collect::<Result<Vec<T>>>()?;
    weights_of(&slowdowns)
}

/// Builds queues from the dealt membership and apportions each CLOS's epoch.
fn assemble<T: Scalar>(
    workloads: &[WorkloadSpec<T>],
    clos: &[LcClos],
    dealt: &[Vec<usize>],
    epoch_quanta: u32,
    weighted: bool,
    pairing: bool,
) -> Result<(Vec<QueueState>, Vec<TimeSlice>)> {
    let mut queues = Vec::with_capacity(clos.len());
    let mut slices = Vec::with_capacity(workloads.len());
    for (c, members) in clos.iter().zip(dealt) {
        if members.len() > epoch_quanta as usize {
            return Err(Error::EpochUnderflow { clos: c.clos_id, members: members.len(), epoch_quanta });
        }
        let local: Vec<T> = if weighted {
            members.iter().map(|&i| workloads[i].profile.slowdown_at(c.state)).collect::<Result<_>>()?
        } else {
            vec![T::one(); members.len()]
        };
        let quanta = largest_remainder(&local, epoch_quanta, 1).ok_or(Error::EpochUnderflow {
            clos: c.clos_id,
            members: members.len(),
            epoch_quanta,
        })?;
        let mut slots = Vec::new();
        let mut k = 0;
        while k < members.len() {
            let a = members[k];
            if pairing && k + 1 < members.len() && pair_compatible(&workloads[a], &workloads[members[k + 1]]) {
                let b = members[k + 1];
                let together = quanta[k] + quanta[k + 1];
                for (me, q, other) in [(a, quanta[k], b), (b, quanta[k + 1], a)] {
                    slices.push(TimeSlice {
                        workload: workloads[me].name.clone(),
                        clos_id: c.clos_id,
                        quanta: q,
                        active_quanta: together,
                        paired_with: Some(workloads[other].name.clone()),
                    });
                }
                slots.push(Slot {
                    members: vec![workloads[a].name.clone(), workloads[b].name.clone()],
                    quanta: together,
                });
                k += 2;
            } else {
                slices.push(TimeSlice {
                    workload: workloads[a].name.clone(),
                    clos_id: c.clos_id,
                    quanta: quanta[k],
                    active_quanta: quanta[k],
                    paired_with: None,
                });
                slots.push(Slot { members: vec![workloads[a].name.clone()], quanta: quanta[k] });
                k += 1;
            }
        }
        let working_set = slots.first().map(|s| s.members.clone()).unwrap_or_default();
        let wait_queue = slots.iter().skip(1).flat_map(|s| s.members.iter().cloned()).collect();
        queues.push(QueueState { clos_id: c.clos_id, state: c.state, wait_queue, working_set, slots });
    }
    Ok((queues, slices))
}

/// MQ-WRR plan over the LC CLOSs of `clos_set`.
pub fn plan_epoch<T: Scalar>(
    workloads: &[WorkloadSpec<T>],
    clos_set: &ClosSet,
    epoch_quanta: u32,
) -> Result<EpochPlan<T>> {
    plan_on(workloads, &lc_clos_view(clos_set), epoch_quanta, PlanOptions::default())
}

/// MQ-WRR plan over an explicit CLOS view.
pub fn plan_on<T: Scalar>(
    workloads: &[WorkloadSpec<T>],
    clos: &[LcClos],
    epoch_quanta: u32,
    opts: PlanOptions,
) -> Result<EpochPlan<T>> {
    check_inputs(workloads, clos)?;
    let mut clos = clos.to_vec();
    sort_widest_first(&mut clos);
    if workloads.is_empty() {
        return Ok(EpochPlan { queues: Vec::new(), slices: Vec::new(), weights: Vec::new(), epoch_quanta });
    }
    let weights = reference_weights(workloads, &clos)?;
    let mut order: Vec<usize> = (0..workloads.len()).collect();
    order.sort_by(|&a, &b| {
        weights[b].partial_cmp(&weights[a]).unwrap().then_with(|| workloads[a].name.cmp(&workloads[b].name))
    });
    let mut dealt = vec![Vec::new(); clos.len()];
    for (rank, &i) in order.iter().enumerate() {
        dealt[rank % clos.len()].push(i);
    }
    let (queues, slices) = assemble(workloads, &clos, &dealt, epoch_quanta, true, opts.pairing)?;
    Ok(EpochPlan {
        queues,
        slices,
        weights: workloads.iter().map(|w| w.name.clone()).zip(weights).collect(),
        epoch_quanta,
    })
}

/// Plain round-robin baseline: same queue layout, equal slices, no pairing,
/// and every workload moves to the next CLOS each epoch.
pub fn round_robin_plan<T: Scalar>(
    workloads: &[WorkloadSpec<T>],
    clos_set: &ClosSet,
    epoch_quanta: u32,
    epoch_index: u64,
) -> Result<EpochPlan<T>> {
    round_robin_on(workloads, &lc_clos_view(clos_set), epoch_quanta, epoch_index)
}

pub fn round_robin_on<T: Scalar>(
    workloads: &[WorkloadSpec<T>],
    clos: &[LcClos],
    epoch_quanta: u32,
    epoch_index: u64,
) -> Result<EpochPlan<T>> {
    check_inputs(workloads, clos)?;
    let mut clos = clos.to_vec();
    sort_widest_first(&mut clos);
    let mut order: Vec<usize> = (0..workloads.len()).collect();
    order.sort_by(|&a, &b| workloads[a].name.cmp(&workloads[b].name));
    let k = clos.len();
    let shift = (epoch_index % k as u64) as usize;
    let mut dealt = vec![Vec::new(); k];
    for (rank, &i) in order.iter().enumerate() {
        dealt[(rank + shift) % k].push(i);
    }
    let (queues, slices) = assemble(workloads, &clos, &dealt, epoch_quanta, false, false)?;
    let n = T::from_count(workloads.len().max(1) as u32);
    Ok(EpochPlan {
        queues,
        slices,
        weights: workloads.iter().map(|w| (w.name.clone(), T::one() / n)).collect(),
        epoch_quanta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AdmissionOptions<T> {
    pub overhead_margin: T,
    pub pairing_penalty: T,
    pub plan: PlanOptions,
}

impl<T: Scalar> Default for AdmissionOptions<T> {
    fn default() -> Self {
        AdmissionOptions {
            overhead_margin: T::lit(DEFAULT_OVERHEAD_MARGIN),
            pairing_penalty: T::lit(DEFAULT_PAIRING_PENALTY),
            plan: PlanOptions::default(),
        }
    }
}

/// Load `workload` can sustain under `plan`, after the admission margin.
pub fn achievable_load<T: Scalar>(
    plan: &EpochPlan<T>,
    workload: &WorkloadSpec<T>,
    opts: &AdmissionOptions<T>,
) -> Result<T> {
    let slice =
        plan.slice(&workload.name).ok_or_else(|| Error::Domain(format!("{} is not in the plan", workload.name)))?;
    let queue = plan.queue(slice.clos_id).expect("slice refers to a planned queue");
    let mut slowdown = workload.profile.slowdown_at(queue.state)?;
    if slice.paired_with.is_some() {
        slowdown = slowdown * opts.pairing_penalty;
    }
    let share = T::from_count(slice.active_quanta) / T::from_count(plan.epoch_quanta);
    Ok(share * workload.sl_full() / slowdown * (T::one() - opts.overhead_margin))
}

/// Workloads whose offered load exceeds what `plan` lets them sustain, with
/// the ratio offered / achievable.
pub fn infeasible<T: Scalar>(
    plan: &EpochPlan<T>,
    workloads: &[WorkloadSpec<T>],
    opts: &AdmissionOptions<T>,
) -> Result<Vec<(usize, T)>> {
    let mut out = Vec::new();
    for (i, w) in workloads.iter().enumerate() {
        let achievable = achievable_load(plan, w, opts)?;
        if w.offered_load > achievable {
            let ratio = if achievable > T::zero() { w.offered_load / achievable } else { T::infinity() };
            out.push((i, ratio));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Admission<T> {
    pub admitted: Vec<String>,
    /// In eviction order.
    pub rejected: Vec<String>,
    /// Plan for the admitted set; `None` when nothing was admitted.
    pub plan: Option<EpochPlan<T>>,
}

/// Evicts workloads until every remaining one is feasible under its time share.
pub fn admission_control<T: Scalar>(
    workloads: &[WorkloadSpec<T>],
    clos_set: &ClosSet,
    epoch_quanta: u32,
) -> Result<Admission<T>> {
    admission_on(workloads, &lc_clos_view(clos_set), epoch_quanta, &AdmissionOptions::default())
}

/// Admission against an explicit CLOS view. Each round plans the candidates;
/// if any is infeasible the one with the largest offered/achievable ratio is
/// evicted (ties: smaller weight, then later name).
pub fn admission_on<T: Scalar>(
    workloads: &[WorkloadSpec<T>],
    clos: &[LcClos],
    epoch_quanta: u32,
    opts: &AdmissionOptions<T>,
) -> Result<Admission<T>> {
    check_inputs(workloads, clos)?;
    let mut candidates: Vec<WorkloadSpec<T>> = workloads.to_vec();
    let mut rejected = Vec::new();
    loop {
        if candidates.is_empty() {
            return Ok(Admission { admitted: Vec::new(), rejected, plan: None });
        }
        let weights = reference_weights(&candidates, clos)?;
        let by_eviction_priority = |a: &(usize, T), b: &(usize, T)| {
            a.1.partial_cmp(&b.1)
                .unwrap()
                .then(weights[b.0].partial_cmp(&weights[a.0]).unwrap())
                .then(candidates[a.0].name.cmp(&candidates[b.0].name))
        };
        let victim = match plan_on(&candidates, clos, epoch_quanta, opts.plan) {
            Ok(plan) => {
                let bad = infeasible(&plan, &candidates, opts)?;
                match bad.into_iter().max_by(by_eviction_priority) {
                    Some((i, _)) => i,
                    None => {
                        return Ok(Admission {
                            admitted: candidates.into_iter().map(|w| w.name).collect(),
                            rejected,
                            plan: Some(plan),
                        })
                    }
                }
            }
            Err(Error::EpochUnderflow { .. }) => {
                let all: Vec<(usize, T)> = (0..candidates.len()).map(|i| (i, T::zero())).collect();
                all.into_iter().max_by(by_eviction_priority).unwrap().0
            }
            Err(e) => return Err(e),
        };
        rejected.push(candidates.remove(victim).name);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clos::default_partition;
    use crate::sensitivity::{MachineSpec, SensitivityProfile, SloSpec};

    fn flat(name: &str, slowdown: f64, sl_full: f64, offered: f64) -> WorkloadSpec<f64> {
        let p = SensitivityProfile::new(vec![1, 20], vec![10, 100], vec![slowdown, slowdown, slowdown, 1.0], sl_full)
            .unwrap();
        WorkloadSpec::new(name, SloSpec::new(0.99, 10.0).unwrap(), p, offered).unwrap()
    }

    fn one_clos(width: u32) -> Vec<LcClos> {
        vec![LcClos { clos_id: 1, width, state: AllocationState::new(width, 50) }]
    }

    fn reference_set() -> ClosSet {
        default_partition(&MachineSpec::REFERENCE).unwrap()
    }

    #[test]
    fn single_workload_takes_the_widest_clos() {
        let plan = plan_epoch(&[flat("a", 2.0, 100.0, 1.0)], &reference_set(), 10).unwrap();
        let s = plan.slice("a").unwrap();
        assert_eq!(s.clos_id, 3);
        assert_eq!(s.quanta, 10);
        assert_eq!(plan.clos_quanta(3), 10);
        assert_eq!(plan.queue(3).unwrap().working_set, vec!["a".to_string()]);
    }

    #[test]
    fn equal_slowdowns_split_evenly_in_name_order() {
        let ws = [flat("c", 1.5, 1.0, 0.0), flat("a", 1.5, 1.0, 0.0), flat("b", 1.5, 1.0, 0.0)];
        let plan = plan_on(&ws, &one_clos(6), 9, PlanOptions::default()).unwrap();
        assert!(plan.slices.iter().all(|s| s.quanta == 3));
        let q = &plan.queues[0];
        assert_eq!(q.working_set, vec!["a"]);
        assert_eq!(q.wait_queue, vec!["b", "c"]);
    }

    #[test]
    fn slices_follow_slowdown() {
        let ws = [flat("memcached", 1.25, 1.0, 0.0), flat("nginx", 3.03, 1.0, 0.0)];
        let plan = plan_on(&ws, &one_clos(6), 10, PlanOptions::default()).unwrap();
        assert_eq!(plan.slice("nginx").unwrap().quanta, 7);
        assert_eq!(plan.slice("memcached").unwrap().quanta, 3);
        assert_eq!(plan.queues[0].working_set, vec!["nginx"]);
    }

    #[test]
    fn epoch_underflow() {
        let ws: Vec<_> = (0..4).map(|i| flat(&format!("w{i}"), 1.2, 1.0, 0.0)).collect();
        let err = plan_on(&ws, &one_clos(6), 3, PlanOptions::default()).unwrap_err();
        assert!(matches!(err, Error::EpochUnderflow { members: 4, .. }));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let ws = [flat("a", 1.2, 1.0, 0.0), flat("a", 1.3, 1.0, 0.0)];
        assert!(plan_on(&ws, &one_clos(6), 10, PlanOptions::default()).is_err());
    }

    #[test]
    fn compatibility_rule() {
        let llc = flat("l", 2.0, 1.0, 0.0).with_dominance(Dominance::LlcDominant);
        let mb = flat("m", 2.0, 1.0, 0.0).with_dominance(Dominance::MbDominant);
        let bal = flat("b", 2.0, 1.0, 0.0).with_dominance(Dominance::Balanced);
        assert!(pair_compatible(&llc, &mb));
        assert!(pair_compatible(&mb, &llc));
        assert!(!pair_compatible(&llc, &llc));
        assert!(!pair_compatible(&bal, &mb));
    }

    #[test]
    fn compatible_neighbours_share_a_slot() {
        let llc = flat("l", 2.0, 1.0, 0.0).with_dominance(Dominance::LlcDominant);
        let mb = flat("m", 1.5, 1.0, 0.0).with_dominance(Dominance::MbDominant);
        let plan = plan_on(&[llc.clone(), mb.clone()], &one_clos(6), 10, PlanOptions::default()).unwrap();
        let q = &plan.queues[0];
        assert_eq!(q.slots.len(), 1);
        assert_eq!(q.working_set, vec!["l", "m"]);
        assert!(q.wait_queue.is_empty());
        assert_eq!(plan.slice("m").unwrap().active_quanta, 10);
        assert_eq!(plan.clos_quanta(1), 10);
        let solo = plan_on(&[llc, mb], &one_clos(6), 10, PlanOptions { pairing: false }).unwrap();
        assert_eq!(solo.queues[0].slots.len(), 2);
    }

    #[test]
    fn round_robin_rotates() {
        let ws: Vec<_> = ["a", "b", "c", "d"].iter().map(|n| flat(n, 2.0, 1.0, 0.0)).collect();
        let set = default_partition(&MachineSpec::new(20, 3, 10).unwrap()).unwrap();
        let e0 = round_robin_plan(&ws, &set, 8, 0).unwrap();
        let e1 = round_robin_plan(&ws, &set, 8, 1).unwrap();
        assert!(e0.slices.iter().all(|s| s.quanta == 4));
        let order: Vec<u8> = lc_clos_view(&set).iter().map(|c| c.clos_id).collect();
        for s in &e0.slices {
            let k = order.iter().position(|c| *c == s.clos_id).unwrap();
            let next = e1.slice(&s.workload).unwrap().clos_id;
            assert_eq!(next, order[(k + 1) % order.len()]);
        }
    }

    #[test]
    fn admission_keeps_everyone_when_light() {
        let ws: Vec<_> = (0..6).map(|i| flat(&format!("w{i}"), 1.5, 1000.0, 10.0)).collect();
        let a = admission_control(&ws, &reference_set(), 20).unwrap();
        assert_eq!(a.admitted.len(), 6);
        assert!(a.rejected.is_empty());
    }

    #[test]
    fn admission_evicts_one_of_two_overloaded_twins() {
        // Both offered 0.6 of the CLOS's sustainable load at equal shares of 0.5.
        let sl_s = 1000.0 / 1.5;
        let ws = [flat("a", 1.5, 1000.0, 0.6 * sl_s), flat("b", 1.5, 1000.0, 0.6 * sl_s)];
        let opts = AdmissionOptions::default();
        let a = admission_on(&ws, &one_clos(6), 20, &opts).unwrap();
        assert_eq!(a.admitted, vec!["a"]);
        assert_eq!(a.rejected, vec!["b"]);
        let plan = a.plan.unwrap();
        assert_eq!(plan.share("a"), Some(1.0));
        assert!(infeasible(&plan, &ws[..1], &opts).unwrap().is_empty());
    }

    #[test]
    fn admission_of_nothing() {
        let a = admission_control::<f64>(&[], &reference_set(), 20).unwrap();
        assert!(a.admitted.is_empty() && a.rejected.is_empty() && a.plan.is_none());
    }

    #[test]
    fn admission_resolves_underflow() {
        let ws: Vec<_> = (0..5).map(|i| flat(&format!("w{i}"), 1.0 + i as f64 * 0.1, 1000.0, 0.0)).collect();
        let a = admission_on(&ws, &one_clos(6), 3, &AdmissionOptions::default()).unwrap();
        assert_eq!(a.admitted.len(), 3);
        assert_eq!(a.rejected, vec!["w0", "w1"]);
    }
}
