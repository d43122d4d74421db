//! CLOS configuration: capacity bit-masks, MBA throttles, validation and
//! reconfiguration planning.
//!
//! Masks are contiguous runs of set bits. MBA percentages are treated as shares
//! of the memory bandwidth that sum to at most 100.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::apportion::largest_remainder;
use crate::error::{Error, Result};
use crate::sensitivity::{AllocationState, MachineSpec};

/// LLC capacity bit-mask; bit `i` grants access to way `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CapacityMask(pub u64);

impl CapacityMask {
    /// `width` contiguous ways starting at way `first`.
    pub fn contiguous(first: u32, width: u32) -> Self {
        if width == 0 {
            return CapacityMask(0);
        }
        let run = if width >= 64 { u64::MAX } else { (1u64 << width) - 1 };
        CapacityMask(run << first)
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn width(self) -> u32 {
        self.0.count_ones()
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_contiguous(self) -> bool {
        if self.0 == 0 {
            return false;
        }
        let shifted = self.0 >> self.0.trailing_zeros();
        shifted & shifted.wrapping_add(1) == 0
    }

    pub fn overlaps(self, other: CapacityMask) -> bool {
        self.0 & other.0 != 0
    }

    /// Highest way index plus one.
    pub fn span(self) -> u32 {
        64 - self.0.leading_zeros()
    }
}

impl fmt::LowerHex for CapacityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::LowerHex::fmt(&self.0, f)
    }
}

impl fmt::Display for CapacityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosConfig {
    pub id: u8,
    pub mask: CapacityMask,
    pub mba_percent: u32,
}

impl ClosConfig {
    pub fn new(id: u8, mask: CapacityMask, mba_percent: u32) -> Self {
        ClosConfig { id, mask, mba_percent }
    }

    pub fn state(&self) -> AllocationState {
        AllocationState::new(self.mask.width(), self.mba_percent)
    }

    /// Checks the per-CLOS invariants against `machine`.
    pub fn violations(&self, machine: &MachineSpec) -> Vec<Violation> {
        let mut v = Vec::new();
        if self.mask.is_empty() {
            v.push(Violation::ZeroMask(self.id));
        } else {
            if !self.mask.is_contiguous() {
                v.push(Violation::NonContiguous(self.id));
            }
            if self.mask.span() > machine.llc_ways {
                v.push(Violation::MaskOutOfRange(self.id));
            }
        }
        if !(machine.mba_step..=100).contains(&self.mba_percent) {
            v.push(Violation::MbaOutOfRange(self.id, self.mba_percent));
        } else if !self.mba_percent.is_multiple_of(machine.mba_step) {
            v.push(Violation::MbaNotMultiple(self.id, self.mba_percent));
        }
        v
    }
}

/// A broken [`ClosSet`] invariant, naming the CLOS(s) involved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    WrongCount { expected: u32, got: usize },
    DuplicateId(u8),
    IdOutOfRange(u8),
    ZeroMask(u8),
    NonContiguous(u8),
    MaskOutOfRange(u8),
    Overlap(u8, u8),
    MbaOutOfRange(u8, u32),
    MbaNotMultiple(u8, u32),
    MbaOversubscribed(u32),
    ReservedMissing(u8),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::WrongCount { expected, got } => write!(f, "expected {expected} CLOS configs, got {got}"),
            Violation::DuplicateId(id) => write!(f, "duplicate id: clos {id}"),
            Violation::IdOutOfRange(id) => write!(f, "id out of range: clos {id}"),
            Violation::ZeroMask(id) => write!(f, "zero mask: clos {id}"),
            Violation::NonContiguous(id) => write!(f, "non-contiguous mask: clos {id}"),
            Violation::MaskOutOfRange(id) => write!(f, "mask exceeds the LLC: clos {id}"),
            Violation::Overlap(a, b) => write!(f, "overlap: clos {a}, clos {b}"),
            Violation::MbaOutOfRange(id, p) => write!(f, "MBA {p}% out of range: clos {id}"),
            Violation::MbaNotMultiple(id, p) => write!(f, "MBA {p}% not a multiple of the step: clos {id}"),
            Violation::MbaOversubscribed(total) => write!(f, "MBA shares sum to {total}% > 100%"),
            Violation::ReservedMissing(id) => write!(f, "reserved clos {id} is not configured"),
        }
    }
}

/// Every CLOS of one socket. `reserved_id` hosts background jobs and the
/// scheduler itself; the rest run latency-critical workloads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosSet {
    pub machine: MachineSpec,
    pub configs: Vec<ClosConfig>,
    pub reserved_id: u8,
}

impl ClosSet {
    /// Builds a set and rejects it unless every invariant holds.
    pub fn new(machine: MachineSpec, mut configs: Vec<ClosConfig>, reserved_id: u8) -> Result<Self> {
        configs.sort_by_key(|c| c.id);
        let set = ClosSet { machine, configs, reserved_id };
        validate(&set)
            .map_err(|v| Error::InvalidClosSet(v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")))?;
        Ok(set)
    }

    pub fn config(&self, id: u8) -> Option<&ClosConfig> {
        self.configs.iter().find(|c| c.id == id)
    }

    pub fn reserved(&self) -> Option<&ClosConfig> {
        self.config(self.reserved_id)
    }

    /// CLOSs available to latency-critical workloads, in id order.
    pub fn lc_configs(&self) -> impl Iterator<Item = &ClosConfig> {
        self.configs.iter().filter(move |c| c.id != self.reserved_id)
    }

    pub fn used_ways(&self) -> u32 {
        self.configs.iter().map(|c| c.mask.width()).sum()
    }

    pub fn free_ways(&self) -> u32 {
        self.machine.llc_ways.saturating_sub(self.used_ways())
    }

    /// Pairs `(a, b)` where CLOS `a` has more ways but less bandwidth than `b`.
    pub fn opposed_pairs(&self) -> Vec<(u8, u8)> {
        let mut out = Vec::new();
        for a in &self.configs {
            for b in &self.configs {
                if a.mask.width() > b.mask.width() && a.mba_percent < b.mba_percent {
                    out.push((a.id, b.id));
                }
            }
        }
        out
    }

    /// State a CLOS can actually exploit. When a wider CLOS is throttled below a
    /// narrower one, the throttle also limits traffic to its extra cache ways, so
    /// its usable ways are capped at the narrowest width among CLOSs that get
    /// strictly more bandwidth.
    pub fn effective_state(&self, id: u8) -> Option<AllocationState> {
        let c = self.config(id)?;
        let cap = self
            .configs
            .iter()
            .filter(|o| o.id != id && o.mba_percent > c.mba_percent)
            .map(|o| o.mask.width())
            .min()
            .unwrap_or(u32::MAX);
        Some(AllocationState::new(c.mask.width().min(cap).max(1), c.mba_percent))
    }

    /// Same masks, with LC bandwidth shares handed out in the opposite order of
    /// mask width: the widest CLOS gets the smallest share.
    pub fn with_opposed_mba(&self) -> ClosSet {
        let mut lc: Vec<ClosConfig> = self.lc_configs().copied().collect();
        let mut shares: Vec<u32> = lc.iter().map(|c| c.mba_percent).collect();
        shares.sort_unstable_by(|a, b| b.cmp(a));
        lc.sort_by_key(|c| (c.mask.width(), c.id));
        let remapped: BTreeMap<u8, u32> = lc.iter().zip(shares).map(|(c, s)| (c.id, s)).collect();
        let mut out = self.clone();
        for c in &mut out.configs {
            if let Some(s) = remapped.get(&c.id) {
                c.mba_percent = *s;
            }
        }
        out
    }
}

/// Reports every broken invariant of `set`, or `Ok` when there are none.
pub fn validate(set: &ClosSet) -> std::result::Result<(), Vec<Violation>> {
    let m = &set.machine;
    let mut v = Vec::new();
    if set.configs.len() != m.clos_count as usize {
        v.push(Violation::WrongCount { expected: m.clos_count, got: set.configs.len() });
    }
    let mut seen = BTreeMap::new();
    for c in &set.configs {
        if u32::from(c.id) >= m.clos_count {
            v.push(Violation::IdOutOfRange(c.id));
        }
        if seen.insert(c.id, ()).is_some() {
            v.push(Violation::DuplicateId(c.id));
        }
        v.extend(c.violations(m));
    }
    for (i, a) in set.configs.iter().enumerate() {
        for b in &set.configs[i + 1..] {
            if a.mask.overlaps(b.mask) {
                v.push(Violation::Overlap(a.id.min(b.id), a.id.max(b.id)));
            }
        }
    }
    let total: u32 = set.configs.iter().map(|c| c.mba_percent).sum();
    if total > 100 {
        v.push(Violation::MbaOversubscribed(total));
    }
    if set.reserved().is_none() {
        v.push(Violation::ReservedMissing(set.reserved_id));
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

/// Partition used for the colocation experiments, scaled to `machine`.
///
/// CLOS0 is reserved and keeps two ways (one if the machine is too narrow) and
/// one 10% bandwidth step. LC CLOS `k` (1-based) receives ways in ratio `k` and
/// bandwidth in ratio `2k - 1`, split by largest remainder with at least one
/// way and one MBA step each. Masks are packed upward from bit 0 in id order.
/// On the 20-way, 4-CLOS, 10%-step machine this yields widths {2, 3, 6, 9} and
/// MBA {10, 10, 30, 50}.
pub fn default_partition(machine: &MachineSpec) -> Result<ClosSet> {
    machine.validate()?;
    let k = machine.clos_count;
    let lc = k - 1;
    let units = 100 / machine.mba_step;
    let reserved_units = (10 / machine.mba_step).max(1);
    if units < reserved_units + lc {
        return Err(Error::InvalidMachine(format!("{units} MBA steps cannot give {k} CLOSs one step each")));
    }
    let reserved_ways = 2.min(machine.llc_ways - lc);
    let way_weights: Vec<f64> = (1..=lc).map(f64::from).collect();
    let mba_weights: Vec<f64> = (1..=lc).map(|i| f64::from(2 * i - 1)).collect();
    let widths = largest_remainder(&way_weights, machine.llc_ways - reserved_ways, 1)
        .ok_or_else(|| Error::InvalidMachine("not enough ways".into()))?;
    let shares = largest_remainder(&mba_weights, units - reserved_units, 1)
        .ok_or_else(|| Error::InvalidMachine("not enough MBA steps".into()))?;

    let mut configs =
        vec![ClosConfig::new(0, CapacityMask::contiguous(0, reserved_ways), reserved_units * machine.mba_step)];
    let mut next = reserved_ways;
    for (i, (w, s)) in widths.iter().zip(&shares).enumerate() {
        configs.push(ClosConfig::new((i + 1) as u8, CapacityMask::contiguous(next, *w), s * machine.mba_step));
        next += w;
    }
    ClosSet::new(*machine, configs, 0)
}

/// Change to one CLOS between two configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrationEvent {
    pub clos_id: u8,
    /// Ways gained (positive) or lost.
    pub delta_ways: i32,
    pub delta_mba: i32,
    /// Lines in the changed cache space must be flushed before the new owner can use it.
    pub flush_required: bool,
    /// Ways and bandwidth move in opposite directions.
    pub conflict: bool,
}

impl MigrationEvent {
    /// A different workload takes over an unchanged CLOS.
    pub fn ownership_change(clos_id: u8) -> Self {
        MigrationEvent { clos_id, delta_ways: 0, delta_mba: 0, flush_required: true, conflict: false }
    }
}

impl fmt::Display for MigrationEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "clos {}: {:+} ways, {:+}% MBA", self.clos_id, self.delta_ways, self.delta_mba)?;
        if self.flush_required {
            f.write_str(", flush")?;
        }
        if self.conflict {
            f.write_str(", conflict: CAT/MBA opposed")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReconfigPlan {
    pub events: Vec<MigrationEvent>,
    /// False when any CLOS's ways and bandwidth move in opposite directions.
    pub valid: bool,
}

impl ReconfigPlan {
    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn conflicts(&self) -> impl Iterator<Item = &MigrationEvent> {
        self.events.iter().filter(|e| e.conflict)
    }

    pub fn flushes(&self) -> impl Iterator<Item = &MigrationEvent> {
        self.events.iter().filter(|e| e.flush_required)
    }
}

/// Plans the move from `old` to `new`. CAT and MBA must grow or shrink
/// together; opposed moves are flagged and mark the plan invalid rather than
/// failing, so callers can still execute a conflicting configuration.
pub fn diff(old: &ClosSet, new: &ClosSet) -> Result<ReconfigPlan> {
    if old.machine != new.machine {
        return Err(Error::Domain("cannot diff CLOS sets of different machines".into()));
    }
    let mut events = Vec::new();
    for n in &new.configs {
        let o = old.config(n.id).copied().unwrap_or(ClosConfig::new(n.id, CapacityMask(0), 0));
        if o.mask == n.mask && o.mba_percent == n.mba_percent {
            continue;
        }
        let delta_ways = n.mask.width() as i32 - o.mask.width() as i32;
        let delta_mba = n.mba_percent as i32 - o.mba_percent as i32;
        events.push(MigrationEvent {
            clos_id: n.id,
            delta_ways,
            delta_mba,
            flush_required: o.mask != n.mask,
            conflict: delta_ways.signum() * delta_mba.signum() < 0,
        });
    }
    for o in &old.configs {
        if new.config(o.id).is_none() {
            let delta_ways = -(o.mask.width() as i32);
            let delta_mba = -(o.mba_percent as i32);
            events.push(MigrationEvent {
                clos_id: o.id,
                delta_ways,
                delta_mba,
                flush_required: !o.mask.is_empty(),
                conflict: false,
            });
        }
    }
    events.sort_by_key(|e| e.clos_id);
    let valid = events.iter().all(|e| !e.conflict);
    Ok(ReconfigPlan { events, valid })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference() -> ClosSet {
        default_partition(&MachineSpec::REFERENCE).unwrap()
    }

    #[test]
    fn mask_helpers() {
        assert_eq!(CapacityMask::contiguous(2, 3).bits(), 0x1c);
        assert!(CapacityMask(0b111).is_contiguous());
        assert!(!CapacityMask(0b101).is_contiguous());
        assert!(!CapacityMask(0).is_contiguous());
        assert_eq!(CapacityMask(0xff800).span(), 20);
        assert_eq!(CapacityMask::contiguous(0, 64).bits(), u64::MAX);
        assert_eq!(format!("{:x}", CapacityMask(0xff800)), "ff800");
    }

    #[test]
    fn reference_partition() {
        let set = reference();
        let widths: Vec<u32> = set.configs.iter().map(|c| c.mask.width()).collect();
        let mba: Vec<u32> = set.configs.iter().map(|c| c.mba_percent).collect();
        let masks: Vec<u64> = set.configs.iter().map(|c| c.mask.bits()).collect();
        assert_eq!(widths, vec![2, 3, 6, 9]);
        assert_eq!(mba, vec![10, 10, 30, 50]);
        assert_eq!(masks, vec![0x3, 0x1c, 0x7e0, 0xff800]);
        assert_eq!(set.reserved_id, 0);
        assert_eq!(validate(&set), Ok(()));
        assert!(set.opposed_pairs().is_empty());
    }

    #[test]
    fn small_machine_partition() {
        let set = default_partition(&MachineSpec::new(10, 2, 10).unwrap()).unwrap();
        let widths: Vec<u32> = set.configs.iter().map(|c| c.mask.width()).collect();
        assert_eq!(widths, vec![2, 8]);
        let tight = default_partition(&MachineSpec::new(4, 4, 10).unwrap()).unwrap();
        assert!(tight.configs.iter().all(|c| c.mask.width() == 1));
        assert!(default_partition(&MachineSpec::new(20, 4, 50).unwrap()).is_err());
    }

    #[test]
    fn validate_reports_overlap_and_shape() {
        let m = MachineSpec::new(8, 3, 10).unwrap();
        let set = ClosSet {
            machine: m,
            configs: vec![
                ClosConfig::new(0, CapacityMask(0b1), 10),
                ClosConfig::new(1, CapacityMask(0b1110), 20),
                ClosConfig::new(2, CapacityMask(0b1000), 20),
            ],
            reserved_id: 0,
        };
        let v = validate(&set).unwrap_err();
        assert_eq!(v, vec![Violation::Overlap(1, 2)]);
        assert_eq!(v[0].to_string(), "overlap: clos 1, clos 2");

        let set = ClosSet {
            machine: m,
            configs: vec![
                ClosConfig::new(0, CapacityMask(0b1), 10),
                ClosConfig::new(1, CapacityMask(0b101 << 1), 25),
                ClosConfig::new(2, CapacityMask(0), 80),
            ],
            reserved_id: 3,
        };
        let v = validate(&set).unwrap_err();
        assert!(v.contains(&Violation::NonContiguous(1)));
        assert!(v.contains(&Violation::MbaNotMultiple(1, 25)));
        assert!(v.contains(&Violation::ZeroMask(2)));
        assert!(v.contains(&Violation::MbaOversubscribed(115)));
        assert!(v.contains(&Violation::ReservedMissing(3)));
        assert!(v.iter().any(|x| x.to_string().starts_with("non-contiguous mask")));
    }

    #[test]
    fn diff_identical_is_empty() {
        let plan = diff(&reference(), &reference()).unwrap();
        assert!(plan.is_empty());
        assert!(plan.valid);
    }

    fn tweak(set: &ClosSet, f: impl Fn(&mut Vec<ClosConfig>)) -> ClosSet {
        let mut s = set.clone();
        f(&mut s.configs);
        s
    }

    #[test]
    fn diff_monotone_moves() {
        // CLOS2 grows by two ways and 10%; CLOS3 shrinks by the same.
        let new = tweak(&reference(), |c| {
            c[2] = ClosConfig::new(2, CapacityMask::contiguous(5, 8), 40);
            c[3] = ClosConfig::new(3, CapacityMask::contiguous(13, 7), 40);
        });
        assert_eq!(validate(&new), Ok(()));
        let plan = diff(&reference(), &new).unwrap();
        assert_eq!(plan.events.len(), 2);
        assert!(plan.valid);
        assert!(plan.events.iter().all(|e| e.flush_required && !e.conflict));
        assert_eq!((plan.events[0].delta_ways, plan.events[0].delta_mba), (2, 10));
        assert_eq!((plan.events[1].delta_ways, plan.events[1].delta_mba), (-2, -10));
    }

    #[test]
    fn diff_flags_opposed_moves() {
        let new = tweak(&reference(), |c| {
            c[2] = ClosConfig::new(2, CapacityMask::contiguous(5, 8), 20);
            c[3] = ClosConfig::new(3, CapacityMask::contiguous(13, 7), 50);
        });
        let plan = diff(&reference(), &new).unwrap();
        assert!(!plan.valid);
        let flagged: Vec<_> = plan.conflicts().collect();
        assert_eq!(flagged.len(), 1);
        assert_eq!(flagged[0].clos_id, 2);
        assert!(flagged[0].to_string().contains("conflict: CAT/MBA opposed"));
    }

    #[test]
    fn diff_rejects_other_machine() {
        let other = default_partition(&MachineSpec::new(10, 2, 10).unwrap()).unwrap();
        assert!(diff(&reference(), &other).is_err());
    }

    #[test]
    fn opposed_partition_cancels_extra_ways() {
        let set = reference().with_opposed_mba();
        let mba: Vec<u32> = set.configs.iter().map(|c| c.mba_percent).collect();
        assert_eq!(mba, vec![10, 50, 30, 10]);
        assert_eq!(set.effective_state(3), Some(AllocationState::new(3, 10)));
        assert_eq!(set.effective_state(2), Some(AllocationState::new(3, 30)));
        assert_eq!(set.effective_state(1), Some(AllocationState::new(3, 50)));
        assert!(set.opposed_pairs().contains(&(3, 1)));
        let plain = reference();
        for id in 1..4 {
            assert_eq!(plain.effective_state(id), Some(plain.config(id).unwrap().state()));
        }
    }
}
