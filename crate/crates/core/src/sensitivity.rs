//! Allocation states, sensitivity profiles and the slowdown / weight arithmetic
//! everything else is built on.
//!
//! A workload's *slowdown* at an allocation state is the ratio of the load it can
//! sustain within its SLO at full allocation to the load it sustains at that state.
//! Profiles store slowdown over a rectilinear grid of (LLC ways, MBA percent)
//! points; off-grid states are bilinearly interpolated.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Hardware envelope of one socket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineSpec {
    /// LLC associativity, i.e. the width of a capacity bit-mask.
    pub llc_ways: u32,
    /// Number of hardware classes of service. One is reserved for background work.
    pub clos_count: u32,
    /// MBA granularity in percent.
    pub mba_step: u32,
    /// Peak memory bandwidth in bytes/sec. Informational only.
    #[serde(default)]
    pub max_bandwidth: u64,
    #[serde(default)]
    pub cores: u32,
}

impl MachineSpec {
    /// The evaluation server: 20-way LLC, 4 CLOSs, 10% MBA steps, 16 cores.
    pub const REFERENCE: MachineSpec =
        MachineSpec { llc_ways: 20, clos_count: 4, mba_step: 10, max_bandwidth: 0, cores: 16 };

    pub fn new(llc_ways: u32, clos_count: u32, mba_step: u32) -> Result<Self> {
        let m = MachineSpec { llc_ways, clos_count, mba_step, max_bandwidth: 0, cores: 0 };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clos_count < 2 {
            return Err(Error::InvalidMachine(format!(
                "clos_count {} < 2 (one CLOS is reserved for background work)",
                self.clos_count
            )));
        }
        if self.llc_ways > 64 {
            return Err(Error::InvalidMachine(format!("llc_ways {} exceeds the 64-bit mask limit", self.llc_ways)));
        }
        if self.llc_ways < self.clos_count {
            return Err(Error::InvalidMachine(format!("llc_ways {} < clos_count {}", self.llc_ways, self.clos_count)));
        }
        if self.mba_step == 0 || self.mba_step > 100 || 100 % self.mba_step != 0 {
            return Err(Error::InvalidMachine(format!("mba_step {} does not divide 100", self.mba_step)));
        }
        Ok(())
    }

    pub fn full_state(&self) -> AllocationState {
        AllocationState::new(self.llc_ways, 100)
    }

    /// Checks `state` against the machine's allocation envelope.
    pub fn check_state(&self, state: AllocationState) -> Result<()> {
        let ok = (1..=self.llc_ways).contains(&state.llc_ways)
            && (self.mba_step..=100).contains(&state.mba_percent)
            && state.mba_percent.is_multiple_of(self.mba_step);
        if ok {
            Ok(())
        } else {
            Err(Error::StateOutOfBounds(state))
        }
    }

    /// Rounds a percentage down to the MBA grid, never below one step.
    pub fn floor_mba(&self, percent: u32) -> u32 {
        (percent / self.mba_step * self.mba_step).clamp(self.mba_step, 100)
    }
}

/// LLC ways and MBA percent granted to a workload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AllocationState {
    pub llc_ways: u32,
    pub mba_percent: u32,
}

impl AllocationState {
    pub const fn new(llc_ways: u32, mba_percent: u32) -> Self {
        AllocationState { llc_ways, mba_percent }
    }

    /// Componentwise `<=`.
    pub fn le(&self, other: &AllocationState) -> bool {
        self.llc_ways <= other.llc_ways && self.mba_percent <= other.mba_percent
    }
}

impl fmt::Display for AllocationState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({} ways, {}%)", self.llc_ways, self.mba_percent)
    }
}

/// Tail-latency objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SloSpec<T> {
    /// Percentile in (0, 1), e.g. 0.99.
    pub percentile: T,
    pub latency_bound_ms: T,
}

impl<T: Scalar> SloSpec<T> {
    pub fn new(percentile: T, latency_bound_ms: T) -> Result<Self> {
        let slo = SloSpec { percentile, latency_bound_ms };
        slo.validate()?;
        Ok(slo)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.percentile > T::zero() && self.percentile < T::one()) {
            return Err(Error::Domain(format!("SLO percentile {} not in (0, 1)", self.percentile)));
        }
        if !(self.latency_bound_ms > T::zero()) || !self.latency_bound_ms.is_finite() {
            return Err(Error::Domain(format!("SLO latency bound {} ms must be positive", self.latency_bound_ms)));
        }
        Ok(())
    }
}

/// Which shared resource a workload's performance depends on most.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dominance {
    LlcDominant,
    MbDominant,
    Balanced,
}

impl fmt::Display for Dominance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dominance::LlcDominant => "llc_dominant",
            Dominance::MbDominant => "mb_dominant",
            Dominance::Balanced => "balanced",
        })
    }
}

/// Ratio one axis' endpoint slowdown must exceed the other's by to call a
/// workload dominated by that resource.
pub const DOMINANCE_THRESHOLD: f64 = 1.5;

/// Slowdown over a rectilinear (ways x MBA) grid.
///
/// The last ways point is the machine's full LLC and the last MBA point is 100%;
/// slowdown there is exactly one. Values are at least one everywhere and
/// non-increasing along both axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProfileDoc<T>", into = "ProfileDoc<T>")]
#[serde(bound = "T: Scalar")]
pub struct SensitivityProfile<T> {
    ways: Vec<u32>,
    mba: Vec<u32>,
    /// Row-major: `slowdown[i * mba.len() + j]` is the value at `(ways[i], mba[j])`.
    slowdown: Vec<T>,
    sl_full: T,
    anchor: AllocationState,
}

/// Serialized form of a profile; one row of `slowdown` per ways point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(bound = "T: Scalar")]
pub struct ProfileDoc<T> {
    pub sl_full: T,
    pub ways: Vec<u32>,
    pub mba: Vec<u32>,
    pub slowdown: Vec<Vec<T>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<AllocationState>,
}

impl<T: Scalar> TryFrom<ProfileDoc<T>> for SensitivityProfile<T> {
    type Error = Error;

    fn try_from(doc: ProfileDoc<T>) -> Result<Self> {
        if doc.slowdown.len() != doc.ways.len() {
            return Err(Error::InvalidProfile(format!(
                "{} slowdown rows for {} ways points",
                doc.slowdown.len(),
                doc.ways.len()
            )));
        }
        if let Some(i) = doc.slowdown.iter().position(|r| r.len() != doc.mba.len()) {
            return Err(Error::InvalidProfile(format!(
                "slowdown row {} has {} values for {} MBA points",
                i,
                doc.slowdown[i].len(),
                doc.mba.len()
            )));
        }
        let flat = doc.slowdown.into_iter().flatten().collect();
        let profile = SensitivityProfile::new(doc.ways, doc.mba, flat, doc.sl_full)?;
        match doc.anchor {
            Some(a) => profile.with_anchor(a),
            None => Ok(profile),
        }
    }
}

impl<T: Scalar> From<SensitivityProfile<T>> for ProfileDoc<T> {
    fn from(p: SensitivityProfile<T>) -> Self {
        let n = p.mba.len();
        let default_anchor = AllocationState::new(p.ways[0], p.mba[0]);
        ProfileDoc {
            sl_full: p.sl_full,
            slowdown: p.slowdown.chunks(n).map(|r| r.to_vec()).collect(),
            anchor: (p.anchor != default_anchor).then_some(p.anchor),
            ways: p.ways,
            mba: p.mba,
        }
    }
}

fn check_axis(name: &str, axis: &[u32]) -> Result<()> {
    if axis.is_empty() {
        return Err(Error::InvalidProfile(format!("empty {name} axis")));
    }
    if axis[0] == 0 {
        return Err(Error::InvalidProfile(format!("{name} axis starts at 0")));
    }
    if axis.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidProfile(format!("{name} axis is not strictly increasing")));
    }
    Ok(())
}

/// Lower cell index and fractional position of `x` on `axis`, or `None` outside it.
fn locate<T: Scalar>(axis: &[u32], x: u32) -> Option<(usize, T)> {
    let last = *axis.last()?;
    if x < axis[0] || x > last {
        return None;
    }
    if axis.len() == 1 {
        return Some((0, T::zero()));
    }
    let i = match axis.binary_search(&x) {
        Ok(i) => return Some((i.min(axis.len() - 2), if i == axis.len() - 1 { T::one() } else { T::zero() })),
        Err(i) => i - 1,
    };
    let t = T::from_count(x - axis[i]) / T::from_count(axis[i + 1] - axis[i]);
    Some((i, t))
}

/// Bilinear interpolation of row-major `values` over the `ways` x `mba` grid.
pub(crate) fn bilinear<T: Scalar>(ways: &[u32], mba: &[u32], values: &[T], state: AllocationState) -> Option<T> {
    let (i, tw) = locate::<T>(ways, state.llc_ways)?;
    let (j, tm) = locate::<T>(mba, state.mba_percent)?;
    let n = mba.len();
    let at = |a: usize, b: usize| values[a.min(ways.len() - 1) * n + b.min(n - 1)];
    let one = T::one();
    let low = at(i, j) * (one - tm) + at(i, j + 1) * tm;
    let high = at(i + 1, j) * (one - tm) + at(i + 1, j + 1) * tm;
    Some(low * (one - tw) + high * tw)
}

impl<T: Scalar> SensitivityProfile<T> {
    pub fn new(ways: Vec<u32>, mba: Vec<u32>, slowdown: Vec<T>, sl_full: T) -> Result<Self> {
        check_axis("ways", &ways)?;
        check_axis("mba", &mba)?;
        if *mba.last().unwrap() != 100 {
            return Err(Error::InvalidProfile("MBA axis must end at 100%".into()));
        }
        if slowdown.len() != ways.len() * mba.len() {
            return Err(Error::InvalidProfile(format!(
                "{} slowdown values for a {}x{} grid",
                slowdown.len(),
                ways.len(),
                mba.len()
            )));
        }
        if !(sl_full > T::zero()) || !sl_full.is_finite() {
            return Err(Error::InvalidProfile(format!("sl_full {sl_full} must be positive")));
        }
        let anchor = AllocationState::new(ways[0], mba[0]);
        let p = SensitivityProfile { ways, mba, slowdown, sl_full, anchor };
        p.check_values()?;
        Ok(p)
    }

    /// Builds a profile by evaluating `f` at every grid point.
    pub fn from_fn(ways: Vec<u32>, mba: Vec<u32>, sl_full: T, mut f: impl FnMut(AllocationState) -> T) -> Result<Self> {
        let mut values = Vec::with_capacity(ways.len() * mba.len());
        for &w in &ways {
            for &m in &mba {
                values.push(f(AllocationState::new(w, m)));
            }
        }
        Self::new(ways, mba, values, sl_full)
    }

    /// A profile that is insensitive to both resources.
    pub fn flat(machine: &MachineSpec, sl_full: T) -> Result<Self> {
        let mba = if machine.mba_step < 100 { vec![machine.mba_step, 100] } else { vec![100] };
        Self::from_fn(vec![1, machine.llc_ways], mba, sl_full, |_| T::one())
    }

    fn check_values(&self) -> Result<()> {
        let n = self.mba.len();
        for (k, v) in self.slowdown.iter().enumerate() {
            let at = AllocationState::new(self.ways[k / n], self.mba[k % n]);
            if !v.is_finite() || *v < T::one() {
                return Err(Error::InvalidProfile(format!("slowdown {v} at {at} is not a finite value >= 1")));
            }
        }
        if *self.slowdown.last().unwrap() != T::one() {
            return Err(Error::InvalidProfile(format!(
                "slowdown at full allocation is {}, expected exactly 1",
                self.slowdown.last().unwrap()
            )));
        }
        for i in 0..self.ways.len() {
            for j in 0..n {
                let v = self.slowdown[i * n + j];
                let more_ways = (i + 1 < self.ways.len()).then(|| self.slowdown[(i + 1) * n + j]);
                let more_mba = (j + 1 < n).then(|| self.slowdown[i * n + j + 1]);
                if more_ways.is_some_and(|u| u > v) || more_mba.is_some_and(|u| u > v) {
                    return Err(Error::InvalidProfile(format!(
                        "slowdown increases with more resources at ({} ways, {}%)",
                        self.ways[i], self.mba[j]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Marks the most restricted state that was actually measured; dominance is
    /// judged there rather than at extrapolated grid corners.
    pub fn with_anchor(mut self, anchor: AllocationState) -> Result<Self> {
        if !self.ways.contains(&anchor.llc_ways) || !self.mba.contains(&anchor.mba_percent) {
            return Err(Error::InvalidProfile(format!("anchor {anchor} is not a grid point")));
        }
        self.anchor = anchor;
        Ok(self)
    }

    pub fn ways(&self) -> &[u32] {
        &self.ways
    }

    pub fn mba(&self) -> &[u32] {
        &self.mba
    }

    pub fn sl_full(&self) -> T {
        self.sl_full
    }

    pub fn anchor(&self) -> AllocationState {
        self.anchor
    }

    /// LLC ways at full allocation.
    pub fn llc_ways(&self) -> u32 {
        *self.ways.last().unwrap()
    }

    pub fn full_state(&self) -> AllocationState {
        AllocationState::new(self.llc_ways(), 100)
    }

    /// Value stored at a grid point, if `state` is one.
    pub fn grid_value(&self, state: AllocationState) -> Option<T> {
        let i = self.ways.binary_search(&state.llc_ways).ok()?;
        let j = self.mba.binary_search(&state.mba_percent).ok()?;
        Some(self.slowdown[i * self.mba.len() + j])
    }

    /// Checks the profile spans every state a CLOS on `machine` can be given.
    pub fn check_machine(&self, machine: &MachineSpec) -> Result<()> {
        if self.llc_ways() != machine.llc_ways {
            return Err(Error::InvalidProfile(format!(
                "profile full allocation is {} ways, machine has {}",
                self.llc_ways(),
                machine.llc_ways
            )));
        }
        if self.ways[0] > 1 || self.mba[0] > machine.mba_step {
            return Err(Error::InvalidProfile(format!(
                "profile starts at ({} ways, {}%), machine allows (1 way, {}%)",
                self.ways[0], self.mba[0], machine.mba_step
            )));
        }
        Ok(())
    }

    /// Slowdown at `state`, bilinearly interpolated between grid points.
    pub fn slowdown_at(&self, state: AllocationState) -> Result<T> {
        let v = bilinear(&self.ways, &self.mba, &self.slowdown, state).ok_or(Error::StateOutOfBounds(state))?;
        Ok(v.max(T::one()))
    }

    /// Fraction of the full-allocation SLO load still sustainable at `state`.
    pub fn retainment_at(&self, state: AllocationState) -> Result<T> {
        Ok(T::one() / self.slowdown_at(state)?)
    }

    /// Load sustainable within the SLO at `state`.
    pub fn sustainable_load(&self, state: AllocationState) -> Result<T> {
        Ok(self.sl_full / self.slowdown_at(state)?)
    }

    pub fn dominance(&self) -> Dominance {
        dominance_of(self)
    }
}

/// Slowdown of `profile` at `state`.
pub fn slowdown_at<T: Scalar>(profile: &SensitivityProfile<T>, state: AllocationState) -> Result<T> {
    profile.slowdown_at(state)
}

/// Load retainment of `profile` at `state`, the reciprocal of slowdown.
pub fn retainment_at<T: Scalar>(profile: &SensitivityProfile<T>, state: AllocationState) -> Result<T> {
    profile.retainment_at(state)
}

/// Normalizes slowdowns into time-slice weights: `w_i = s_i / sum(s)`.
pub fn weights_of<T: Scalar>(slowdowns: &[T]) -> Result<Vec<T>> {
    if slowdowns.is_empty() {
        return Err(Error::Domain("weights of an empty slowdown list".into()));
    }
    if let Some(bad) = slowdowns.iter().find(|s| !(**s >= T::one()) || !s.is_finite()) {
        return Err(Error::Domain(format!("slowdown {bad} is not a finite value >= 1")));
    }
    let total = slowdowns.iter().fold(T::zero(), |acc, s| acc + *s);
    Ok(slowdowns.iter().map(|s| *s / total).collect())
}

/// Classifies a profile by comparing the LLC-starved and bandwidth-starved
/// slowdowns at its anchor, with [`DOMINANCE_THRESHOLD`].
pub fn dominance_of<T: Scalar>(profile: &SensitivityProfile<T>) -> Dominance {
    dominance_with_threshold(profile, T::lit(DOMINANCE_THRESHOLD))
}

pub fn dominance_with_threshold<T: Scalar>(profile: &SensitivityProfile<T>, theta: T) -> Dominance {
    let anchor = profile.anchor();
    let llc_starved =
        profile.grid_value(AllocationState::new(anchor.llc_ways, 100)).expect("anchor row is on the grid");
    let mb_starved = profile
        .grid_value(AllocationState::new(profile.llc_ways(), anchor.mba_percent))
        .expect("anchor column is on the grid");
    if llc_starved >= theta * mb_starved {
        Dominance::LlcDominant
    } else if mb_starved >= theta * llc_starved {
        Dominance::MbDominant
    } else {
        Dominance::Balanced
    }
}

/// A latency-critical workload as seen by the scheduler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct WorkloadSpec<T> {
    pub name: String,
    pub slo: SloSpec<T>,
    pub profile: SensitivityProfile<T>,
    /// Requests/sec offered by clients.
    pub offered_load: T,
    pub dominance: Dominance,
}

impl<T: Scalar> WorkloadSpec<T> {
    pub fn new(
        name: impl Into<String>,
        slo: SloSpec<T>,
        profile: SensitivityProfile<T>,
        offered_load: T,
    ) -> Result<Self> {
        let w = WorkloadSpec { name: name.into(), slo, dominance: dominance_of(&profile), profile, offered_load };
        w.validate()?;
        Ok(w)
    }

    /// Overrides the computed classification.
    pub fn with_dominance(mut self, dominance: Dominance) -> Self {
        self.dominance = dominance;
        self
    }

    pub fn with_offered_load(mut self, offered_load: T) -> Self {
        self.offered_load = offered_load;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Domain("workload name is empty".into()));
        }
        self.slo.validate()?;
        if !(self.offered_load >= T::zero()) || !self.offered_load.is_finite() {
            return Err(Error::Domain(format!(
                "workload {}: offered load {} must be >= 0",
                self.name, self.offered_load
            )));
        }
        Ok(())
    }

    pub fn sl_full(&self) -> T {
        self.profile.sl_full()
    }
}
