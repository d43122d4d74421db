//! Offline sensitivity profiling against a closed-form performance model.
//!
//! A workload is driven at increasing load until its tail latency crosses the
//! SLO bound; the largest load that still meets the bound is the sustainable
//! load for that allocation state. The latency model is
//!
//! ```text
//! latency(load, s) = base_latency * tail_inflation / (1 - load / capacity(s))
//! ```
//!
//! which is strictly increasing in load and diverges at capacity, so the
//! search has a unique answer and a closed-form check
//! `SL = capacity * (1 - base * inflation / bound)`.

use serde::{Deserialize, Serialize};

use crate::calibration::{calibrated_profile, ReferenceApp};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sensitivity::{bilinear, AllocationState, MachineSpec, SensitivityProfile, SloSpec};

/// Relative tolerance of the load search.
pub const SEARCH_TOLERANCE: f64 = 1e-4;

/// Saturation capacity (requests/sec) as a function of allocation state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
#[serde(bound = "T: Scalar")]
pub enum CapacityModel<T> {
    /// `peak * (1 - a * (1 - l/L)^p) * (1 - b * (1 - m/100)^q)`.
    Parametric { peak: T, llc_sensitivity: T, llc_exponent: T, mba_sensitivity: T, mba_exponent: T },
    /// Capacities on a grid, bilinearly interpolated. Rows follow `ways`.
    Table { ways: Vec<u32>, mba: Vec<u32>, capacity: Vec<Vec<T>> },
    /// `peak / slowdown(s)` for an existing profile.
    Scaled { peak: T, profile: SensitivityProfile<T> },
}

impl<T: Scalar> CapacityModel<T> {
    pub fn capacity(&self, state: AllocationState, machine: &MachineSpec) -> Result<T> {
        machine.check_state(state)?;
        match self {
            CapacityModel::Parametric { peak, llc_sensitivity, llc_exponent, mba_sensitivity, mba_exponent } => {
                let one = T::one();
                let llc_gap = one - T::from_count(state.llc_ways) / T::from_count(machine.llc_ways);
                let mba_gap = one - T::from_count(state.mba_percent) / T::from_count(100);
                Ok(*peak
                    * (one - *llc_sensitivity * llc_gap.powf(*llc_exponent))
                    * (one - *mba_sensitivity * mba_gap.powf(*mba_exponent)))
            }
            CapacityModel::Table { ways, mba, capacity } => {
                let flat: Vec<T> = capacity.iter().flatten().copied().collect();
                if capacity.len() != ways.len() || flat.len() != ways.len() * mba.len() {
                    return Err(Error::Domain("capacity table shape does not match its axes".into()));
                }
                bilinear(ways, mba, &flat, state).ok_or(Error::StateOutOfBounds(state))
            }
            CapacityModel::Scaled { peak, profile } => Ok(*peak / profile.slowdown_at(state)?),
        }
    }
}

/// Parametric stand-in for a real application under a load generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(bound = "T: Scalar")]
pub struct GroundTruthModel<T> {
    /// Latency at near-zero load with full allocation.
    pub base_latency_ms: T,
    /// Factor from mean latency to the SLO percentile.
    pub tail_inflation: T,
    pub capacity: CapacityModel<T>,
}

impl<T: Scalar> GroundTruthModel<T> {
    /// A model whose capacity ratios follow the measured retainment of `app`.
    pub fn calibrated(
        app: ReferenceApp,
        machine: &MachineSpec,
        peak: T,
        base_latency_ms: T,
        tail_inflation: T,
    ) -> Result<Self> {
        Ok(GroundTruthModel {
            base_latency_ms,
            tail_inflation,
            capacity: CapacityModel::Scaled { peak, profile: calibrated_profile(app, machine, T::one())? },
        })
    }

    /// Latency at zero load and full allocation, at the SLO percentile.
    pub fn floor_latency(&self) -> T {
        self.base_latency_ms * self.tail_inflation
    }

    /// Tail latency at `load` given saturation `capacity`; infinite at or past saturation.
    pub fn latency_for(&self, load: T, capacity: T) -> T {
        let utilization = load / capacity;
        if utilization >= T::one() {
            T::infinity()
        } else {
            self.floor_latency() / (T::one() - utilization)
        }
    }

    pub fn latency(&self, load: T, state: AllocationState, machine: &MachineSpec) -> Result<T> {
        Ok(self.latency_for(load, self.capacity.capacity(state, machine)?))
    }

    pub fn validate(&self, machine: &MachineSpec) -> Result<()> {
        let positive = |x: T| x > T::zero() && x.is_finite();
        if !positive(self.base_latency_ms) || !(self.tail_inflation >= T::one()) || !self.tail_inflation.is_finite() {
            return Err(Error::Domain(format!(
                "model needs base latency > 0 and tail inflation >= 1 (got {}, {})",
                self.base_latency_ms, self.tail_inflation
            )));
        }
        if let CapacityModel::Parametric { llc_sensitivity, mba_sensitivity, llc_exponent, mba_exponent, .. } =
            &self.capacity
        {
            let unit = |x: T| x >= T::zero() && x < T::one();
            if !unit(*llc_sensitivity)
                || !unit(*mba_sensitivity)
                || !positive(*llc_exponent)
                || !positive(*mba_exponent)
            {
                return Err(Error::Domain(
                    "parametric sensitivities must lie in [0, 1) and exponents be positive".into(),
                ));
            }
        }
        let full = self.capacity.capacity(machine.full_state(), machine)?;
        if !positive(full) {
            return Err(Error::Domain(format!("capacity at full allocation is {full}")));
        }
        Ok(())
    }
}

/// Largest load that keeps the SLO at `state`, by bisection on utilization.
pub fn max_sustainable_load<T: Scalar>(
    model: &GroundTruthModel<T>,
    machine: &MachineSpec,
    state: AllocationState,
    slo: &SloSpec<T>,
) -> Result<T> {
    let bound = slo.latency_bound_ms;
    if model.floor_latency() > bound {
        return Err(Error::InfeasibleSlo(format!(
            "zero-load latency {} ms exceeds the {} ms bound",
            model.floor_latency(),
            bound
        )));
    }
    let capacity = model.capacity.capacity(state, machine)?;
    if model.floor_latency() == bound {
        return Ok(T::zero());
    }
    if !(capacity > T::zero()) || !capacity.is_finite() {
        return Err(Error::Domain(format!("capacity {capacity} at {state} is not positive")));
    }
    let meets = |u: T| model.latency_for(u * capacity, capacity) <= bound;
    let tol = T::lit(SEARCH_TOLERANCE);
    let (mut lo, mut hi) = (T::zero(), T::one());
    // hi is never feasible: latency diverges at saturation.
    let mut steps = 0;
    while hi - lo > tol * hi && steps < 200 {
        let mid = lo + (hi - lo) / T::from_count(2);
        if meets(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
        steps += 1;
    }
    Ok(lo * capacity)
}

/// Sustainable loads over the full (1 way x `mba_step`) grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ProfileGrid<T> {
    pub ways: Vec<u32>,
    pub mba: Vec<u32>,
    /// Row-major over `ways` x `mba`.
    pub measured_sl: Vec<T>,
}

impl<T: Scalar> ProfileGrid<T> {
    pub fn states(&self) -> impl Iterator<Item = AllocationState> + '_ {
        self.ways.iter().flat_map(move |w| self.mba.iter().map(move |m| AllocationState::new(*w, *m)))
    }

    pub fn get(&self, state: AllocationState) -> Option<T> {
        let i = self.ways.binary_search(&state.llc_ways).ok()?;
        let j = self.mba.binary_search(&state.mba_percent).ok()?;
        Some(self.measured_sl[i * self.mba.len() + j])
    }
}

/// Measures the sustainable load at every state, stepping down from full allocation.
pub fn measure_grid<T: Scalar>(
    model: &GroundTruthModel<T>,
    machine: &MachineSpec,
    slo: &SloSpec<T>,
) -> Result<ProfileGrid<T>> {
    machine.validate()?;
    model.validate(machine)?;
    slo.validate()?;
    let ways: Vec<u32> = (1..=machine.llc_ways).collect();
    let mba: Vec<u32> = (1..=100 / machine.mba_step).map(|k| k * machine.mba_step).collect();
    let mut measured_sl = vec![T::zero(); ways.len() * mba.len()];
    for (i, w) in ways.iter().enumerate().rev() {
        for (j, m) in mba.iter().enumerate().rev() {
            measured_sl[i * mba.len() + j] = max_sustainable_load(model, machine, AllocationState::new(*w, *m), slo)?;
        }
    }
    Ok(ProfileGrid { ways, mba, measured_sl })
}

/// Profiles `model` on `machine` and converts the sustainable loads into slowdowns.
pub fn build_profile<T: Scalar>(
    model: &GroundTruthModel<T>,
    machine: &MachineSpec,
    slo: &SloSpec<T>,
) -> Result<SensitivityProfile<T>> {
    let grid = measure_grid(model, machine, slo)?;
    let n = grid.mba.len();
    for (i, w) in grid.ways.iter().enumerate() {
        for (j, m) in grid.mba.iter().enumerate() {
            let v = grid.measured_sl[i * n + j];
            let shrinks_with_ways = i + 1 < grid.ways.len() && grid.measured_sl[(i + 1) * n + j] < v;
            let shrinks_with_mba = j + 1 < n && grid.measured_sl[i * n + j + 1] < v;
            if shrinks_with_ways || shrinks_with_mba {
                return Err(Error::NonMonotone(AllocationState::new(*w, *m)));
            }
        }
    }
    let sl_full = *grid.measured_sl.last().unwrap();
    if !(sl_full > T::zero()) {
        return Err(Error::InfeasibleSlo("no load sustains the SLO even at full allocation".into()));
    }
    if let Some(k) = grid.measured_sl.iter().position(|v| !(*v > T::zero())) {
        let state = AllocationState::new(grid.ways[k / n], grid.mba[k % n]);
        return Err(Error::InfeasibleSlo(format!("no load sustains the SLO at {state}")));
    }
    let slowdown = grid.measured_sl.iter().map(|sl| sl_full / *sl).collect();
    SensitivityProfile::new(grid.ways, grid.mba, slowdown, sl_full)
}
