//! Sensitivity-aware sharing of cache (CAT) and memory-bandwidth (MBA)
//! partitions among latency-critical workloads.
//!
//! Workloads are profiled into slowdown tables over (LLC ways, MBA percent),
//! a fixed set of CLOS partitions is carved out of the machine, and an
//! MQ-WRR scheduler time-shares the CLOSs in proportion to each workload's
//! slowdown. A discrete-time simulator compares the resulting policy with
//! the usual baselines, and a resctrl adapter writes the partitions to a
//! Linux resctrl mount.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix it to `f64`.

// `!(x > 0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod apportion;
pub mod calibration;
pub mod clos;
pub mod error;
pub mod profiler;
pub mod resctrl;
pub mod scalar;
pub mod scheduler;
pub mod sensitivity;
pub mod sim;

pub use calibration::{calibrated_profile, ReferenceApp};
pub use clos::{
    default_partition, diff, validate, CapacityMask, ClosConfig, ClosSet, MigrationEvent, ReconfigPlan, Violation,
};
pub use error::{Error, Result};
pub use profiler::{build_profile, max_sustainable_load, measure_grid, CapacityModel, GroundTruthModel, ProfileGrid};
pub use scalar::Scalar;
pub use scheduler::{
    admission_control, pair_compatible, plan_epoch, round_robin_plan, Admission, EpochPlan, LcClos, QueueState,
    TimeSlice,
};
pub use sensitivity::{
    dominance_of, retainment_at, slowdown_at, weights_of, AllocationState, Dominance, MachineSpec, SensitivityProfile,
    SloSpec, WorkloadSpec,
};
pub use sim::{
    compare_policies, max_affordable_load, reference_scenario, run_scenario, Metrics, Policy, Scenario, SimConfig,
};

/// Slowdown table over `f64`.
pub type Profile = SensitivityProfile<f64>;
/// Workload description over `f64`.
pub type Workload = WorkloadSpec<f64>;
/// Epoch plan over `f64`.
pub type Plan = EpochPlan<f64>;
/// Simulation scenario over `f64`.
pub type ScenarioF64 = Scenario<f64>;
/// Per-run metrics over `f64`.
pub type MetricsF64 = Metrics<f64>;
