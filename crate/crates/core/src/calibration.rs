//! Measured load-retainment data for the three reference applications on a
//! 20-way, 10%-step MBA server, and the profiles derived from it.
//!
//! Measurements cover each axis separately (CAT masks at full bandwidth, MBA
//! throttles at full cache). Combined states compose multiplicatively:
//! `retainment(l, m) = retainment(l, 100) * retainment(L, m)`. States more
//! restricted than the least-restricted measurement are linearly extrapolated
//! from the two most restricted points of that axis.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sensitivity::{AllocationState, MachineSpec, SensitivityProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceApp {
    Memcached,
    Nginx,
    Mongodb,
}

impl ReferenceApp {
    pub const ALL: [ReferenceApp; 3] = [ReferenceApp::Memcached, ReferenceApp::Nginx, ReferenceApp::Mongodb];

    /// Retainment at the measured CAT masks, ordered as [`CAT_MASK_WAYS`].
    pub fn cat_retainment(self) -> [f64; 3] {
        match self {
            ReferenceApp::Memcached => [0.881, 0.838, 0.80],
            ReferenceApp::Nginx => [0.75, 0.62, 0.33],
            ReferenceApp::Mongodb => [0.583, 0.373, 0.26],
        }
    }

    /// Retainment at the measured MBA throttles, ordered as [`MBA_LEVELS`].
    pub fn mba_retainment(self) -> [f64; 4] {
        match self {
            ReferenceApp::Memcached => [0.914, 0.872, 0.82, 0.784],
            ReferenceApp::Nginx => [0.93, 0.901, 0.873, 0.811],
            ReferenceApp::Mongodb => [0.825, 0.74, 0.699, 0.642],
        }
    }

    /// Measurement error bars (absolute retainment), CAT then MBA.
    pub fn error_bars(self) -> ([f64; 3], [f64; 4]) {
        match self {
            ReferenceApp::Memcached => ([0.05, 0.02, 0.04], [0.06, 0.04, 0.05, 0.05]),
            ReferenceApp::Nginx => ([0.04, 0.03, 0.03], [0.04, 0.03, 0.02, 0.04]),
            ReferenceApp::Mongodb => ([0.05, 0.01, 0.02], [0.05, 0.03, 0.04, 0.04]),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ReferenceApp::Memcached => "memcached",
            ReferenceApp::Nginx => "nginx",
            ReferenceApp::Mongodb => "mongodb",
        }
    }
}

impl fmt::Display for ReferenceApp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ReferenceApp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ReferenceApp::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Domain(format!("unknown reference application {s:?}")))
    }
}

/// Mask widths of the CAT measurements.
pub const CAT_MASK_WAYS: [u32; 3] = [9, 6, 3];
/// MBA throttles of the bandwidth measurements.
pub const MBA_LEVELS: [u32; 4] = [80, 60, 40, 20];
/// LLC associativity of the measurement server.
pub const MEASURED_LLC_WAYS: u32 = 20;

/// Piecewise-linear slowdown curve over one axis, ascending, ending at slowdown 1.
fn axis_curve(points: &[(u32, f64)], floor: u32) -> Vec<(u32, f64)> {
    let mut pts: Vec<(u32, f64)> = points.to_vec();
    pts.sort_by_key(|p| p.0);
    let (x0, s0) = pts[0];
    let (x1, s1) = pts[1];
    let slope = ((s0 - s1) / f64::from(x1 - x0)).max(0.0);
    if floor < x0 {
        pts.insert(0, (floor, s0 + slope * f64::from(x0 - floor)));
    }
    pts
}

/// Slowdown profile reconstructed from the measured retainments.
///
/// Only defined for a 20-way machine. The anchor is set to the most
/// restricted measured state (3 ways, 20%).
pub fn calibrated_profile<T: Scalar>(
    app: ReferenceApp,
    machine: &MachineSpec,
    sl_full: T,
) -> Result<SensitivityProfile<T>> {
    machine.validate()?;
    if machine.llc_ways != MEASURED_LLC_WAYS {
        return Err(Error::Domain(format!(
            "reference calibration was measured on {MEASURED_LLC_WAYS} ways, machine has {}",
            machine.llc_ways
        )));
    }
    let cat: Vec<(u32, f64)> = CAT_MASK_WAYS
        .iter()
        .zip(app.cat_retainment())
        .map(|(w, r)| (*w, 1.0 / r))
        .chain(std::iter::once((MEASURED_LLC_WAYS, 1.0)))
        .collect();
    let mba: Vec<(u32, f64)> = MBA_LEVELS
        .iter()
        .zip(app.mba_retainment())
        .map(|(m, r)| (*m, 1.0 / r))
        .chain(std::iter::once((100, 1.0)))
        .collect();
    let cat = axis_curve(&cat, 1);
    let mba = axis_curve(&mba, machine.mba_step.min(*MBA_LEVELS.last().unwrap()));
    let ways: Vec<u32> = cat.iter().map(|p| p.0).collect();
    let levels: Vec<u32> = mba.iter().map(|p| p.0).collect();
    let profile = SensitivityProfile::from_fn(ways, levels, sl_full, |s| {
        let sw = cat.iter().find(|p| p.0 == s.llc_ways).unwrap().1;
        let sm = mba.iter().find(|p| p.0 == s.mba_percent).unwrap().1;
        T::lit(sw * sm)
    })?;
    profile.with_anchor(AllocationState::new(3, 20))
}
