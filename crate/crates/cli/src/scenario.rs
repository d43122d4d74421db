//! Scenario files: TOML documents describing a machine, its workloads and
//! the simulation parameters.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use closshare::clos::{CapacityMask, ClosConfig, ClosSet};
use closshare::profiler::{build_profile, GroundTruthModel};
use closshare::sensitivity::{Dominance, MachineSpec, SensitivityProfile, SloSpec, WorkloadSpec};
use closshare::sim::{Policy, Scenario, SimConfig};
use closshare::{calibrated_profile, ReferenceApp};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default = "default_policies")]
    pub policies: Vec<Policy>,
    pub machine: MachineSpec,
    #[serde(default)]
    pub sim: SimConfig<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionSpec>,
    pub workloads: Vec<WorkloadEntry>,
}

fn default_policies() -> Vec<Policy> {
    vec![Policy::Coco, Policy::RoundRobin, Policy::NoPartition]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub reserved: u8,
    pub clos: Vec<ClosEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosEntry {
    pub id: u8,
    /// Hex capacity mask, with or without `0x`.
    pub mask: String,
    pub mba: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadEntry {
    pub name: String,
    pub offered_load: f64,
    pub slo: SloSpec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dominance: Option<Dominance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibrated: Option<Calibrated>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<GroundTruthModel<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<SensitivityProfile<f64>>,
    /// Profile file written by `closshare profile`, relative to the scenario.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibrated {
    pub app: ReferenceApp,
    pub sl_full: f64,
}

/// Output of `closshare profile`, keyed by workload name.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileFile {
    pub profiles: BTreeMap<String, SensitivityProfile<f64>>,
}

/// A parsed scenario and where it came from.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub path: PathBuf,
    pub file: ScenarioFile,
}

pub fn load(path: &Path) -> Result<Loaded, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let file: ScenarioFile =
        toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    Ok(Loaded { path: path.to_path_buf(), file })
}

pub fn parse_mask(s: &str) -> Option<CapacityMask> {
    let digits = s.trim().trim_start_matches("0x").trim_start_matches("0X");
    u64::from_str_radix(digits, 16).ok().map(CapacityMask)
}

impl Loaded {
    fn invalid(&self, msg: impl std::fmt::Display) -> CliError {
        CliError::Validation(format!("{}: {msg}", self.path.display()))
    }

    pub fn partition(&self) -> Result<Option<ClosSet>, CliError> {
        let Some(p) = &self.file.partition else { return Ok(None) };
        let mut configs = Vec::new();
        for c in &p.clos {
            let mask =
                parse_mask(&c.mask).ok_or_else(|| self.invalid(format!("clos {}: bad mask {:?}", c.id, c.mask)))?;
            configs.push(ClosConfig::new(c.id, mask, c.mba));
        }
        ClosSet::new(self.file.machine, configs, p.reserved).map(Some).map_err(|e| self.invalid(e))
    }

    /// Profile for `w`, building it from the ground-truth model when needed.
    pub fn profile_of(&self, w: &WorkloadEntry) -> Result<SensitivityProfile<f64>, CliError> {
        let sources = [w.calibrated.is_some(), w.model.is_some(), w.profile.is_some(), w.profile_file.is_some()];
        if sources.iter().filter(|s| **s).count() != 1 {
            return Err(self.invalid(format!(
                "workload {}: give exactly one of calibrated, model, profile, profile_file",
                w.name
            )));
        }
        let machine = &self.file.machine;
        if let Some(c) = &w.calibrated {
            return calibrated_profile(c.app, machine, c.sl_full)
                .map_err(|e| self.invalid(format!("workload {}: {e}", w.name)));
        }
        if let Some(m) = &w.model {
            m.validate(machine).map_err(|e| self.invalid(format!("workload {}: {e}", w.name)))?;
            return build_profile(m, machine, &w.slo)
                .map_err(|e| CliError::from_core(e, &format!("workload {}", w.name)));
        }
        if let Some(p) = &w.profile {
            return Ok(p.clone());
        }
        let rel = w.profile_file.as_ref().unwrap();
        let path = self.path.parent().unwrap_or(Path::new(".")).join(rel);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let mut file: ProfileFile =
            toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        file.profiles
            .remove(&w.name)
            .ok_or_else(|| CliError::Validation(format!("{}: no profile for {}", path.display(), w.name)))
    }

    /// Core scenario for `policy`, fully validated.
    pub fn scenario(&self, policy: Policy) -> Result<Scenario<f64>, CliError> {
        let mut workloads = Vec::new();
        for w in &self.file.workloads {
            let profile = self.profile_of(w)?;
            let mut spec =
                WorkloadSpec::new(w.name.clone(), w.slo, profile, w.offered_load).map_err(|e| self.invalid(e))?;
            if let Some(d) = w.dominance {
                spec = spec.with_dominance(d);
            }
            workloads.push(spec);
        }
        let s = Scenario {
            machine: self.file.machine,
            workloads,
            policy,
            partition: self.partition()?,
            config: self.file.sim,
        };
        s.validate().map_err(|e| self.invalid(e))?;
        Ok(s)
    }
}
