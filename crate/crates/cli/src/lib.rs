//! Command-line front end: profile workloads, simulate a policy, compare
//! policies and export resctrl schemata from a TOML scenario file.

pub mod report;
pub mod scenario;

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use closshare::resctrl::{apply, render_set, GroupStatus, ResctrlLayout};
use closshare::sim::{compare_policies, run_scenario, Policy};
use closshare::{default_partition, Error};

use report::Format;
use scenario::ProfileFile;

/// Exit status for malformed or invalid input.
pub const EXIT_VALIDATION: i32 = 2;
/// Exit status for infeasible SLOs and admission failures.
pub const EXIT_INFEASIBLE: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Infeasible(String),
    Io(String),
    Other(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn from_core(e: Error, context: &str) -> Self {
        let msg = format!("{context}: {e}");
        match e {
            Error::InfeasibleSlo(_) | Error::Infeasible(_) | Error::EpochUnderflow { .. } => CliError::Infeasible(msg),
            _ => CliError::Validation(msg),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Infeasible(_) => EXIT_INFEASIBLE,
            CliError::Io(_) | CliError::Other(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Infeasible(m) | CliError::Io(m) | CliError::Other(m) => f.write_str(m),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "closshare", version, about = "Share CAT/MBA partitions among latency-critical workloads")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build slowdown profiles for every workload.
    Profile {
        scenario: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Simulate one policy at the offered loads.
    Simulate {
        scenario: PathBuf,
        /// Defaults to the first policy listed in the scenario.
        #[arg(long)]
        policy: Option<Policy>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Search the affordable load of several policies and compare them.
    Compare {
        scenario: PathBuf,
        /// Comma-separated; defaults to the scenario's list.
        #[arg(long, value_delimiter = ',')]
        policies: Vec<Policy>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        /// Add one row per workload before each policy's total.
        #[arg(long)]
        per_workload: bool,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Print the partition as resctrl schemata, optionally applying it.
    Schemata {
        scenario: PathBuf,
        /// Write the groups under this resctrl root.
        #[arg(long, env = "RESCTRL_ROOT")]
        root: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Check a scenario without running it.
    Validate { scenario: PathBuf },
}

/// Writes `text` to `path` via a temporary file, or returns it for stdout.
fn emit(text: String, output: &Option<PathBuf>) -> Result<String, CliError> {
    let Some(path) = output else { return Ok(text) };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, &text).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        CliError::io(path, e)
    })?;
    Ok(String::new())
}

/// Runs one command and returns what goes to stdout.
pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Profile { scenario, output } => {
            let loaded = scenario::load(&scenario)?;
            let mut file = ProfileFile::default();
            for w in &loaded.file.workloads {
                file.profiles.insert(w.name.clone(), loaded.profile_of(w)?);
            }
            let text = toml::to_string(&file).map_err(|e| CliError::Other(e.to_string()))?;
            emit(text, &output)
        }
        Command::Simulate { scenario, policy, seed, format, output } => {
            let loaded = scenario::load(&scenario)?;
            let policy = policy.or(loaded.file.policies.first().copied()).unwrap_or(Policy::Coco);
            let mut s = loaded.scenario(policy)?;
            if let Some(seed) = seed {
                s.config.seed = seed;
            }
            let m = run_scenario(&s).map_err(|e| CliError::from_core(e, &scenario.display().to_string()))?;
            let rejected: Vec<&str> = m.workloads.iter().filter(|w| !w.admitted).map(|w| w.name.as_str()).collect();
            if !rejected.is_empty() {
                return Err(CliError::Infeasible(format!("admission rejected {}", rejected.join(", "))));
            }
            emit(report::metrics(&m, format)?, &output)
        }
        Command::Compare { scenario, policies, seed, format, per_workload, output } => {
            let loaded = scenario::load(&scenario)?;
            let policies = if policies.is_empty() { loaded.file.policies.clone() } else { policies };
            let mut s = loaded.scenario(Policy::Coco)?;
            if let Some(seed) = seed {
                s.config.seed = seed;
            }
            let c =
                compare_policies(&s, &policies).map_err(|e| CliError::from_core(e, &scenario.display().to_string()))?;
            emit(report::comparison(&c, per_workload, format)?, &output)
        }
        Command::Schemata { scenario, root, output } => {
            let loaded = scenario::load(&scenario)?;
            loaded.scenario(Policy::Coco)?;
            let set = match loaded.partition()? {
                Some(p) => p,
                None => default_partition(&loaded.file.machine)
                    .map_err(|e| CliError::from_core(e, &scenario.display().to_string()))?,
            };
            let text = render_set(&set, 0).map_err(|e| CliError::Validation(e.to_string()))?;
            if let Some(root) = root {
                let report = apply(&set, &ResctrlLayout::mock(root)).map_err(|e| CliError::Io(e.to_string()))?;
                for g in &report.groups {
                    match &g.status {
                        GroupStatus::Unchanged => eprintln!("{}: unchanged", g.group),
                        GroupStatus::Written => eprintln!("{}: written", g.group),
                        GroupStatus::Failed(e) => eprintln!("{}: failed: {e}", g.group),
                    }
                }
                if !report.is_ok() {
                    return Err(CliError::Io(format!("{} groups failed", report.failures().count())));
                }
            }
            emit(text, &output)
        }
        Command::Validate { scenario } => {
            let loaded = scenario::load(&scenario)?;
            for p in &loaded.file.policies {
                loaded.scenario(*p)?;
            }
            if loaded.file.policies.is_empty() {
                loaded.scenario(Policy::Coco)?;
            }
            Ok(format!(
                "{}: ok ({} workloads, {} CLOSs)\n",
                scenario.display(),
                loaded.file.workloads.len(),
                loaded.file.machine.clos_count
            ))
        }
    }
}

/// Parses arguments, runs, prints, and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
