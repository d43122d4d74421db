//! Linux resctrl surface: schemata text and the `closN` group directories.
//!
//! The same code drives a mock directory tree (write-then-rename) or a
//! mounted resctrl filesystem (direct writes, since the kernel rejects
//! renames there).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::clos::{validate, CapacityMask, ClosConfig, ClosSet, MigrationEvent};

/// Overrides the resctrl root.
pub const ENV_ROOT: &str = "RESCTRL_ROOT";
pub const DEFAULT_ROOT: &str = "/sys/fs/resctrl";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    /// 1-based.
    pub line: usize,
    /// 1-based, in characters.
    pub column: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}, column {}: {}", self.line, self.column, self.message)
    }
}

impl std::error::Error for ParseError {}

#[derive(Debug, Error)]
pub enum ResctrlError {
    #[error("schemata parse error: {0}")]
    Parse(#[from] ParseError),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("apply drift in {group}: {detail}")]
    Drift { group: String, detail: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ResctrlError + '_ {
    move |source| ResctrlError::Io { path: path.to_path_buf(), source }
}

fn check_config(c: &ClosConfig) -> Result<(), ResctrlError> {
    if c.mask.is_empty() {
        return Err(ResctrlError::Invalid(format!("clos {}: zero mask", c.id)));
    }
    if !c.mask.is_contiguous() {
        return Err(ResctrlError::Invalid(format!("clos {}: non-contiguous mask {:x}", c.id, c.mask)));
    }
    if !(1..=100).contains(&c.mba_percent) {
        return Err(ResctrlError::Invalid(format!("clos {}: MBA {}% outside 1..=100", c.id, c.mba_percent)));
    }
    Ok(())
}

/// `L3:<id>=<hex>\nMB:<id>=<percent>\n`.
pub fn serialize_schemata(c: &ClosConfig, cache_id: u32) -> Result<String, ResctrlError> {
    serialize_schemata_domains(c, &[cache_id])
}

/// One clause per cache domain, comma-separated, same values on every domain.
pub fn serialize_schemata_domains(c: &ClosConfig, cache_ids: &[u32]) -> Result<String, ResctrlError> {
    check_config(c)?;
    if cache_ids.is_empty() {
        return Err(ResctrlError::Invalid("no cache domain".into()));
    }
    let clause = |value: String| cache_ids.iter().map(|id| format!("{id}={value}")).collect::<Vec<_>>().join(",");
    Ok(format!("L3:{}\nMB:{}\n", clause(format!("{:x}", c.mask)), clause(c.mba_percent.to_string())))
}

/// Parsed schemata: per-domain values of both resources.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Schemata {
    pub l3: BTreeMap<u32, CapacityMask>,
    pub mb: BTreeMap<u32, u32>,
}

impl Schemata {
    /// Mask and MBA of one cache domain.
    pub fn domain(&self, cache_id: u32) -> Option<(CapacityMask, u32)> {
        Some((*self.l3.get(&cache_id)?, *self.mb.get(&cache_id)?))
    }

    pub fn to_config(&self, id: u8, cache_id: u32) -> Option<ClosConfig> {
        self.domain(cache_id).map(|(mask, mba)| ClosConfig::new(id, mask, mba))
    }
}

/// Parses schemata text. Surrounding whitespace, blank lines, line order and
/// `;` as an alternative domain separator are tolerated.
pub fn parse_schemata(text: &str) -> Result<Schemata, ParseError> {
    let mut out = Schemata::default();
    let mut seen_l3 = false;
    let mut seen_mb = false;
    let mut last_line = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        last_line = line;
        let indent = raw.chars().take_while(|c| c.is_whitespace()).count();
        let body = raw.trim();
        if body.is_empty() {
            continue;
        }
        let err = |col: usize, message: String| ParseError { line, column: col + 1, message };
        let Some(colon) = body.find(':') else {
            return Err(err(indent, format!("expected '<resource>:' in {body:?}")));
        };
        let resource = body[..colon].trim();
        let is_l3 = match resource {
            "L3" => true,
            "MB" => false,
            other => return Err(err(indent, format!("unsupported resource {other}"))),
        };
        if (is_l3 && seen_l3) || (!is_l3 && seen_mb) {
            return Err(err(indent, format!("duplicate {resource} line")));
        }
        if is_l3 {
            seen_l3 = true;
        } else {
            seen_mb = true;
        }
        let mut col = indent + body[..=colon].chars().count();
        for assign in body[colon + 1..].split([',', ';']) {
            let lead = assign.chars().take_while(|c| c.is_whitespace()).count();
            let at = col + lead;
            col += assign.chars().count() + 1;
            let assign = assign.trim();
            let Some((id, value)) = assign.split_once('=') else {
                return Err(err(at, format!("expected '<cache_id>=<value>', found {assign:?}")));
            };
            let id_str = id.trim();
            let cache_id: u32 = id_str.parse().map_err(|_| err(at, format!("malformed cache id {id_str:?}")))?;
            let value_col = at + id.chars().count() + 1 + (value.len() - value.trim_start().len());
            let value = value.trim();
            if is_l3 {
                let bits = if value.is_empty() || !value.chars().all(|c| c.is_ascii_hexdigit()) {
                    None
                } else {
                    u64::from_str_radix(value, 16).ok()
                };
                let Some(bits) = bits else {
                    return Err(err(value_col, format!("malformed hex mask {value:?}")));
                };
                if bits == 0 {
                    return Err(err(value_col, "zero mask".into()));
                }
                if out.l3.insert(cache_id, CapacityMask(bits)).is_some() {
                    return Err(err(at, format!("duplicate cache id {cache_id}")));
                }
            } else {
                let pct: u32 = match value.parse() {
                    Ok(v) if value.chars().all(|c| c.is_ascii_digit()) => v,
                    _ => return Err(err(value_col, format!("malformed percent {value:?}"))),
                };
                if !(1..=100).contains(&pct) {
                    return Err(err(value_col, format!("percent {pct} outside 1..=100")));
                }
                if out.mb.insert(cache_id, pct).is_some() {
                    return Err(err(at, format!("duplicate cache id {cache_id}")));
                }
            }
        }
    }
    for (seen, what) in [(seen_l3, "L3"), (seen_mb, "MB")] {
        if !seen {
            return Err(ParseError { line: last_line + 1, column: 1, message: format!("missing {what} line") });
        }
    }
    Ok(out)
}

/// Every CLOS of `set` as text blocks, one per CLOS in id order.
pub fn render_set(set: &ClosSet, cache_id: u32) -> Result<String, ResctrlError> {
    let mut blocks = Vec::new();
    for c in &set.configs {
        let tag = if c.id == set.reserved_id { " (reserved)" } else { "" };
        blocks.push(format!("clos{}{tag}\n{}", c.id, serialize_schemata(c, cache_id)?));
    }
    Ok(blocks.join("\n"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteMode {
    /// Write a temporary file and rename it over the target.
    Atomic,
    /// Write in place, as a real resctrl mount requires.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResctrlLayout {
    pub root: PathBuf,
    pub mode: WriteMode,
    pub cache_id: u32,
}

impl ResctrlLayout {
    /// Mock layout rooted at `root`.
    pub fn mock(root: impl Into<PathBuf>) -> Self {
        ResctrlLayout { root: root.into(), mode: WriteMode::Atomic, cache_id: 0 }
    }

    /// The mounted filesystem, or `$RESCTRL_ROOT` in mock mode when set.
    pub fn from_env() -> Self {
        match std::env::var_os(ENV_ROOT) {
            Some(root) if !root.is_empty() => ResctrlLayout::mock(root),
            _ => ResctrlLayout { root: PathBuf::from(DEFAULT_ROOT), mode: WriteMode::Direct, cache_id: 0 },
        }
    }

    pub fn group_name(clos_id: u8) -> String {
        format!("clos{clos_id}")
    }

    pub fn group_dir(&self, clos_id: u8) -> PathBuf {
        self.root.join(Self::group_name(clos_id))
    }

    /// The reserved CLOS is the default group at the root.
    fn schemata_path(&self, set: &ClosSet, clos_id: u8) -> PathBuf {
        if clos_id == set.reserved_id {
            self.root.join("schemata")
        } else {
            self.group_dir(clos_id).join("schemata")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GroupStatus {
    Unchanged,
    Written,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupReport {
    /// `closN`, or `default` for the root group.
    pub group: String,
    pub clos_id: u8,
    pub status: GroupStatus,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ApplyReport {
    pub groups: Vec<GroupReport>,
}

impl ApplyReport {
    pub fn rewrites(&self) -> usize {
        self.groups.iter().filter(|g| g.status == GroupStatus::Written).count()
    }

    pub fn failures(&self) -> impl Iterator<Item = &GroupReport> {
        self.groups.iter().filter(|g| matches!(g.status, GroupStatus::Failed(_)))
    }

    pub fn is_ok(&self) -> bool {
        self.failures().next().is_none()
    }
}

fn write_file(path: &Path, content: &str, mode: WriteMode) -> io::Result<()> {
    match mode {
        WriteMode::Direct => {
            let mut f = fs::OpenOptions::new().write(true).create(true).truncate(true).open(path)?;
            f.write_all(content.as_bytes())
        }
        WriteMode::Atomic => {
            let mut tmp = path.as_os_str().to_owned();
            tmp.push(".tmp");
            let tmp = PathBuf::from(tmp);
            fs::write(&tmp, content)?;
            fs::rename(&tmp, path).inspect_err(|_| {
                let _ = fs::remove_file(&tmp);
            })
        }
    }
}

/// Current (mask, MBA) of the file, if it exists and parses.
fn current(path: &Path, cache_id: u32) -> Option<(CapacityMask, u32)> {
    let text = fs::read_to_string(path).ok()?;
    parse_schemata(&text).ok()?.domain(cache_id)
}

fn apply_one(layout: &ResctrlLayout, set: &ClosSet, c: &ClosConfig) -> Result<GroupStatus, String> {
    let path = layout.schemata_path(set, c.id);
    let want = (c.mask, c.mba_percent);
    if current(&path, layout.cache_id) == Some(want) {
        return Ok(GroupStatus::Unchanged);
    }
    let text = serialize_schemata(c, layout.cache_id).map_err(|e| e.to_string())?;
    let group_dir = (c.id != set.reserved_id).then(|| layout.group_dir(c.id));
    let mut created = false;
    if let Some(dir) = &group_dir {
        if !dir.is_dir() {
            fs::create_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
            created = true;
        }
    }
    let result = (|| -> io::Result<()> {
        write_file(&path, &text, layout.mode)?;
        if let (Some(dir), WriteMode::Atomic) = (&group_dir, layout.mode) {
            for name in ["tasks", "cpus"] {
                let p = dir.join(name);
                if !p.exists() {
                    fs::write(p, "")?;
                }
            }
        }
        Ok(())
    })();
    match result {
        Ok(()) => Ok(GroupStatus::Written),
        Err(e) => {
            if created && layout.mode == WriteMode::Atomic {
                if let Some(dir) = &group_dir {
                    let _ = fs::remove_dir_all(dir);
                }
            }
            Err(format!("{}: {e}", path.display()))
        }
    }
}

/// Writes every CLOS of `set` under `layout`. Unchanged groups are left
/// alone; failures are reported per group. Written groups are read back and
/// any difference is an error.
pub fn apply(set: &ClosSet, layout: &ResctrlLayout) -> Result<ApplyReport, ResctrlError> {
    validate(set)
        .map_err(|v| ResctrlError::Invalid(v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")))?;
    let mut report = ApplyReport::default();
    let mut order: Vec<&ClosConfig> = set.lc_configs().collect();
    order.extend(set.reserved());
    for c in order {
        let status = apply_one(layout, set, c).unwrap_or_else(GroupStatus::Failed);
        let group = if c.id == set.reserved_id { "default".to_string() } else { ResctrlLayout::group_name(c.id) };
        if status == GroupStatus::Written {
            let path = layout.schemata_path(set, c.id);
            let got = current(&path, layout.cache_id);
            if got != Some((c.mask, c.mba_percent)) {
                return Err(ResctrlError::Drift {
                    group,
                    detail: match got {
                        Some((m, b)) => {
                            format!("read back L3 {m:x} MB {b}, wrote L3 {:x} MB {}", c.mask, c.mba_percent)
                        }
                        None => "schemata unreadable after write".into(),
                    },
                });
            }
        }
        report.groups.push(GroupReport { group, clos_id: c.id, status });
    }
    Ok(report)
}

/// Reads the CLOS set back from `layout`, using `like` for ids and machine.
pub fn read_back(like: &ClosSet, layout: &ResctrlLayout) -> Result<ClosSet, ResctrlError> {
    let mut configs = Vec::new();
    for c in &like.configs {
        let path = layout.schemata_path(like, c.id);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let parsed = parse_schemata(&text)?;
        let cfg = parsed.to_config(c.id, layout.cache_id).ok_or_else(|| ResctrlError::Drift {
            group: ResctrlLayout::group_name(c.id),
            detail: format!("no cache domain {}", layout.cache_id),
        })?;
        configs.push(cfg);
    }
    Ok(ClosSet { machine: like.machine, configs, reserved_id: like.reserved_id })
}

/// Appends PIDs to a group's `tasks` file, one write per PID. Liveness is not checked.
pub fn assign_tasks(layout: &ResctrlLayout, clos_id: u8, pids: &[u32]) -> Result<(), ResctrlError> {
    let path = layout.group_dir(clos_id).join("tasks");
    let mut f = fs::OpenOptions::new().append(true).create(true).open(&path).map_err(io_err(&path))?;
    for pid in pids {
        f.write_all(format!("{pid}\n").as_bytes()).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Records the cache flushes a run would issue; flushing itself needs
/// privileged hardware access and is not performed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlushLog {
    pub events: Vec<(u32, MigrationEvent)>,
}

impl FlushLog {
    pub fn hook(&mut self) -> impl FnMut(u32, &MigrationEvent) + '_ {
        move |epoch, e| {
            if e.flush_required {
                self.events.push((epoch, *e));
            }
        }
    }
}
