//! CSV and aligned-text renderings of simulation results.

use closshare::sim::{Comparison, Metrics};

use crate::CliError;

pub const COLUMNS: [&str; 7] =
    ["policy", "workload", "affordable_load", "retainment", "violations", "migrations", "overhead_fraction"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Table,
}

/// Rows for one policy: optional per-workload rows, then the `total` row.
fn metric_rows(m: &Metrics<f64>, per_workload: bool, ratio: Option<f64>) -> Vec<Vec<String>> {
    let tail = |violations: u64| {
        let mut v = vec![violations.to_string(), m.migrations.to_string(), format!("{:.4}", m.overhead_fraction)];
        if let Some(r) = ratio {
            v.push(format!("{r:.3}"));
        }
        v
    };
    let mut rows = Vec::new();
    if per_workload {
        for w in &m.workloads {
            let mut row = vec![
                m.policy.to_string(),
                w.name.clone(),
                format!("{:.1}", w.affordable_load),
                format!("{:.4}", w.retainment),
            ];
            row.extend(tail(w.slo_violations));
            rows.push(row);
        }
    }
    let mut total = vec![
        m.policy.to_string(),
        "total".to_string(),
        format!("{:.1}", m.workloads.iter().map(|w| w.affordable_load).sum::<f64>()),
        format!("{:.4}", m.total_retainment),
    ];
    total.extend(tail(m.violations()));
    rows.push(total);
    rows
}

fn render(header: &[&str], rows: &[Vec<String>], format: Format) -> Result<String, CliError> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(header).map_err(|e| CliError::Other(e.to_string()))?;
            for r in rows {
                w.write_record(r).map_err(|e| CliError::Other(e.to_string()))?;
            }
            let bytes = w.into_inner().map_err(|e| CliError::Other(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| CliError::Other(e.to_string()))
        }
        Format::Table => {
            let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
            for r in rows {
                for (w, cell) in widths.iter_mut().zip(r) {
                    *w = (*w).max(cell.len());
                }
            }
            let line = |cells: Vec<&str>| {
                let parts: Vec<String> = cells
                    .iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                    .collect();
                parts.join("  ").trim_end().to_string() + "\n"
            };
            let mut out = line(header.to_vec());
            out.push_str(&line(
                widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect(),
            ));
            for r in rows {
                out.push_str(&line(r.iter().map(String::as_str).collect()));
            }
            Ok(out)
        }
    }
}

pub fn metrics(m: &Metrics<f64>, format: Format) -> Result<String, CliError> {
    render(&COLUMNS, &metric_rows(m, true, None), format)
}

/// One `total` row per policy; the table form adds the ratio against NoPartition.
pub fn comparison(c: &Comparison<f64>, per_workload: bool, format: Format) -> Result<String, CliError> {
    let with_ratio = format == Format::Table;
    let mut rows = Vec::new();
    for r in &c.rows {
        rows.extend(metric_rows(&r.metrics, per_workload, with_ratio.then_some(r.ratio)));
    }
    let mut header = COLUMNS.to_vec();
    if with_ratio {
        header.push("ratio_vs_none");
    }
    render(&header, &rows, format)
}
