//! Metric reports as CSV (header row first) and as aligned text tables.

use std::path::Path;

use s2dm_core::eval::MetricReport;

use crate::error::{CliError, CliResult};
use crate::fsutil::write_atomic;

pub const METRIC_COLUMNS: [&str; 4] = ["toy_fd", "flow_mse", "consistency", "n_clips"];

/// One labelled line of a report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    /// Seed the metrics came from, or `None` for a median over seeds.
    pub seed: Option<u64>,
    pub metrics: MetricReport,
}

fn cells(row: &ReportRow) -> Vec<String> {
    let m = &row.metrics;
    vec![
        row.label.clone(),
        row.seed
            .map_or_else(|| "median".to_string(), |s| s.to_string()),
        format!("{:.6}", m.toy_fd),
        format!("{:.6}", m.flow_mse),
        format!("{:.6}", m.consistency),
        m.n_clips.to_string(),
    ]
}

fn header(first: &str) -> Vec<String> {
    [first, "seed"]
        .into_iter()
        .chain(METRIC_COLUMNS)
        .map(str::to_string)
        .collect()
}

/// CSV with a header row; every row also carries the config digest.
pub fn csv_bytes(first: &str, rows: &[ReportRow], config_digest: &str) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| CliError::Io {
        path: "<csv>".into(),
        msg: e.to_string(),
    };
    let mut head = header(first);
    head.push("config_digest".into());
    w.write_record(&head).map_err(to_err)?;
    for row in rows {
        let mut c = cells(row);
        c.push(config_digest.to_string());
        w.write_record(&c).map_err(to_err)?;
    }
    w.into_inner().map_err(|e| CliError::Io {
        path: "<csv>".into(),
        msg: e.to_string(),
    })
}

/// Right-aligned columns under a `# config <digest>` line.
pub fn text_table(first: &str, rows: &[ReportRow], config_digest: &str) -> String {
    let mut lines = vec![header(first)];
    lines.extend(rows.iter().map(cells));
    let widths: Vec<usize> = (0..lines[0].len())
        .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = format!("# config {config_digest}\n");
    for line in &lines {
        let padded: Vec<String> = line
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, &w))| {
                if c == 0 {
                    format!("{cell:<w$}")
                } else {
                    format!("{cell:>w$}")
                }
            })
            .collect();
        out.push_str(padded.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Writes `<stem>.csv` and `<stem>.txt` into `dir`.
pub fn write_report(
    dir: &Path,
    stem: &str,
    first: &str,
    rows: &[ReportRow],
    config_digest: &str,
) -> CliResult<()> {
    write_atomic(
        &dir.join(format!("{stem}.csv")),
        &csv_bytes(first, rows, config_digest)?,
    )?;
    write_atomic(
        &dir.join(format!("{stem}.txt")),
        text_table(first, rows, config_digest).as_bytes(),
    )
}
