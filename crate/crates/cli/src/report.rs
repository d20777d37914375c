use std::path::Path;

use tdrift_core::eval::{Aggregate, MetricRecord, MetricSummary, ResultTable, RESULTS_CSV_HEADER};

use crate::error::CliError;
use crate::fsutil::{read_to_string, write_atomic};
use crate::run::{plot_csv, PLOT_FILE, RESULTS_FILE};

pub const REPORT_FILE: &str = "report.md";

/// Parses a results table written by `run`.
pub fn parse_results(text: &str) -> Result<Vec<MetricRecord>, CliError> {
    let mut lines = text.lines();
    if lines.next() != Some(RESULTS_CSV_HEADER) {
        return Err(CliError::Validation(format!(
            "results table must start with `{RESULTS_CSV_HEADER}`"
        )));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = |what: &str| CliError::Validation(format!("results line {}: {what}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad("expected 7 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
            Ok(MetricRecord {
                method: f[0].into(),
                seed: f[1].parse().map_err(|_| bad("bad seed"))?,
                split: f[2].into(),
                period: match f[3] {
                    "" => None,
                    p => Some(p.parse().map_err(|_| bad("bad period"))?),
                },
                macro_f1: num(f[4])?,
                micro_f1: num(f[5])?,
                mrp: num(f[6])?,
            })
        })
        .collect()
}

/// `**x**` for the best mean in a column, `<u>x</u>` for the runner-up.
/// Equal means share a marker.
fn markers(means: &[f64]) -> Vec<u8> {
    let mut distinct: Vec<f64> = means.iter().copied().filter(|m| m.is_finite()).collect();
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup();
    means
        .iter()
        .map(|m| match distinct.iter().position(|d| d == m) {
            Some(0) => 1,
            Some(1) => 2,
            _ => 0,
        })
        .collect()
}

fn cell(s: &MetricSummary, marker: u8) -> String {
    let text = format!("{:.2}_{{{:.2}}}", 100.0 * s.mean, 100.0 * s.std);
    match marker {
        1 => format!("**{text}**"),
        2 => format!("<u>{text}</u>"),
        _ => text,
    }
}

/// Markdown table of `mean_{std}` per method, in percent.
pub fn markdown_table(aggregates: &[Aggregate]) -> String {
    let columns: [fn(&Aggregate) -> &MetricSummary; 3] = [|a| &a.macro_f1, |a| &a.micro_f1, |a| &a.mrp];
    let marks: Vec<Vec<u8>> = columns
        .iter()
        .map(|c| markers(&aggregates.iter().map(|a| c(a).mean).collect::<Vec<_>>()))
        .collect();
    let mut out = String::from("| Method | n | Macro-F1 | Micro-F1 | mRP |\n|---|---:|---:|---:|---:|\n");
    for (i, a) in aggregates.iter().enumerate() {
        out.push_str(&format!("| {} | {} ", a.method, a.n));
        for (c, col) in columns.iter().enumerate() {
            out.push_str(&format!("| {} ", cell(col(a), marks[c][i])));
        }
        out.push_str("|\n");
    }
    out
}

/// Renders the report for a run directory and refreshes its plot table.
pub fn cmd_report(dir: &Path) -> Result<String, CliError> {
    let path = dir.join(RESULTS_FILE);
    if !path.is_file() {
        return Err(CliError::Validation(format!("{} does not exist", path.display())));
    }
    let records = parse_results(&read_to_string(&path)?)?;
    let table = ResultTable::from_records(records);
    let md = markdown_table(&table.aggregates);
    write_atomic(&dir.join(REPORT_FILE), md.as_bytes())?;
    write_atomic(&dir.join(PLOT_FILE), plot_csv(&table.records).as_bytes())?;
    Ok(md)
}
