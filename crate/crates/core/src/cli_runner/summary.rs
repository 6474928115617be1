//! Aggregation of sweep rows into per-(method, mean skill, k) summaries:
//! mean and sample standard deviation over seed replicates, rendered as CSV
//! and as a Markdown table.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cli_runner::config::Method;
use crate::cli_runner::experiment::{ResultRow, RunStatus};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub mean_p: f64,
    pub k: usize,
    /// All rows in the group, successful or not.
    pub n: usize,
    /// Rows whose metrics enter the statistics.
    pub n_ok: usize,
    pub accuracy_mean: Option<f64>,
    pub accuracy_std: Option<f64>,
    pub cm_error_mean: Option<f64>,
    pub cm_error_std: Option<f64>,
    /// Fraction of the group's cells whose true mean CM was diagonally
    /// dominant (populations are redrawn per seed, so this can be interior).
    pub dominant_frac: f64,
}

/// Mean and sample standard deviation (ddof = 1; a single value has std 0).
fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some((mean, std))
}

/// Groups rows by (method, mean_p, k) in first-appearance order and reduces
/// each group over its seeds.
pub fn summarize(rows: &[ResultRow]) -> Result<Vec<SummaryRow>> {
    if rows.is_empty() {
        return Err(Error::invalid("summary of an empty result table"));
    }
    let mut order: Vec<(Method, u64, usize)> = Vec::new();
    for row in rows {
        let key = (row.method, row.mean_p.to_bits(), row.k);
        if !order.contains(&key) {
            order.push(key);
        }
    }
    let mut out = Vec::with_capacity(order.len());
    for key in order {
        let group: Vec<&ResultRow> = rows
            .iter()
            .filter(|r| (r.method, r.mean_p.to_bits(), r.k) == key)
            .collect();
        let ok: Vec<&&ResultRow> = group
            .iter()
            .filter(|r| r.status == RunStatus::Ok)
            .collect();
        let accuracies: Vec<f64> = ok.iter().filter_map(|r| r.accuracy).collect();
        let cm_errors: Vec<f64> = ok.iter().filter_map(|r| r.cm_error).collect();
        let (accuracy_mean, accuracy_std) = match mean_std(&accuracies) {
            Some((m, s)) => (Some(m), Some(s)),
            None => (None, None),
        };
        let (cm_error_mean, cm_error_std) = match mean_std(&cm_errors) {
            Some((m, s)) => (Some(m), Some(s)),
            None => (None, None),
        };
        let dominant_frac =
            group.iter().filter(|r| r.dominant).count() as f64 / group.len() as f64;
        out.push(SummaryRow {
            method: key.0,
            mean_p: f64::from_bits(key.1),
            k: key.2,
            n: group.len(),
            n_ok: ok.len(),
            accuracy_mean,
            accuracy_std,
            cm_error_mean,
            cm_error_std,
            dominant_frac,
        });
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn save_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut out = String::new();
    writeln!(
        out,
        "method,mean_p,k,n,n_ok,accuracy_mean,accuracy_std,cm_error_mean,cm_error_std,dominant_frac"
    )
    .expect("string write");
    for row in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            row.method,
            row.mean_p,
            row.k,
            row.n,
            row.n_ok,
            opt(row.accuracy_mean),
            opt(row.accuracy_std),
            opt(row.cm_error_mean),
            opt(row.cm_error_std),
            row.dominant_frac
        )
        .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn pm(mean: Option<f64>, std: Option<f64>) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
        _ => "-".to_string(),
    }
}

pub fn save_summary_markdown(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "| method | mean_p | k | runs | accuracy | cm_error | dominant |")
        .expect("string write");
    writeln!(out, "|---|---|---|---|---|---|---|").expect("string write");
    for row in rows {
        writeln!(
            out,
            "| {} | {} | {} | {}/{} | {} | {} | {:.2} |",
            row.method,
            row.mean_p,
            row.k,
            row.n_ok,
            row.n,
            pm(row.accuracy_mean, row.accuracy_std),
            pm(row.cm_error_mean, row.cm_error_std),
            row.dominant_frac
        )
        .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}
