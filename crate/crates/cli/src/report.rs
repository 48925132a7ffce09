//! Convergence-trace summaries: plateau estimation, iterations-to-plateau,
//! and the speedup ratio between the two parameterizations.

use crate::{Error, Result};
use auxinfer_core::ConvergenceTrace;
use serde::{Deserialize, Serialize};

/// Fraction of trailing rows averaged to estimate the plateau objective.
const PLATEAU_TAIL: f64 = 0.1;
/// Relative band below the plateau that counts as having arrived.
const PLATEAU_BAND: f64 = 0.05;

/// Summary of one form's run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormReport {
    /// Mean objective over the trailing tenth of the trace.
    pub plateau: f64,
    /// First iteration whose objective enters the 5% band below the
    /// plateau.
    pub iters_to_plateau: u64,
    /// Wall-clock total of the run in seconds.
    pub wall_s: f64,
}

/// Two-form comparison; `speedup_ratio` is original iterations-to-plateau
/// over auxiliary iterations-to-plateau, so values above 1 mean the
/// auxiliary form converged in fewer iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub original: FormReport,
    pub auxiliary: FormReport,
    pub speedup_ratio: f64,
}

/// Mean objective over the trailing tenth of the trace (at least one row).
pub fn plateau(trace: &ConvergenceTrace) -> Result<f64> {
    if trace.rows.is_empty() {
        return Err(Error::Range("empty trace has no plateau".into()));
    }
    let tail = ((trace.rows.len() as f64 * PLATEAU_TAIL).ceil() as usize).max(1);
    let rows = &trace.rows[trace.rows.len() - tail..];
    Ok(rows.iter().map(|r| r.log_joint).sum::<f64>() / rows.len() as f64)
}

/// First iteration whose objective reaches `plateau - 0.05 * |plateau|`.
/// At least one trailing row is always at or above the tail mean, so this
/// exists for any non-empty trace when called with that trace's own
/// plateau.
pub fn iters_to_plateau(trace: &ConvergenceTrace, plateau: f64) -> Result<u64> {
    let threshold = plateau_threshold(plateau);
    trace
        .rows
        .iter()
        .find(|r| r.log_joint >= threshold)
        .map(|r| r.iter)
        .ok_or_else(|| Error::Range("trace never reaches the plateau band".into()))
}

/// The objective level that counts as "within 5% of the plateau".
pub fn plateau_threshold(plateau: f64) -> f64 {
    plateau - PLATEAU_BAND * plateau.abs()
}

/// Plateau, iterations-to-plateau, and wall-clock total for one trace.
pub fn form_report(trace: &ConvergenceTrace) -> Result<FormReport> {
    let p = plateau(trace)?;
    Ok(FormReport {
        plateau: p,
        iters_to_plateau: iters_to_plateau(trace, p)?,
        wall_s: trace.rows.last().map(|r| r.wall_s).unwrap_or(0.0),
    })
}

/// Combine two per-form summaries into a comparison.
pub fn comparison(
    original: &ConvergenceTrace,
    auxiliary: &ConvergenceTrace,
) -> Result<ComparisonReport> {
    let original = form_report(original)?;
    let auxiliary = form_report(auxiliary)?;
    let speedup_ratio = original.iters_to_plateau as f64 / auxiliary.iters_to_plateau as f64;
    Ok(ComparisonReport {
        original,
        auxiliary,
        speedup_ratio,
    })
}

/// Compare two trace CSV texts byte-for-byte except the wall-clock column,
/// which real timing makes unrepeatable.
pub fn csv_equal_ignoring_wall(a: &str, b: &str) -> bool {
    fn strip(text: &str) -> Vec<String> {
        text.lines()
            .enumerate()
            .map(|(i, line)| {
                if i == 0 {
                    return line.to_string();
                }
                let mut fields: Vec<&str> = line.split(',').collect();
                if fields.len() == 6 {
                    fields[1] = "-";
                }
                fields.join(",")
            })
            .collect()
    }
    strip(a) == strip(b)
}

/// Compare two comparison reports exactly, except the wall-clock totals.
pub fn reports_equal_ignoring_wall(a: &ComparisonReport, b: &ComparisonReport) -> bool {
    let zero_wall = |r: &ComparisonReport| {
        let mut r = r.clone();
        r.original.wall_s = 0.0;
        r.auxiliary.wall_s = 0.0;
        r
    };
    zero_wall(a) == zero_wall(b)
}
