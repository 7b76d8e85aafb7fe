use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::EstimateError;
use crate::numeric;

/// 97.5% standard normal quantile.
pub const Z_975: f64 = 1.959964;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldReport {
    pub estimate: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    pub contrast: Vec<f64>,
    pub level: f64,
}

impl WaldReport {
    pub fn new(estimate: f64, std_error: f64, contrast: Vec<f64>, level: f64) -> Result<Self, EstimateError> {
        if !(std_error.is_finite() && std_error > 0.0) {
            return Err(EstimateError::ZeroVariance);
        }
        let z = if level == 0.95 {
            Z_975
        } else {
            numeric::normal_quantile(0.5 + level / 2.0)
        };
        Ok(Self {
            estimate,
            std_error,
            ci_low: estimate - z * std_error,
            ci_high: estimate + z * std_error,
            p_value: numeric::two_sided_p(estimate / std_error),
            contrast,
            level,
        })
    }

    pub fn row(&self, variable: &str) -> ReportRow {
        ReportRow {
            variable: variable.to_string(),
            estimate: self.estimate,
            ci_low: self.ci_low,
            ci_high: self.ci_high,
            p_value: self.p_value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variable: String,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
}

fn decimals(v: f64) -> usize {
    if v == 0.0 || !v.is_finite() {
        return 1;
    }
    (-v.abs().log10().floor()).clamp(1.0, 12.0) as usize
}

fn fixed(v: f64, d: usize) -> String {
    let s = format!("{v:.d$}");
    match s.strip_prefix('-') {
        Some(rest) if rest.chars().all(|c| c == '0' || c == '.') => rest.to_string(),
        _ => s,
    }
}

/// `"est (low, high)"` with as many decimals as the estimate's leading digit needs (at least 1).
pub fn format_estimate(estimate: f64, ci_low: f64, ci_high: f64) -> String {
    let d = decimals(estimate);
    format!("{} ({}, {})", fixed(estimate, d), fixed(ci_low, d), fixed(ci_high, d))
}

/// Two decimals without the leading zero; `<.01` below that.
pub fn format_p_value(p: f64) -> String {
    let r = (p * 100.0).round() / 100.0;
    if r < 0.01 {
        "<.01".to_string()
    } else if r >= 1.0 {
        "1.00".to_string()
    } else {
        format!("{r:.2}").trim_start_matches('0').to_string()
    }
}

/// Tab-separated report; values use the shortest round-trip representation.
pub fn write_tsv(rows: &[ReportRow]) -> String {
    let mut out = String::from("variable\testimate\tci_low\tci_high\tp_value\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{:?}\t{:?}\t{:?}\t{:?}", r.variable, r.estimate, r.ci_low, r.ci_high, r.p_value);
    }
    out
}

/// Human-readable table in the `Estimate (95% CI) | P` layout.
pub fn render_table(rows: &[ReportRow]) -> String {
    let cells: Vec<[String; 3]> = rows
        .iter()
        .map(|r| {
            [
                r.variable.clone(),
                format_estimate(r.estimate, r.ci_low, r.ci_high),
                format_p_value(r.p_value),
            ]
        })
        .collect();
    let header = ["Variable".to_string(), "Estimate (95% CI)".to_string(), "P".to_string()];
    let width = |i: usize| {
        cells
            .iter()
            .map(|c| c[i].chars().count())
            .chain(std::iter::once(header[i].chars().count()))
            .max()
            .unwrap_or(0)
    };
    let (w0, w1) = (width(0), width(1));
    let mut out = String::new();
    for c in std::iter::once(&header).chain(&cells) {
        let _ = writeln!(out, "{:<w0$}  {:<w1$}  {}", c[0], c[1], c[2]);
    }
    out
}
