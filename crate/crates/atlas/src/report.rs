//! Text rendering of estimation results.
//!
//! Regression tables use one significance legend everywhere:
//! `+ p<.10, * p<.05, ** p<.01, *** p<.001`, with coefficient p-values from
//! the normal approximation to the clustered t ratio.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::ols::{EstimateReport, WaldTest};
use crate::panel::{CorrelationTest, YearSummary};
use crate::qdgmm::QDEstimate;
use crate::shiftshare::{FirstStage, HansenJ};

pub const STAR_LEGEND: &str = "+ p<0.10, * p<0.05, ** p<0.01, *** p<0.001";

/// Regression-table stars (a finer legend than the correlation tables use).
pub fn report_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else if p < 0.10 {
        "+"
    } else {
        ""
    }
}

fn z_p_value(beta: f64, se: f64) -> f64 {
    if se <= 0.0 {
        return if beta == 0.0 { 1.0 } else { 0.0 };
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    2.0 * (1.0 - normal.cdf((beta / se).abs()))
}

fn coefficient_rows(names: &[String], beta: &[f64], se: &[f64], width: usize) -> String {
    let mut out = String::new();
    for ((name, b), s) in names.iter().zip(beta).zip(se) {
        let stars = report_stars(z_p_value(*b, *s));
        out.push_str(&format!("{name:<width$} {:>12.4}{stars:<4}\n", b));
        out.push_str(&format!("{:<width$} {:>12}\n", "", format!("({s:.4})")));
    }
    out
}

fn name_width(names: &[String]) -> usize {
    names.iter().map(|n| n.len()).max().unwrap_or(8).max(8)
}

/// Aligned coefficient table for an OLS or IV fit.
pub fn estimate_table(report: &EstimateReport) -> String {
    let width = name_width(&report.names);
    let mut out = String::new();
    let rule = "-".repeat(width + 18);
    if !report.label.is_empty() {
        out.push_str(&format!("{}\n", report.label));
    }
    out.push_str(&rule);
    out.push('\n');
    out.push_str(&coefficient_rows(&report.names, &report.beta, &report.std_errors, width));
    out.push_str(&rule);
    out.push('\n');
    out.push_str(&format!("{:<width$} {:>12}\n", "Num.Obs.", report.n));
    out.push_str(&format!("{:<width$} {:>12.3}\n", "R2", report.r_squared));
    out.push_str(&format!("{:<width$} {:>12.3}\n", "R2 Adj.", report.adj_r_squared));
    out.push_str(&format!("{:<width$} {:>12.2}\n", "RMSE", report.rmse));
    out.push_str(&format!(
        "{:<width$} {:>12}\n",
        "Std.Errors",
        format!("by cluster ({})", report.n_clusters)
    ));
    if !report.drop_summary.is_empty() {
        let dropped: usize = report.drop_summary.values().sum();
        out.push_str(&format!("{:<width$} {:>12}\n", "Dropped", dropped));
        for (reason, count) in &report.drop_summary {
            out.push_str(&format!("  {count} x {reason}\n"));
        }
    }
    out.push_str(&format!("{STAR_LEGEND}\n"));
    out
}

/// Coefficient table for the quasi-differenced moment estimator.
pub fn qd_table(estimate: &QDEstimate) -> String {
    let width = name_width(&estimate.names);
    let rule = "-".repeat(width + 18);
    let mut out = String::new();
    if !estimate.label.is_empty() {
        out.push_str(&format!("{}\n", estimate.label));
    }
    out.push_str(&rule);
    out.push('\n');
    out.push_str(&coefficient_rows(
        &estimate.names,
        &estimate.beta,
        &estimate.std_errors,
        width,
    ));
    out.push_str(&rule);
    out.push('\n');
    out.push_str(&format!("{:<width$} {:>12}\n", "Obs.", estimate.n));
    out.push_str(&format!(
        "{:<width$} {:>12}\n",
        "Std.Errors",
        format!("by cluster ({})", estimate.n_clusters)
    ));
    out.push_str(&format!(
        "{:<width$} {:>12}\n",
        "Converged",
        format!("{} iter, |m| {:.1e}", estimate.iterations, estimate.final_moment_norm)
    ));
    if !estimate.drop_summary.is_empty() {
        let dropped: usize = estimate.drop_summary.values().sum();
        out.push_str(&format!("{:<width$} {:>12}\n", "Dropped", dropped));
    }
    out.push_str(&format!("{STAR_LEGEND}\n"));
    out
}

/// One-line rendering of a Wald restriction test.
pub fn wald_line(label: &str, test: &WaldTest) -> String {
    format!(
        "wald[{label}]: chi2({}) = {:.2}, p = {:.4}\n",
        test.df, test.statistic, test.p_value
    )
}

/// Per-year correlation table (raw and logged variants side by side).
pub fn correlation_table(rows: &[(i32, CorrelationTest, CorrelationTest)]) -> String {
    let mut out = String::from("year    raw correlation    log correlation    n\n");
    for (year, raw, logged) in rows {
        out.push_str(&format!(
            "{year}    {:>8.3}{:<3}        {:>8.3}{:<3}       {}\n",
            raw.r, raw.stars, logged.r, logged.stars, raw.n
        ));
    }
    out.push_str("correlation stars: * p<0.05, ** p<0.01, *** p<0.001\n");
    out
}

/// Per-year means table.
pub fn summary_table(summaries: &[YearSummary]) -> String {
    if summaries.is_empty() {
        return "no complete cases\n".into();
    }
    let vars: Vec<&String> = summaries[0].means.keys().collect();
    let mut out = String::from("year  count");
    for v in &vars {
        out.push_str(&format!("  mean({v})  mean(log {v})"));
    }
    out.push('\n');
    for s in summaries {
        out.push_str(&format!("{}  {:>5}", s.year, s.count));
        for v in &vars {
            let mean = s.means.get(*v).copied().unwrap_or(f64::NAN);
            let log_mean = s.log_means.get(*v).copied().unwrap_or(f64::NAN);
            out.push_str(&format!("  {mean:>12.6}  {log_mean:>12.6}"));
        }
        out.push('\n');
    }
    out
}

/// First-stage block: per-equation partial F plus the coefficient table.
pub fn first_stage_table(stages: &[FirstStage]) -> String {
    let mut out = String::new();
    for fs in stages {
        let f_text = if fs.exact_fit {
            "exact fit (zero residual variance)".to_string()
        } else {
            format!("{:.2}", fs.partial_f)
        };
        out.push_str(&format!(
            "first stage [{}]: partial F on excluded instruments = {f_text}\n",
            fs.endogenous_name
        ));
        out.push_str(&estimate_table(&fs.report));
        out.push('\n');
    }
    out
}

/// One-line rendering of the Hansen J test.
pub fn hansen_line(j: &HansenJ) -> String {
    if j.not_testable {
        "hansen J: just-identified, not testable\n".to_string()
    } else {
        format!(
            "hansen J: chi2({}) = {:.3}, p = {:.4}\n",
            j.df, j.statistic, j.p_value
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn star_thresholds() {
        assert_eq!(report_stars(0.0005), "***");
        assert_eq!(report_stars(0.005), "**");
        assert_eq!(report_stars(0.02), "*");
        assert_eq!(report_stars(0.07), "+");
        assert_eq!(report_stars(0.2), "");
    }

    #[test]
    fn table_contains_all_pieces() {
        use std::collections::BTreeMap;
        let report = EstimateReport {
            label: "demo".into(),
            names: vec!["intercept".into(), "rent_plus".into()],
            beta: vec![0.1, 1.74],
            covariance: vec![vec![0.01, 0.0], vec![0.0, 0.3769]],
            std_errors: vec![0.1, 0.613899],
            n: 765,
            k: 2,
            n_clusters: 383,
            r_squared: 0.066,
            adj_r_squared: 0.060,
            rmse: 0.77,
            drop_summary: BTreeMap::from([("nonpositive under log for y".to_string(), 3)]),
        };
        let table = estimate_table(&report);
        assert!(table.contains("rent_plus"));
        assert!(table.contains("1.7400"));
        assert!(table.contains("(0.6139)"));
        assert!(table.contains("Num.Obs."));
        assert!(table.contains("765"));
        assert!(table.contains("by cluster (383)"));
        assert!(table.contains("3 x nonpositive under log for y"));
        assert!(table.contains(STAR_LEGEND));
        // 1.74 / 0.614 = 2.83 -> p about 0.0046 -> two stars.
        assert!(table.contains("1.7400**"));
    }
}
