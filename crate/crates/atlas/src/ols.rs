//! Least squares with cluster-robust covariance.
//!
//! The primary fit path goes through a column-pivoted QR factorization;
//! differenced designs can be ill-conditioned, so normal equations are left
//! to the test oracles. The covariance is the clustered sandwich
//! `c * (X'X)^-1 (sum_g X_g' e_g e_g' X_g) (X'X)^-1` with the small-sample
//! factor `c = G/(G-1) * (n-1)/(n-k)`, which collapses to HC1 when every
//! cluster is a singleton.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{AtlasError, Result};
use crate::panel::{piecewise_split, Panel};

/// Relative pivot tolerance for declaring a design rank deficient.
const RANK_TOLERANCE: f64 = 1e-10;

/// Regressor matrix (intercept first), outcome, and cluster keys.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub clusters: Vec<String>,
    pub names: Vec<String>,
}

impl DesignMatrix {
    pub fn new(
        x: DMatrix<f64>,
        y: DVector<f64>,
        clusters: Vec<String>,
        names: Vec<String>,
    ) -> Result<Self> {
        let (n, k) = (x.nrows(), x.ncols());
        if y.len() != n || clusters.len() != n {
            return Err(AtlasError::InvalidInput(format!(
                "design rows disagree: x has {n}, y has {}, clusters has {}",
                y.len(),
                clusters.len()
            )));
        }
        if names.len() != k {
            return Err(AtlasError::InvalidInput(format!(
                "{} column names for {k} columns",
                names.len()
            )));
        }
        if n <= k {
            return Err(AtlasError::InvalidInput(format!(
                "need more rows than columns, got n={n}, k={k}"
            )));
        }
        if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(AtlasError::InvalidInput("non-finite entry in design".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(AtlasError::InvalidInput(format!(
                    "duplicate column name '{name}'"
                )));
            }
        }
        Ok(DesignMatrix {
            x,
            y,
            clusters,
            names,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn k(&self) -> usize {
        self.x.ncols()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Build the standard design from a panel: intercept, split terms (when the
/// spec has a split variable), covariate differences, period dummies.
pub fn design_from_panel(panel: &Panel) -> Result<DesignMatrix> {
    let n = panel.observations.len();
    let split_cols = if panel.split_name.is_some() { 2 } else { 0 };
    let k = 1 + split_cols + panel.covariate_names.len() + panel.period_labels.len().saturating_sub(1);
    let mut names = Vec::with_capacity(k);
    names.push("intercept".to_string());
    if let Some(split) = &panel.split_name {
        names.push(format!("{split}_plus"));
        names.push(format!("{split}_minus"));
    }
    for c in &panel.covariate_names {
        names.push(format!("d_{c}"));
    }
    for label in panel.period_labels.iter().skip(1) {
        names.push(format!("period_{label}"));
    }

    let mut x = DMatrix::zeros(n, k);
    let mut y = DVector::zeros(n);
    let mut clusters = Vec::with_capacity(n);
    for (i, obs) in panel.observations.iter().enumerate() {
        let mut j = 0;
        x[(i, j)] = 1.0;
        j += 1;
        if split_cols == 2 {
            x[(i, j)] = obs.split_plus;
            x[(i, j + 1)] = obs.split_minus;
            j += 2;
        }
        for &c in &obs.covariates {
            x[(i, j)] = c;
            j += 1;
        }
        for &d in &obs.period_dummies {
            x[(i, j)] = d;
            j += 1;
        }
        y[i] = obs.outcome;
        clusters.push(obs.cluster.clone());
    }
    DesignMatrix::new(x, y, clusters, names)
}

/// Coefficients, clustered covariance, and fit statistics for one
/// specification.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub label: String,
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    /// Row-major clustered covariance.
    pub covariance: Vec<Vec<f64>>,
    pub std_errors: Vec<f64>,
    pub n: usize,
    pub k: usize,
    pub n_clusters: usize,
    pub r_squared: f64,
    pub adj_r_squared: f64,
    pub rmse: f64,
    /// Drop-reason counts carried over from the panel build.
    pub drop_summary: BTreeMap<String, usize>,
}

impl EstimateReport {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.beta[i])
    }

    pub fn std_error(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.std_errors[i])
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let k = self.names.len();
        DMatrix::from_fn(k, k, |i, j| self.covariance[i][j])
    }

    pub fn beta_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.beta.clone())
    }
}

/// Fit by column-pivoted QR with clustered sandwich covariance.
pub fn fit(design: &DesignMatrix) -> Result<EstimateReport> {
    fit_labeled(design, "", BTreeMap::new())
}

pub fn fit_labeled(
    design: &DesignMatrix,
    label: &str,
    drop_summary: BTreeMap<String, usize>,
) -> Result<EstimateReport> {
    let (n, k) = (design.n(), design.k());
    let qr = design.x.clone().col_piv_qr();
    let r = qr.r();
    let p = qr.p();

    // Rank check on the pivoted R diagonal.
    let pivot0 = r[(0, 0)].abs();
    if pivot0 == 0.0 {
        return Err(AtlasError::RankDeficient {
            columns: design.names.clone(),
        });
    }
    let rank = (0..k)
        .take_while(|&i| r[(i, i)].abs() > RANK_TOLERANCE * pivot0)
        .count();
    if rank < k {
        // The permutation pivots dependent columns last; recover the original
        // column order by applying it to an index row.
        let mut order = nalgebra::RowDVector::<f64>::from_fn(k, |_, j| j as f64);
        p.permute_columns(&mut order);
        let mut columns: Vec<String> = order
            .iter()
            .skip(rank)
            .map(|&j| design.names[j as usize].clone())
            .collect();
        columns.sort();
        return Err(AtlasError::RankDeficient { columns });
    }

    // beta = P R^-1 Q'y  (X P = Q R).
    let q = qr.q();
    let qty = q.transpose() * &design.y;
    let mut beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| AtlasError::Singular("upper-triangular solve in QR".into()))?;
    p.inv_permute_rows(&mut beta);

    let residuals = &design.y - &design.x * &beta;

    // (X'X)^-1 = P R^-1 R^-T P'.
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| AtlasError::Singular("inverse of R".into()))?;
    let mut bread = &r_inv * r_inv.transpose();
    p.inv_permute_rows(&mut bread);
    p.inv_permute_columns(&mut bread);

    let covariance = clustered_sandwich(&design.x, &residuals, &bread, &design.clusters)?;
    let n_clusters = count_clusters(&design.clusters);

    let mean_y = design.y.mean();
    let ss_res: f64 = residuals.iter().map(|e| e * e).sum();
    let ss_tot: f64 = design.y.iter().map(|v| (v - mean_y) * (v - mean_y)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    let adj_r_squared = 1.0 - (1.0 - r_squared) * (n as f64 - 1.0) / (n as f64 - k as f64);
    let rmse = (ss_res / n as f64).sqrt();

    let std_errors: Vec<f64> = (0..k).map(|j| covariance[(j, j)].max(0.0).sqrt()).collect();
    Ok(EstimateReport {
        label: label.to_string(),
        names: design.names.clone(),
        beta: beta.iter().copied().collect(),
        covariance: (0..k)
            .map(|i| (0..k).map(|j| covariance[(i, j)]).collect())
            .collect(),
        std_errors,
        n,
        k,
        n_clusters,
        r_squared,
        adj_r_squared,
        rmse,
        drop_summary,
    })
}

fn count_clusters(clusters: &[String]) -> usize {
    clusters.iter().collect::<std::collections::BTreeSet<_>>().len()
}

/// `c * bread * (sum_g s_g s_g') * bread` with `s_g = X_g' e_g`.
pub(crate) fn clustered_sandwich(
    x: &DMatrix<f64>,
    residuals: &DVector<f64>,
    bread: &DMatrix<f64>,
    clusters: &[String],
) -> Result<DMatrix<f64>> {
    let (n, k) = (x.nrows(), x.ncols());
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, c) in clusters.iter().enumerate() {
        groups.entry(c.as_str()).or_default().push(i);
    }
    let g = groups.len();
    if g < 2 {
        return Err(AtlasError::TooFewClusters(g));
    }
    let mut meat = DMatrix::<f64>::zeros(k, k);
    for rows in groups.values() {
        let mut score = DVector::<f64>::zeros(k);
        for &i in rows {
            let e = residuals[i];
            for j in 0..k {
                score[j] += x[(i, j)] * e;
            }
        }
        meat += &score * score.transpose();
    }
    let (nf, kf, gf) = (n as f64, k as f64, g as f64);
    let c = (gf / (gf - 1.0)) * ((nf - 1.0) / (nf - kf));
    let v = bread * meat * bread * c;
    // Symmetrize away rounding asymmetry.
    Ok((&v + v.transpose()) * 0.5)
}

/// Wald chi-squared test of `R beta = r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WaldTest {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

pub fn wald_test(
    report: &EstimateReport,
    restrict: &DMatrix<f64>,
    target: &DVector<f64>,
) -> Result<WaldTest> {
    let q = restrict.nrows();
    let k = report.names.len();
    if restrict.ncols() != k || target.len() != q || q == 0 {
        return Err(AtlasError::InvalidInput(format!(
            "restriction dims do not conform: R is {}x{}, r has {}, k = {k}",
            restrict.nrows(),
            restrict.ncols(),
            target.len()
        )));
    }
    let diff = restrict * report.beta_vector() - target;
    let rvr = restrict * report.covariance_matrix() * restrict.transpose();
    let rvr_inv = rvr
        .try_inverse()
        .ok_or_else(|| AtlasError::Singular("R V R' in Wald test".into()))?;
    let statistic = (diff.transpose() * rvr_inv * diff)[(0, 0)].max(0.0);
    let p_value = if statistic == 0.0 {
        1.0
    } else {
        let dist = ChiSquared::new(q as f64)
            .map_err(|e| AtlasError::InvalidInput(format!("chi-squared: {e}")))?;
        1.0 - dist.cdf(statistic)
    };
    Ok(WaldTest {
        statistic,
        df: q,
        p_value,
    })
}

/// Preset for the equality test between two named coefficients
/// (H0: beta_a = beta_b).
pub fn wald_equal_coefficients(
    report: &EstimateReport,
    name_a: &str,
    name_b: &str,
) -> Result<WaldTest> {
    let k = report.names.len();
    let a = report
        .names
        .iter()
        .position(|n| n == name_a)
        .ok_or_else(|| AtlasError::Config(format!("unknown coefficient '{name_a}'")))?;
    let b = report
        .names
        .iter()
        .position(|n| n == name_b)
        .ok_or_else(|| AtlasError::Config(format!("unknown coefficient '{name_b}'")))?;
    let mut restrict = DMatrix::zeros(1, k);
    restrict[(0, a)] = 1.0;
    restrict[(0, b)] = -1.0;
    wald_test(report, &restrict, &DVector::zeros(1))
}

/// One point of the margins curve with its 95% pointwise band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MarginsPoint {
    pub grid: f64,
    pub fit: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Predicted outcome over a grid of split-variable changes, applying the
/// piecewise split at each grid value. `base` fixes the remaining columns
/// (absent names default to zero; the intercept is always 1).
pub fn margins(
    report: &EstimateReport,
    plus_name: &str,
    minus_name: &str,
    grid: &[f64],
    base: &BTreeMap<String, f64>,
) -> Result<Vec<MarginsPoint>> {
    let k = report.names.len();
    let plus_idx = report
        .names
        .iter()
        .position(|n| n == plus_name)
        .ok_or_else(|| AtlasError::Config(format!("unknown coefficient '{plus_name}'")))?;
    let minus_idx = report
        .names
        .iter()
        .position(|n| n == minus_name)
        .ok_or_else(|| AtlasError::Config(format!("unknown coefficient '{minus_name}'")))?;
    for name in base.keys() {
        if !report.names.iter().any(|n| n == name) {
            return Err(AtlasError::Config(format!("unknown base column '{name}'")));
        }
    }
    if grid.iter().any(|g| !g.is_finite()) {
        return Err(AtlasError::InvalidInput("non-finite grid value".into()));
    }

    let beta = report.beta_vector();
    let cov = report.covariance_matrix();
    let mut out = Vec::with_capacity(grid.len());
    for &g in grid {
        let mut contrast = DVector::zeros(k);
        for (j, name) in report.names.iter().enumerate() {
            if name == "intercept" {
                contrast[j] = 1.0;
            } else if let Some(v) = base.get(name) {
                contrast[j] = *v;
            }
        }
        let (plus, minus) = piecewise_split(g);
        contrast[plus_idx] = plus;
        contrast[minus_idx] = minus;
        let fit = contrast.dot(&beta);
        let var = (contrast.transpose() * &cov * &contrast)[(0, 0)].max(0.0);
        let half = 1.96 * var.sqrt();
        out.push(MarginsPoint {
            grid: g,
            fit,
            lo: fit - half,
            hi: fit + half,
        });
    }
    Ok(out)
}
