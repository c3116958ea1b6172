//! Shift-share instruments and the over-identified IV system.
//!
//! Predicted local employment growth is the share-weighted average of
//! national industry growth rates; interacting it with time-invariant supply
//! constraints yields four instruments for three endogenous variables. The
//! system is estimated by two-stage least squares with the same clustered
//! sandwich as the OLS module, plus first-stage strength and Hansen J
//! diagnostics computed on the identical row sample.
//!
//! Main effects of the supply constraints never enter the second stage:
//! they are time-invariant, so they difference out of the long-differenced
//! outcome equation, leaving only their interactions with predicted growth.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{AtlasError, Result};
use crate::ols::{clustered_sandwich, fit_labeled, DesignMatrix, EstimateReport};
use crate::panel::DropLog;

/// Employment shares for one region-year: industry code -> share.
/// Shares are renormalized on load when their sum drifts from one.
#[derive(Debug, Clone, Default)]
pub struct IndustryShares {
    /// msa -> year -> industry -> share.
    data: BTreeMap<String, BTreeMap<i32, BTreeMap<String, f64>>>,
    pub warnings: Vec<String>,
}

const SHARE_SUM_TOLERANCE: f64 = 1e-6;

impl IndustryShares {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, msa: impl Into<String>, year: i32, industry: impl Into<String>, share: f64) -> Result<()> {
        let msa = msa.into();
        let industry = industry.into();
        if !share.is_finite() || share < 0.0 {
            return Err(AtlasError::InvalidInput(format!(
                "share for {msa}/{year}/{industry} must be finite and >= 0, got {share}"
            )));
        }
        self.data
            .entry(msa)
            .or_default()
            .entry(year)
            .or_default()
            .insert(industry, share);
        Ok(())
    }

    /// Renormalize every msa-year to sum to one, warning where the raw sum
    /// was off by more than the tolerance.
    pub fn normalize(&mut self) {
        for (msa, by_year) in self.data.iter_mut() {
            for (year, shares) in by_year.iter_mut() {
                let sum: f64 = shares.values().sum();
                if sum <= 0.0 {
                    continue;
                }
                if (sum - 1.0).abs() > SHARE_SUM_TOLERANCE {
                    self.warnings
                        .push(format!("shares for {msa}/{year} sum to {sum}; renormalized"));
                }
                for v in shares.values_mut() {
                    *v /= sum;
                }
            }
        }
    }

    pub fn row(&self, msa: &str, year: i32) -> Option<&BTreeMap<String, f64>> {
        self.data.get(msa)?.get(&year)
    }

    pub fn msas(&self) -> Vec<String> {
        self.data.keys().cloned().collect()
    }
}

/// National log employment growth per industry for one period.
#[derive(Debug, Clone, Default)]
pub struct NationalGrowth {
    pub growth: BTreeMap<String, f64>,
}

impl NationalGrowth {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, f64)>) -> Result<Self> {
        let mut growth = BTreeMap::new();
        for (k, v) in pairs {
            if !v.is_finite() {
                return Err(AtlasError::InvalidInput(format!(
                    "growth for industry '{k}' is not finite"
                )));
            }
            growth.insert(k, v);
        }
        Ok(NationalGrowth { growth })
    }
}

/// Time-invariant supply constraints for one region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EtaRow {
    pub wri: f64,
    pub elasticity: f64,
    pub undevelopable_share: f64,
}

/// msa -> supply-constraint vector. Held fixed over the whole sample.
#[derive(Debug, Clone, Default)]
pub struct SupplyConstraints {
    rows: BTreeMap<String, EtaRow>,
}

impl SupplyConstraints {
    pub fn insert(&mut self, msa: impl Into<String>, row: EtaRow) -> Result<()> {
        let msa = msa.into();
        if !row.wri.is_finite() {
            return Err(AtlasError::InvalidInput(format!("non-finite WRI for {msa}")));
        }
        if !(row.elasticity > 0.0) {
            return Err(AtlasError::InvalidInput(format!(
                "elasticity for {msa} must be > 0, got {}",
                row.elasticity
            )));
        }
        if !(0.0..=1.0).contains(&row.undevelopable_share) {
            return Err(AtlasError::InvalidInput(format!(
                "undevelopable share for {msa} must be in [0,1], got {}",
                row.undevelopable_share
            )));
        }
        if self.rows.insert(msa.clone(), row).is_some() {
            return Err(AtlasError::InvalidInput(format!(
                "duplicate supply-constraint row for {msa}; the file must be time-invariant"
            )));
        }
        Ok(())
    }

    pub fn get(&self, msa: &str) -> Option<&EtaRow> {
        self.rows.get(msa)
    }
}

/// Share-weighted national growth: `sum_k (L_k / sum L) * g_k`.
pub fn bartik(shares: &BTreeMap<String, f64>, growth: &NationalGrowth) -> Result<f64> {
    let missing: Vec<&String> = shares
        .keys()
        .filter(|k| !growth.growth.contains_key(*k))
        .collect();
    if !missing.is_empty() {
        return Err(AtlasError::InvalidInput(format!(
            "industries without national growth rates: {missing:?}"
        )));
    }
    let total: f64 = shares.values().sum();
    if total <= 0.0 {
        return Err(AtlasError::InvalidInput("all-zero industry shares".into()));
    }
    let mut acc = 0.0;
    for (k, share) in shares {
        acc += (share / total) * growth.growth[k];
    }
    Ok(acc)
}

pub const INSTRUMENT_LABELS: [&str; 4] = [
    "bartik",
    "bartik_x_wri",
    "bartik_x_elasticity",
    "bartik_x_undevelopable",
];

/// msa x period -> the four-instrument row.
#[derive(Debug, Clone, Default)]
pub struct InstrumentSet {
    rows: BTreeMap<(String, String), [f64; 4]>,
}

impl InstrumentSet {
    pub fn get(&self, msa: &str, period: &str) -> Option<&[f64; 4]> {
        self.rows.get(&(msa.to_string(), period.to_string()))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(String, String), &[f64; 4])> {
        self.rows.iter()
    }
}

/// Interact each Bartik value with (1, WRI, elasticity, undevelopable).
/// Regions without a constraint row are dropped and logged.
pub fn build_instruments(
    bartik_values: &BTreeMap<(String, String), f64>,
    eta: &SupplyConstraints,
) -> (InstrumentSet, DropLog) {
    let mut rows = BTreeMap::new();
    let mut drops = DropLog::new();
    for ((msa, period), &b) in bartik_values {
        match eta.get(msa) {
            Some(e) => {
                rows.insert(
                    (msa.clone(), period.clone()),
                    [b, b * e.wri, b * e.elasticity, b * e.undevelopable_share],
                );
            }
            None => drops.push(msa.clone(), period.clone(), "missing supply-constraint row"),
        }
    }
    (InstrumentSet { rows }, drops)
}

/// Aligned data for the IV system. Exogenous columns carry the intercept
/// first; instruments are the excluded columns only.
#[derive(Debug, Clone)]
pub struct IVDesign {
    pub y: DVector<f64>,
    pub endogenous: DMatrix<f64>,
    pub exogenous: DMatrix<f64>,
    pub instruments: DMatrix<f64>,
    pub clusters: Vec<String>,
    pub endogenous_names: Vec<String>,
    pub exogenous_names: Vec<String>,
    pub instrument_names: Vec<String>,
}

impl IVDesign {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.endogenous.nrows() != n
            || self.exogenous.nrows() != n
            || self.instruments.nrows() != n
            || self.clusters.len() != n
        {
            return Err(AtlasError::InvalidInput("IV design rows disagree".into()));
        }
        if self.instruments.ncols() < self.endogenous.ncols() {
            return Err(AtlasError::InvalidInput(format!(
                "need at least as many instruments as endogenous variables, got {} < {}",
                self.instruments.ncols(),
                self.endogenous.ncols()
            )));
        }
        if self.endogenous_names.len() != self.endogenous.ncols()
            || self.exogenous_names.len() != self.exogenous.ncols()
            || self.instrument_names.len() != self.instruments.ncols()
        {
            return Err(AtlasError::InvalidInput("IV design name lengths disagree".into()));
        }
        Ok(())
    }

    /// Drop one excluded instrument column by index.
    fn without_instrument(&self, drop: usize) -> IVDesign {
        let keep: Vec<usize> = (0..self.instruments.ncols()).filter(|&j| j != drop).collect();
        let instruments = DMatrix::from_fn(self.n(), keep.len(), |i, j| self.instruments[(i, keep[j])]);
        IVDesign {
            y: self.y.clone(),
            endogenous: self.endogenous.clone(),
            exogenous: self.exogenous.clone(),
            instruments,
            clusters: self.clusters.clone(),
            endogenous_names: self.endogenous_names.clone(),
            exogenous_names: self.exogenous_names.clone(),
            instrument_names: keep.iter().map(|&j| self.instrument_names[j].clone()).collect(),
        }
    }
}

/// First-stage regression of one endogenous variable on instruments plus
/// exogenous controls, with the partial F on the excluded instruments.
///
/// The partial F is the usual instrument-strength diagnostic; values above
/// the conventional rule-of-thumb threshold of 10 indicate instruments
/// strong enough for the usual asymptotics. No critical-value tables are
/// embedded.
#[derive(Debug, Clone, Serialize)]
pub struct FirstStage {
    pub endogenous_name: String,
    pub report: EstimateReport,
    /// Wald statistic on the excluded instruments divided by their count.
    /// Infinite when the regression fits exactly (flagged below).
    pub partial_f: f64,
    /// True when the endogenous variable is an exact linear combination of
    /// the regressors, which makes the usual F undefined.
    pub exact_fit: bool,
}

pub fn first_stage(design: &IVDesign, endog_index: usize) -> Result<FirstStage> {
    design.validate()?;
    if endog_index >= design.endogenous.ncols() {
        return Err(AtlasError::InvalidInput(format!(
            "endogenous index {endog_index} out of range"
        )));
    }
    let n = design.n();
    let q = design.exogenous.ncols();
    let l = design.instruments.ncols();
    let mut x = DMatrix::zeros(n, q + l);
    for i in 0..n {
        for j in 0..q {
            x[(i, j)] = design.exogenous[(i, j)];
        }
        for j in 0..l {
            x[(i, q + j)] = design.instruments[(i, j)];
        }
    }
    let y = design.endogenous.column(endog_index).clone_owned();
    let mut names = design.exogenous_names.clone();
    names.extend(design.instrument_names.iter().cloned());
    let d = DesignMatrix::new(x, y.clone(), design.clusters.clone(), names)?;
    let report = fit_labeled(
        &d,
        &format!("first-stage:{}", design.endogenous_names[endog_index]),
        BTreeMap::new(),
    )?;

    // Exact fit: zero residual variance makes the F statistic degenerate.
    let resid = &y - &d.x * report.beta_vector();
    let ss_res: f64 = resid.iter().map(|e| e * e).sum();
    let scale: f64 = y.iter().map(|v| v * v).sum::<f64>().max(1.0);
    if ss_res < 1e-24 * scale {
        return Ok(FirstStage {
            endogenous_name: design.endogenous_names[endog_index].clone(),
            report,
            partial_f: f64::INFINITY,
            exact_fit: true,
        });
    }

    let mut restrict = DMatrix::zeros(l, q + l);
    for j in 0..l {
        restrict[(j, q + j)] = 1.0;
    }
    let wald = crate::ols::wald_test(&report, &restrict, &DVector::zeros(l))?;
    Ok(FirstStage {
        endogenous_name: design.endogenous_names[endog_index].clone(),
        report,
        partial_f: wald.statistic / l as f64,
        exact_fit: false,
    })
}

/// All first stages, one per endogenous variable, on the identical sample.
pub fn first_stages(design: &IVDesign) -> Result<Vec<FirstStage>> {
    (0..design.endogenous.ncols())
        .map(|j| first_stage(design, j))
        .collect()
}

/// Two-stage least squares.
///
/// Endogenous columns are replaced by their projection on the full
/// instrument set; second-stage residuals for the covariance use the
/// original endogenous values, clustered as in the OLS module.
pub fn fit_iv(design: &IVDesign, label: &str) -> Result<EstimateReport> {
    design.validate()?;
    let n = design.n();
    let p = design.endogenous.ncols();
    let q = design.exogenous.ncols();
    let l = design.instruments.ncols();

    // Full instrument matrix Z = [exog, instruments].
    let mut z = DMatrix::zeros(n, q + l);
    for i in 0..n {
        for j in 0..q {
            z[(i, j)] = design.exogenous[(i, j)];
        }
        for j in 0..l {
            z[(i, q + j)] = design.instruments[(i, j)];
        }
    }
    let z_qr = z.clone().col_piv_qr();
    let z_r = z_qr.r();
    let z_pivot0 = z_r[(0, 0)].abs();
    let z_rank = (0..(q + l))
        .take_while(|&i| z_r[(i, i)].abs() > 1e-10 * z_pivot0.max(f64::MIN_POSITIVE))
        .count();
    if z_rank < q + l {
        return Err(AtlasError::RankDeficient {
            columns: vec!["instrument matrix".into()],
        });
    }

    // Project endogenous columns: X_hat = Q1 Q1' X_endog.
    let z_q = z_qr.q();
    let projected = &z_q * (z_q.transpose() * &design.endogenous);

    // Second stage design: intercept and exog first, then fitted endogenous.
    let k = q + p;
    let mut x_hat = DMatrix::zeros(n, k);
    let mut x_orig = DMatrix::zeros(n, k);
    for i in 0..n {
        for j in 0..q {
            x_hat[(i, j)] = design.exogenous[(i, j)];
            x_orig[(i, j)] = design.exogenous[(i, j)];
        }
        for j in 0..p {
            x_hat[(i, q + j)] = projected[(i, j)];
            x_orig[(i, q + j)] = design.endogenous[(i, j)];
        }
    }
    let mut names = design.exogenous_names.clone();
    names.extend(design.endogenous_names.iter().cloned());

    let qr = x_hat.clone().col_piv_qr();
    let r = qr.r();
    let pivot0 = r[(0, 0)].abs();
    if pivot0 == 0.0 {
        return Err(AtlasError::RankDeficient { columns: names });
    }
    let rank = (0..k).take_while(|&i| r[(i, i)].abs() > 1e-10 * pivot0).count();
    if rank < k {
        let mut order = nalgebra::RowDVector::<f64>::from_fn(k, |_, j| j as f64);
        qr.p().permute_columns(&mut order);
        let mut columns: Vec<String> = order
            .iter()
            .skip(rank)
            .map(|&j| names[j as usize].clone())
            .collect();
        columns.sort();
        return Err(AtlasError::RankDeficient { columns });
    }

    let qty = qr.q().transpose() * &design.y;
    let mut beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| AtlasError::Singular("2SLS upper-triangular solve".into()))?;
    qr.p().inv_permute_rows(&mut beta);

    // Residuals with the original endogenous values.
    let residuals = &design.y - &x_orig * &beta;

    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| AtlasError::Singular("inverse of R in 2SLS".into()))?;
    let mut bread = &r_inv * r_inv.transpose();
    qr.p().inv_permute_rows(&mut bread);
    qr.p().inv_permute_columns(&mut bread);

    let covariance = clustered_sandwich(&x_hat, &residuals, &bread, &design.clusters)?;
    let n_clusters = design
        .clusters
        .iter()
        .collect::<std::collections::BTreeSet<_>>()
        .len();

    let mean_y = design.y.mean();
    let ss_res: f64 = residuals.iter().map(|e| e * e).sum();
    let ss_tot: f64 = design.y.iter().map(|v| (v - mean_y) * (v - mean_y)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    let nf = n as f64;
    let kf = k as f64;
    Ok(EstimateReport {
        label: label.to_string(),
        names,
        beta: beta.iter().copied().collect(),
        covariance: (0..k)
            .map(|i| (0..k).map(|j| covariance[(i, j)]).collect())
            .collect(),
        std_errors: (0..k).map(|j| covariance[(j, j)].max(0.0).sqrt()).collect(),
        n,
        k,
        n_clusters,
        r_squared,
        adj_r_squared: 1.0 - (1.0 - r_squared) * (nf - 1.0) / (nf - kf),
        rmse: (ss_res / nf).sqrt(),
        drop_summary: BTreeMap::new(),
    })
}

/// Hansen J over-identification test at the IV estimate.
#[derive(Debug, Clone, Serialize)]
pub struct HansenJ {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    /// True in the just-identified case, where the test has no content.
    pub not_testable: bool,
}

pub fn hansen_j(design: &IVDesign, iv_report: &EstimateReport) -> Result<HansenJ> {
    design.validate()?;
    let n = design.n();
    let p = design.endogenous.ncols();
    let q = design.exogenous.ncols();
    let l = design.instruments.ncols();
    let df = l - p;
    if df == 0 {
        return Ok(HansenJ {
            statistic: 0.0,
            df: 0,
            p_value: 1.0,
            not_testable: true,
        });
    }

    // Residuals at the IV estimate, with original endogenous columns.
    let beta = iv_report.beta_vector();
    let mut x_orig = DMatrix::zeros(n, q + p);
    for i in 0..n {
        for j in 0..q {
            x_orig[(i, j)] = design.exogenous[(i, j)];
        }
        for j in 0..p {
            x_orig[(i, q + j)] = design.endogenous[(i, j)];
        }
    }
    let residuals = &design.y - &x_orig * &beta;

    let m = q + l;
    let mut z = DMatrix::zeros(n, m);
    for i in 0..n {
        for j in 0..q {
            z[(i, j)] = design.exogenous[(i, j)];
        }
        for j in 0..l {
            z[(i, q + j)] = design.instruments[(i, j)];
        }
    }

    let mut gbar = DVector::<f64>::zeros(m);
    for i in 0..n {
        for j in 0..m {
            gbar[j] += z[(i, j)] * residuals[i];
        }
    }
    gbar /= n as f64;

    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, c) in design.clusters.iter().enumerate() {
        groups.entry(c.as_str()).or_default().push(i);
    }
    let g = groups.len();
    if g < 2 {
        return Err(AtlasError::TooFewClusters(g));
    }
    let mut s = DMatrix::<f64>::zeros(m, m);
    for rows in groups.values() {
        let mut score = DVector::<f64>::zeros(m);
        for &i in rows {
            for j in 0..m {
                score[j] += z[(i, j)] * residuals[i];
            }
        }
        s += &score * score.transpose();
    }
    let gf = g as f64;
    s *= (gf / (gf - 1.0)) / n as f64;

    let s_inv = s
        .try_inverse()
        .ok_or_else(|| AtlasError::Singular("moment covariance in Hansen J".into()))?;
    let statistic = (n as f64) * (gbar.transpose() * s_inv * &gbar)[(0, 0)].max(0.0);
    let dist = ChiSquared::new(df as f64)
        .map_err(|e| AtlasError::InvalidInput(format!("chi-squared: {e}")))?;
    Ok(HansenJ {
        statistic,
        df,
        p_value: 1.0 - dist.cdf(statistic),
        not_testable: false,
    })
}

/// Refit the system once per excluded instrument, dropping it. The refits
/// are independent jobs; output order follows the instrument order.
pub fn leave_one_out(design: &IVDesign, label: &str) -> Result<Vec<(String, EstimateReport)>> {
    design.validate()?;
    use rayon::prelude::*;
    (0..design.instruments.ncols())
        .into_par_iter()
        .map(|j| {
            let name = design.instrument_names[j].clone();
            let sub = design.without_instrument(j);
            let report = fit_iv(&sub, &format!("{label}:drop-{name}"))?;
            Ok((name, report))
        })
        .collect()
}
