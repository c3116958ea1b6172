//! Long-differenced estimation panels.
//!
//! Raw per-region series become one observation per region and period: the
//! differenced outcome, the piecewise split of the price variable into its
//! positive and negative parts, differenced covariates, and period dummies.
//! Every excluded observation is written to a [`DropLog`] so input and output
//! row counts always reconcile.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{AtlasError, Result};

/// region id -> year -> variable name -> value.
#[derive(Debug, Clone, Default)]
pub struct RawSeries {
    data: BTreeMap<String, BTreeMap<i32, BTreeMap<String, f64>>>,
}

impl RawSeries {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        msa: impl Into<String>,
        year: i32,
        variable: impl Into<String>,
        value: f64,
    ) -> Result<()> {
        let msa = msa.into();
        let variable = variable.into();
        if !value.is_finite() {
            return Err(AtlasError::InvalidInput(format!(
                "non-finite value for {msa}/{year}/{variable}"
            )));
        }
        self.data
            .entry(msa)
            .or_default()
            .entry(year)
            .or_default()
            .insert(variable, value);
        Ok(())
    }

    pub fn get(&self, msa: &str, year: i32, variable: &str) -> Option<f64> {
        self.data.get(msa)?.get(&year)?.get(variable).copied()
    }

    pub fn msas(&self) -> Vec<String> {
        self.data.keys().cloned().collect()
    }

    pub fn years(&self) -> Vec<i32> {
        let mut years: Vec<i32> = self
            .data
            .values()
            .flat_map(|by_year| by_year.keys().copied())
            .collect();
        years.sort_unstable();
        years.dedup();
        years
    }

    /// All (msa, value) pairs for one variable-year, in msa order.
    pub fn variable_values(&self, variable: &str, year: i32) -> Vec<(String, f64)> {
        self.data
            .iter()
            .filter_map(|(msa, by_year)| {
                by_year
                    .get(&year)
                    .and_then(|vars| vars.get(variable))
                    .map(|v| (msa.clone(), *v))
            })
            .collect()
    }

    /// Add `name` = `numerator` / `denominator` wherever both exist. Cells
    /// with a zero denominator are skipped and logged.
    pub fn derive_ratio(&mut self, name: &str, numerator: &str, denominator: &str, log: &mut DropLog) {
        for (msa, by_year) in self.data.iter_mut() {
            for (year, vars) in by_year.iter_mut() {
                let (Some(&num), Some(&den)) = (vars.get(numerator), vars.get(denominator)) else {
                    continue;
                };
                if den <= 0.0 {
                    log.push(msa.clone(), format!("{year}"), format!("zero denominator in {name}"));
                    continue;
                }
                vars.insert(name.to_string(), num / den);
            }
        }
    }

    /// Convert the named variables to real terms in place using a per-year
    /// deflator table.
    pub fn deflate_variables(
        &mut self,
        deflator_by_year: &BTreeMap<i32, f64>,
        variables: &[String],
    ) -> Result<()> {
        for (msa, by_year) in self.data.iter_mut() {
            for (year, vars) in by_year.iter_mut() {
                for variable in variables {
                    if let Some(v) = vars.get(variable).copied() {
                        let deflator = *deflator_by_year.get(year).ok_or_else(|| {
                            AtlasError::Config(format!(
                                "no deflator for year {year} (needed by {msa}/{variable})"
                            ))
                        })?;
                        vars.insert(variable.clone(), deflate(v, deflator)?);
                    }
                }
            }
        }
        Ok(())
    }
}

/// One excluded observation and why.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DropRecord {
    pub msa: String,
    pub context: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct DropLog {
    records: Vec<DropRecord>,
}

impl DropLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, msa: impl Into<String>, context: impl Into<String>, reason: impl Into<String>) {
        self.records.push(DropRecord {
            msa: msa.into(),
            context: context.into(),
            reason: reason.into(),
        });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DropRecord> {
        self.records.iter()
    }

    pub fn extend(&mut self, other: DropLog) {
        self.records.extend(other.records);
    }

    /// reason -> count, for report footers.
    pub fn summary(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry(r.reason.clone()).or_insert(0) += 1;
        }
        out
    }
}

/// nominal / deflator, with the deflator expressed relative to the base year.
pub fn deflate(nominal: f64, deflator: f64) -> Result<f64> {
    if !(deflator > 0.0) {
        return Err(AtlasError::InvalidInput(format!(
            "deflator must be positive, got {deflator}"
        )));
    }
    Ok(nominal / deflator)
}

/// Split a change into its nonnegative and nonpositive parts; both are zero
/// exactly at the knot.
pub fn piecewise_split(delta: f64) -> (f64, f64) {
    (delta.max(0.0), delta.min(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    Level,
    Log,
}

impl Transform {
    fn apply(self, v: f64) -> Option<f64> {
        match self {
            Transform::Level => Some(v),
            Transform::Log => (v > 0.0).then(|| v.ln()),
        }
    }
}

/// Per-region long difference f(x_t1) - f(x_t0). Regions missing either year
/// or failing the transform are dropped with a logged reason.
pub fn long_difference(
    series: &RawSeries,
    variable: &str,
    t0: i32,
    t1: i32,
    transform: Transform,
) -> (BTreeMap<String, f64>, DropLog) {
    let mut out = BTreeMap::new();
    let mut log = DropLog::new();
    let context = format!("{t0}-{t1}");
    for msa in series.msas() {
        let (v0, v1) = (series.get(&msa, t0, variable), series.get(&msa, t1, variable));
        let (Some(v0), Some(v1)) = (v0, v1) else {
            log.push(msa, &context, format!("missing year for {variable}"));
            continue;
        };
        match (transform.apply(v0), transform.apply(v1)) {
            (Some(f0), Some(f1)) => {
                out.insert(msa, f1 - f0);
            }
            _ => log.push(msa, &context, format!("nonpositive under log for {variable}")),
        }
    }
    (out, log)
}

/// Crowded share of the housing stock. Stored as a share; percentage display
/// is a formatting concern.
pub fn crowded_rate(crowded_units: f64, total_units: f64) -> Result<f64> {
    if !(total_units > 0.0) {
        return Err(AtlasError::InvalidInput(format!(
            "total units must be positive, got {total_units}"
        )));
    }
    Ok(crowded_units / total_units)
}

/// Pearson correlation with a two-sided t test.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationTest {
    pub r: f64,
    pub t_statistic: f64,
    pub p_value: f64,
    pub stars: &'static str,
    /// Pairs actually used (finite in both series).
    pub n: usize,
    /// Pairs removed by pairwise deletion.
    pub n_dropped: usize,
}

/// Stars follow the correlation-table convention: * p<.05, ** p<.01,
/// *** p<.001.
pub fn correlation_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

pub fn correlation_test(x: &[f64], y: &[f64]) -> Result<CorrelationTest> {
    if x.len() != y.len() {
        return Err(AtlasError::InvalidInput(format!(
            "correlation inputs have different lengths ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    let pairs: Vec<(f64, f64)> = x
        .iter()
        .zip(y.iter())
        .filter(|(a, b)| a.is_finite() && b.is_finite())
        .map(|(a, b)| (*a, *b))
        .collect();
    let n = pairs.len();
    let n_dropped = x.len() - n;
    if n < 3 {
        return Err(AtlasError::InvalidInput(format!(
            "correlation needs at least 3 finite pairs, got {n}"
        )));
    }
    let nf = n as f64;
    let mean_x = pairs.iter().map(|(a, _)| a).sum::<f64>() / nf;
    let mean_y = pairs.iter().map(|(_, b)| b).sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in &pairs {
        sxx += (a - mean_x) * (a - mean_x);
        syy += (b - mean_y) * (b - mean_y);
        sxy += (a - mean_x) * (b - mean_y);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AtlasError::UndefinedCorrelation(
            "zero variance in one of the series".into(),
        ));
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    let df = nf - 2.0;
    let (t_statistic, p_value) = if (1.0 - r * r) < 1e-15 {
        (f64::INFINITY * r.signum(), 0.0)
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df)
            .map_err(|e| AtlasError::InvalidInput(format!("t distribution: {e}")))?;
        (t, 2.0 * (1.0 - dist.cdf(t.abs())))
    };
    Ok(CorrelationTest {
        r,
        t_statistic,
        p_value,
        stars: correlation_stars(p_value),
        n,
        n_dropped,
    })
}

/// Per-year means of the requested variables over complete cases, plus the
/// same means after a natural log (positive cells only).
#[derive(Debug, Clone, Serialize)]
pub struct YearSummary {
    pub year: i32,
    pub count: usize,
    pub means: BTreeMap<String, f64>,
    pub log_means: BTreeMap<String, f64>,
}

pub fn summary_stats(series: &RawSeries, variables: &[String]) -> Vec<YearSummary> {
    let mut out = Vec::new();
    for year in series.years() {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for msa in series.msas() {
            let values: Option<Vec<f64>> = variables
                .iter()
                .map(|v| series.get(&msa, year, v))
                .collect();
            if let Some(values) = values {
                rows.push(values);
            }
        }
        if rows.is_empty() {
            continue;
        }
        let count = rows.len();
        let mut means = BTreeMap::new();
        let mut log_means = BTreeMap::new();
        for (j, var) in variables.iter().enumerate() {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / count as f64;
            means.insert(var.clone(), mean);
            let logs: Vec<f64> = rows.iter().map(|r| r[j]).filter(|v| *v > 0.0).map(f64::ln).collect();
            if !logs.is_empty() {
                log_means.insert(var.clone(), logs.iter().sum::<f64>() / logs.len() as f64);
            }
        }
        out.push(YearSummary {
            year,
            count,
            means,
            log_means,
        });
    }
    out
}

/// A variable plus how it enters the differenced design.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub transform: Transform,
}

impl VariableSpec {
    pub fn level(name: impl Into<String>) -> Self {
        VariableSpec {
            name: name.into(),
            transform: Transform::Level,
        }
    }

    pub fn log(name: impl Into<String>) -> Self {
        VariableSpec {
            name: name.into(),
            transform: Transform::Log,
        }
    }
}

/// Declarative description of one estimation panel: what the outcome is,
/// which variable (if any) is split at zero, the covariates, and the
/// periods pooled.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecConfig {
    pub label: String,
    pub outcome: VariableSpec,
    /// Piecewise-split variable; plain (unsplit) specifications leave it
    /// out and carry their regressors as covariates.
    #[serde(default)]
    pub split: Option<VariableSpec>,
    pub covariates: Vec<VariableSpec>,
    /// (start year, end year) per period, in pooling order; the first period
    /// is the dummy reference.
    pub periods: Vec<(i32, i32)>,
}

/// One region-period row of the estimation panel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PanelObservation {
    pub msa: String,
    pub period: String,
    /// Differenced (possibly logged) outcome.
    pub outcome: f64,
    /// Raw outcome levels at the period endpoints, for estimators that work
    /// on levels rather than differences.
    pub outcome_level_start: f64,
    pub outcome_level_end: f64,
    pub split_plus: f64,
    pub split_minus: f64,
    pub covariates: Vec<f64>,
    /// One-hot against the first period: length = periods - 1.
    pub period_dummies: Vec<f64>,
    pub cluster: String,
}

/// Panel output: observations ordered by (msa, period) plus the drop log.
#[derive(Debug, Clone)]
pub struct Panel {
    pub observations: Vec<PanelObservation>,
    pub drops: DropLog,
    pub split_name: Option<String>,
    pub covariate_names: Vec<String>,
    pub period_labels: Vec<String>,
    pub label: String,
}

pub fn build_panel(series: &RawSeries, spec: &SpecConfig) -> Result<Panel> {
    if spec.periods.is_empty() {
        return Err(AtlasError::Config(format!(
            "spec '{}' defines no periods",
            spec.label
        )));
    }
    // Surface unknown variable names as configuration errors up front.
    for v in spec_variables(spec) {
        let seen = series.msas().iter().any(|m| {
            series
                .years()
                .into_iter()
                .any(|y| series.get(m, y, v).is_some())
        });
        if !seen {
            return Err(AtlasError::Config(format!(
                "spec '{}' references variable '{v}' absent from the series",
                spec.label
            )));
        }
    }

    let period_labels: Vec<String> = spec
        .periods
        .iter()
        .map(|(t0, t1)| format!("{t0}-{t1}"))
        .collect();
    let mut observations = Vec::new();
    let mut drops = DropLog::new();

    for (period_idx, &(t0, t1)) in spec.periods.iter().enumerate() {
        let label = &period_labels[period_idx];
        for msa in series.msas() {
            match build_observation(series, spec, &msa, t0, t1, period_idx, label) {
                Ok(obs) => observations.push(obs),
                Err(reason) => drops.push(msa, label.clone(), reason),
            }
        }
    }
    observations.sort_by(|a, b| (a.msa.as_str(), &a.period).cmp(&(b.msa.as_str(), &b.period)));
    Ok(Panel {
        observations,
        drops,
        split_name: spec.split.as_ref().map(|s| s.name.clone()),
        covariate_names: spec.covariates.iter().map(|c| c.name.clone()).collect(),
        period_labels,
        label: spec.label.clone(),
    })
}

fn spec_variables(spec: &SpecConfig) -> Vec<&str> {
    let mut v = vec![spec.outcome.name.as_str()];
    if let Some(split) = &spec.split {
        v.push(split.name.as_str());
    }
    v.extend(spec.covariates.iter().map(|c| c.name.as_str()));
    v
}

fn build_observation(
    series: &RawSeries,
    spec: &SpecConfig,
    msa: &str,
    t0: i32,
    t1: i32,
    period_idx: usize,
    label: &str,
) -> std::result::Result<PanelObservation, String> {
    let diff = |var: &VariableSpec| -> std::result::Result<(f64, f64, f64), String> {
        let v0 = series
            .get(msa, t0, &var.name)
            .ok_or_else(|| format!("missing year {t0} for {}", var.name))?;
        let v1 = series
            .get(msa, t1, &var.name)
            .ok_or_else(|| format!("missing year {t1} for {}", var.name))?;
        let f0 = var
            .transform
            .apply(v0)
            .ok_or_else(|| format!("nonpositive under log for {}", var.name))?;
        let f1 = var
            .transform
            .apply(v1)
            .ok_or_else(|| format!("nonpositive under log for {}", var.name))?;
        Ok((f1 - f0, v0, v1))
    };

    let (d_outcome, y0, y1) = diff(&spec.outcome)?;
    let (split_plus, split_minus) = match &spec.split {
        Some(split) => piecewise_split(diff(split)?.0),
        None => (0.0, 0.0),
    };
    let mut covariates = Vec::with_capacity(spec.covariates.len());
    for c in &spec.covariates {
        covariates.push(diff(c)?.0);
    }
    let mut period_dummies = vec![0.0; spec.periods.len().saturating_sub(1)];
    if period_idx > 0 {
        period_dummies[period_idx - 1] = 1.0;
    }
    Ok(PanelObservation {
        msa: msa.to_string(),
        period: label.to_string(),
        outcome: d_outcome,
        outcome_level_start: y0,
        outcome_level_end: y1,
        split_plus,
        split_minus,
        covariates,
        period_dummies,
        cluster: msa.to_string(),
    })
}
