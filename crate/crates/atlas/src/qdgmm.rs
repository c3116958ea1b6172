//! Quasi-differenced method-of-moments estimation of a multiplicative-mean
//! panel model.
//!
//! With a conditional mean `c_i * exp(x_it' beta)`, the ratio between two
//! periods cancels the unit effect `c_i`, leaving the residual
//! `u = y_t - exp(dx' beta) * y_{t-1}` and the just-identified moment
//! condition `E[z u] = 0` with instruments `z = dx`. The root is found by
//! damped Newton on the sample moment vector with an analytic Jacobian.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{AtlasError, Result};
use crate::panel::Panel;

/// Exponent guard: `|dx' beta|` beyond this aborts the residual evaluation.
pub const EXP_GUARD: f64 = 50.0;

/// One region's adjacent-period pair: outcome levels plus the
/// regressor-difference vector.
#[derive(Debug, Clone)]
pub struct QDPair {
    pub msa: String,
    pub period: String,
    /// Outcome level in the later period.
    pub y1: f64,
    /// Outcome level in the earlier period.
    pub y0: f64,
    pub dx: DVector<f64>,
}

impl QDPair {
    fn validate(&self, k: usize) -> Result<()> {
        if !self.y0.is_finite() || !self.y1.is_finite() || self.y0 < 0.0 || self.y1 < 0.0 {
            return Err(AtlasError::InvalidInput(format!(
                "pair {}/{}: outcome levels must be finite and >= 0",
                self.msa, self.period
            )));
        }
        if self.dx.len() != k || self.dx.iter().any(|v| !v.is_finite()) {
            return Err(AtlasError::InvalidInput(format!(
                "pair {}/{}: bad regressor vector",
                self.msa, self.period
            )));
        }
        Ok(())
    }
}

/// Estimation input: pairs plus regressor names.
#[derive(Debug, Clone)]
pub struct QDData {
    pub pairs: Vec<QDPair>,
    pub names: Vec<String>,
}

impl QDData {
    pub fn new(pairs: Vec<QDPair>, names: Vec<String>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(AtlasError::InvalidInput("no quasi-difference pairs".into()));
        }
        let k = names.len();
        for p in &pairs {
            p.validate(k)?;
        }
        Ok(QDData { pairs, names })
    }

    pub fn k(&self) -> usize {
        self.names.len()
    }
}

/// Build pairs from a long-difference panel. Regressors enter as the
/// piecewise split terms (when the panel has a split variable), covariate
/// differences, and one dummy per period (full one-hot, no common
/// intercept, so each period carries its own trend).
pub fn qd_data_from_panel(panel: &Panel) -> Result<QDData> {
    let n_periods = panel.period_labels.len();
    let split_cols = if panel.split_name.is_some() { 2 } else { 0 };
    let mut names = Vec::new();
    for label in &panel.period_labels {
        names.push(format!("trend_{label}"));
    }
    if let Some(split) = &panel.split_name {
        names.push(format!("{split}_plus"));
        names.push(format!("{split}_minus"));
    }
    for c in &panel.covariate_names {
        names.push(format!("d_{c}"));
    }

    let mut pairs = Vec::with_capacity(panel.observations.len());
    for obs in &panel.observations {
        let period_idx = panel
            .period_labels
            .iter()
            .position(|l| l == &obs.period)
            .ok_or_else(|| AtlasError::InvalidInput(format!("unknown period {}", obs.period)))?;
        let mut dx = DVector::zeros(names.len());
        dx[period_idx] = 1.0;
        if split_cols == 2 {
            dx[n_periods] = obs.split_plus;
            dx[n_periods + 1] = obs.split_minus;
        }
        for (j, &c) in obs.covariates.iter().enumerate() {
            dx[n_periods + split_cols + j] = c;
        }
        pairs.push(QDPair {
            msa: obs.msa.clone(),
            period: obs.period.clone(),
            y1: obs.outcome_level_end,
            y0: obs.outcome_level_start,
            dx,
        });
    }
    QDData::new(pairs, names)
}

/// `u = y_t - exp(dx' beta) * y_{t-1}`, guarded against exponent overflow.
pub fn qd_residual(beta: &DVector<f64>, pair: &QDPair) -> Result<f64> {
    let t = pair.dx.dot(beta);
    if t.abs() > EXP_GUARD {
        return Err(AtlasError::Overflow {
            value: t,
            limit: EXP_GUARD,
        });
    }
    Ok(pair.y1 - t.exp() * pair.y0)
}

/// Sample moment vector `m(beta) = (1/n) sum z_i u_i` with `z = dx`.
pub fn sample_moments(beta: &DVector<f64>, data: &QDData) -> Result<DVector<f64>> {
    let n = data.pairs.len() as f64;
    let mut m = DVector::zeros(data.k());
    for pair in &data.pairs {
        let u = qd_residual(beta, pair)?;
        m.axpy(u / n, &pair.dx, 1.0);
    }
    Ok(m)
}

/// Analytic Jacobian `dm/dbeta = -(1/n) sum z_i y0_i exp(dx_i' beta) dx_i'`.
pub fn moment_jacobian(beta: &DVector<f64>, data: &QDData) -> Result<DMatrix<f64>> {
    let k = data.k();
    let n = data.pairs.len() as f64;
    let mut jac = DMatrix::zeros(k, k);
    for pair in &data.pairs {
        let t = pair.dx.dot(beta);
        if t.abs() > EXP_GUARD {
            return Err(AtlasError::Overflow {
                value: t,
                limit: EXP_GUARD,
            });
        }
        let w = -pair.y0 * t.exp() / n;
        // jac += w * dx dx'
        for a in 0..k {
            let wa = w * pair.dx[a];
            for b in 0..k {
                jac[(a, b)] += wa * pair.dx[b];
            }
        }
    }
    Ok(jac)
}

/// Solver options.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Converged when the max-abs sample moment falls below this.
    pub moment_tolerance: f64,
    /// Also accept a step shorter than this.
    pub step_tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iterations: 200,
            moment_tolerance: 1e-10,
            step_tolerance: 1e-12,
        }
    }
}

/// Fitted estimate with clustered covariance and convergence diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct QDEstimate {
    pub label: String,
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub std_errors: Vec<f64>,
    pub n: usize,
    pub n_clusters: usize,
    pub iterations: usize,
    pub final_moment_norm: f64,
    pub drop_summary: BTreeMap<String, usize>,
}

impl QDEstimate {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.beta[i])
    }

    pub fn std_error(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.std_errors[i])
    }

    pub fn beta_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.beta.clone())
    }
}

fn moment_norm(m: &DVector<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Evaluate moments, returning None when the exponent guard trips (treated
/// as a failed line-search trial rather than a hard error).
fn try_moments(beta: &DVector<f64>, data: &QDData) -> Option<DVector<f64>> {
    match sample_moments(beta, data) {
        Ok(m) => Some(m),
        Err(AtlasError::Overflow { .. }) => None,
        Err(_) => None,
    }
}

/// Solve `m(beta) = 0` by damped Newton with step-halving on the moment norm.
pub fn fit_qd(data: &QDData, init: &DVector<f64>, opts: &FitOptions) -> Result<QDEstimate> {
    fit_qd_labeled(data, init, opts, "", BTreeMap::new())
}

pub fn fit_qd_labeled(
    data: &QDData,
    init: &DVector<f64>,
    opts: &FitOptions,
    label: &str,
    drop_summary: BTreeMap<String, usize>,
) -> Result<QDEstimate> {
    let k = data.k();
    if init.len() != k || init.iter().any(|v| !v.is_finite()) {
        return Err(AtlasError::InvalidInput(
            "initial value has wrong length or non-finite entries".into(),
        ));
    }

    let mut beta = init.clone();
    let mut m = sample_moments(&beta, data)?;
    let mut norm = moment_norm(&m);
    let mut trajectory = vec![norm];
    let mut iterations = 0;

    while norm > opts.moment_tolerance && iterations < opts.max_iterations {
        iterations += 1;
        let jac = moment_jacobian(&beta, data)?;
        let step = jac
            .lu()
            .solve(&(-&m))
            .ok_or_else(|| AtlasError::Singular("moment Jacobian".into()))?;

        // Step-halving: shrink until the moment norm improves and the
        // exponent guard is respected.
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let candidate = &beta + &step * lambda;
            if let Some(m_new) = try_moments(&candidate, data) {
                let norm_new = moment_norm(&m_new);
                if norm_new < norm {
                    beta = candidate;
                    m = m_new;
                    norm = norm_new;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        trajectory.push(norm);
        if !accepted || step.norm() * lambda < opts.step_tolerance {
            break;
        }
    }

    if norm > opts.moment_tolerance {
        return Err(AtlasError::NonConvergence {
            iterations,
            final_norm: norm,
            trajectory,
        });
    }

    // Clustered covariance: (1/n) J^-1 S J^-T with
    // S = [G/(G-1)] (1/n) sum_g (sum_{i in g} z_i u_i)(...)'.
    let n = data.pairs.len();
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, pair) in data.pairs.iter().enumerate() {
        groups.entry(pair.msa.as_str()).or_default().push(i);
    }
    let g = groups.len();
    if g < 2 {
        return Err(AtlasError::TooFewClusters(g));
    }
    let mut s = DMatrix::<f64>::zeros(k, k);
    for rows in groups.values() {
        let mut score = DVector::<f64>::zeros(k);
        for &i in rows {
            let u = qd_residual(&beta, &data.pairs[i])?;
            score.axpy(u, &data.pairs[i].dx, 1.0);
        }
        s += &score * score.transpose();
    }
    let gf = g as f64;
    s *= (gf / (gf - 1.0)) / n as f64;

    let jac = moment_jacobian(&beta, data)?;
    let jac_inv = jac
        .lu()
        .try_inverse()
        .ok_or_else(|| AtlasError::Singular("moment Jacobian at the solution".into()))?;
    let cov = (&jac_inv * s * jac_inv.transpose()) / n as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    let std_errors: Vec<f64> = (0..k).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();

    Ok(QDEstimate {
        label: label.to_string(),
        names: data.names.clone(),
        beta: beta.iter().copied().collect(),
        covariance: (0..k)
            .map(|i| (0..k).map(|j| cov[(i, j)]).collect())
            .collect(),
        std_errors,
        n,
        n_clusters: g,
        iterations,
        final_moment_norm: norm,
        drop_summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn synthetic_data(
        seed: u64,
        n_msas: usize,
        beta_true: &DVector<f64>,
        noise: f64,
    ) -> (QDData, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = beta_true.len();
        let mut pairs = Vec::new();
        let mut effects = Vec::new();
        for i in 0..n_msas {
            let c_i: f64 = rng.gen_range(0.5..2.0);
            effects.push(c_i);
            let mut dx = DVector::zeros(k);
            dx[0] = 1.0;
            for j in 1..k {
                dx[j] = rng.gen_range(-0.5..0.5);
            }
            let y0_mean = c_i;
            let ratio = dx.dot(beta_true).exp();
            let eps0 = if noise > 0.0 { rng.gen_range(1.0 - noise..1.0 + noise) } else { 1.0 };
            let eps1 = if noise > 0.0 { rng.gen_range(1.0 - noise..1.0 + noise) } else { 1.0 };
            let y0 = y0_mean * eps0;
            let y1 = y0_mean * ratio * eps1;
            pairs.push(QDPair {
                msa: format!("m{i:04}"),
                period: "t".into(),
                y1,
                y0,
                dx,
            });
        }
        let names = (0..k).map(|j| format!("b{j}")).collect();
        (QDData::new(pairs, names).unwrap(), effects)
    }

    #[test]
    fn residual_at_zero_beta_is_plain_difference() {
        let pair = QDPair {
            msa: "m".into(),
            period: "t".into(),
            y1: 5.0,
            y0: 3.0,
            dx: DVector::from_vec(vec![1.0, 0.5]),
        };
        let beta = DVector::zeros(2);
        assert_eq!(qd_residual(&beta, &pair).unwrap(), 2.0);
    }

    #[test]
    fn residual_with_zero_lag_is_y1() {
        let pair = QDPair {
            msa: "m".into(),
            period: "t".into(),
            y1: 5.0,
            y0: 0.0,
            dx: DVector::from_vec(vec![1.0, -2.0]),
        };
        let beta = DVector::from_vec(vec![3.0, 1.0]);
        assert_eq!(qd_residual(&beta, &pair).unwrap(), 5.0);
    }

    #[test]
    fn residual_is_zero_on_noiseless_pair() {
        let beta: DVector<f64> = DVector::from_vec(vec![0.2, -0.4]);
        let dx: DVector<f64> = DVector::from_vec(vec![1.0, 0.7]);
        let y0 = 1.3;
        let y1 = dx.dot(&beta).exp() * y0;
        let pair = QDPair {
            msa: "m".into(),
            period: "t".into(),
            y1,
            y0,
            dx,
        };
        assert!(qd_residual(&beta, &pair).unwrap().abs() < 1e-12);
    }

    #[test]
    fn overflow_guard_trips() {
        let pair = QDPair {
            msa: "m".into(),
            period: "t".into(),
            y1: 1.0,
            y0: 1.0,
            dx: DVector::from_vec(vec![100.0]),
        };
        let beta = DVector::from_vec(vec![1.0]);
        assert!(matches!(
            qd_residual(&beta, &pair).unwrap_err(),
            AtlasError::Overflow { .. }
        ));
    }

    #[test]
    fn moments_match_naive_double_loop() {
        let beta = DVector::from_vec(vec![0.1, -0.2, 0.05]);
        let (data, _) = synthetic_data(21, 50, &beta, 0.3);
        let probe = DVector::from_vec(vec![0.07, -0.1, 0.02]);
        let m = sample_moments(&probe, &data).unwrap();

        let k = data.k();
        let n = data.pairs.len() as f64;
        for a in 0..k {
            let mut acc = 0.0;
            for pair in &data.pairs {
                let u = pair.y1 - pair.dx.dot(&probe).exp() * pair.y0;
                acc += pair.dx[a] * u;
            }
            acc /= n;
            assert!((m[a] - acc).abs() < 1e-12, "component {a}");
        }
    }

    #[test]
    fn moments_reduce_to_single_observation() {
        let dx = DVector::from_vec(vec![1.0, 2.0]);
        let pair = QDPair {
            msa: "m".into(),
            period: "t".into(),
            y1: 4.0,
            y0: 1.0,
            dx: dx.clone(),
        };
        let data = QDData::new(vec![pair], vec!["a".into(), "b".into()]).unwrap();
        let beta = DVector::zeros(2);
        let m = sample_moments(&beta, &data).unwrap();
        let u = 4.0 - 1.0;
        assert_eq!(m[0], dx[0] * u);
        assert_eq!(m[1], dx[1] * u);
    }

    #[test]
    fn zero_residuals_give_zero_moments() {
        let beta = DVector::from_vec(vec![0.3, 0.1]);
        let (data, _) = synthetic_data(5, 30, &beta, 0.0);
        let m = sample_moments(&beta, &data).unwrap();
        assert!(moment_norm(&m) < 1e-12);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let beta_true = DVector::from_vec(vec![0.1, -0.3, 0.2]);
        let (data, _) = synthetic_data(33, 60, &beta_true, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for _ in 0..20 {
            let beta = DVector::from_fn(3, |_, _| rng.gen_range(-0.5..0.5));
            let jac = moment_jacobian(&beta, &data).unwrap();
            let h = 1e-6;
            for j in 0..3 {
                let mut up = beta.clone();
                up[j] += h;
                let mut dn = beta.clone();
                dn[j] -= h;
                let m_up = sample_moments(&up, &data).unwrap();
                let m_dn = sample_moments(&dn, &data).unwrap();
                for a in 0..3 {
                    let fd = (m_up[a] - m_dn[a]) / (2.0 * h);
                    let an = jac[(a, j)];
                    let scale = an.abs().max(1e-8);
                    assert!(
                        (fd - an).abs() / scale < 1e-5,
                        "({a},{j}): fd {fd} vs analytic {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn noiseless_recovery_is_exact() {
        let beta_true = DVector::from_vec(vec![-0.2, 0.8, -0.5]);
        let (data, _) = synthetic_data(55, 200, &beta_true, 0.0);
        let est = fit_qd(&data, &DVector::zeros(3), &FitOptions::default()).unwrap();
        for j in 0..3 {
            assert!(
                (est.beta[j] - beta_true[j]).abs() < 1e-8,
                "beta[{j}] = {} vs {}",
                est.beta[j],
                beta_true[j]
            );
        }
        assert!(est.final_moment_norm < 1e-10);
    }

    #[test]
    fn fixed_effect_rescaling_leaves_estimate_unchanged() {
        let beta_true = DVector::from_vec(vec![0.15, -0.6]);
        let (data, _) = synthetic_data(77, 150, &beta_true, 0.0);
        let est = fit_qd(&data, &DVector::zeros(2), &FitOptions::default()).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let rescaled: Vec<QDPair> = data
            .pairs
            .iter()
            .map(|p| {
                let c: f64 = rng.gen_range(0.1..10.0);
                QDPair {
                    msa: p.msa.clone(),
                    period: p.period.clone(),
                    y1: p.y1 * c,
                    y0: p.y0 * c,
                    dx: p.dx.clone(),
                }
            })
            .collect();
        let data2 = QDData::new(rescaled, data.names.clone()).unwrap();
        let est2 = fit_qd(&data2, &DVector::zeros(2), &FitOptions::default()).unwrap();
        for j in 0..2 {
            assert!(
                (est.beta[j] - est2.beta[j]).abs() < 1e-8,
                "beta[{j}]: {} vs {}",
                est.beta[j],
                est2.beta[j]
            );
        }
    }

    #[test]
    fn row_permutation_invariance() {
        let beta_true = DVector::from_vec(vec![0.1, 0.4]);
        let (data, _) = synthetic_data(91, 80, &beta_true, 0.3);
        let est = fit_qd(&data, &DVector::zeros(2), &FitOptions::default()).unwrap();
        let mut pairs = data.pairs.clone();
        pairs.reverse();
        let data2 = QDData::new(pairs, data.names.clone()).unwrap();
        let est2 = fit_qd(&data2, &DVector::zeros(2), &FitOptions::default()).unwrap();
        for j in 0..2 {
            assert!((est.beta[j] - est2.beta[j]).abs() < 1e-9);
            assert!((est.std_errors[j] - est2.std_errors[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn multi_start_converges_to_same_root() {
        let beta_true = DVector::from_vec(vec![0.2, -0.3]);
        let (data, _) = synthetic_data(101, 120, &beta_true, 0.3);
        let reference = fit_qd(&data, &DVector::zeros(2), &FitOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        for _ in 0..10 {
            let init = DVector::from_fn(2, |_, _| rng.gen_range(-0.8..0.8));
            let est = fit_qd(&data, &init, &FitOptions::default()).unwrap();
            for j in 0..2 {
                assert!(
                    (est.beta[j] - reference.beta[j]).abs() < 1e-7,
                    "start {init:?} landed elsewhere"
                );
            }
        }
    }

    #[test]
    fn nonconvergence_carries_trajectory() {
        let beta_true = DVector::from_vec(vec![0.2, -0.3]);
        let (data, _) = synthetic_data(111, 40, &beta_true, 0.4);
        let opts = FitOptions {
            max_iterations: 1,
            moment_tolerance: 1e-16,
            step_tolerance: 1e-18,
        };
        match fit_qd(&data, &DVector::from_vec(vec![5.0, 5.0]), &opts) {
            Err(AtlasError::NonConvergence { trajectory, .. }) => {
                assert!(trajectory.len() >= 2);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }
}
