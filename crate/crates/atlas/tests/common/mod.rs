//! Shared test support: a brute-force least-squares oracle kept independent
//! of the library's QR path, and file fixtures for the pipeline commands.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain Gauss-Jordan inverse over row-major nested Vecs. No pivot-tolerance
/// sophistication on purpose; oracle fixtures are well conditioned.
pub fn gauss_jordan_inverse(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut work: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let pivot_row = (col..n).max_by(|&i, &j| {
            work[i][col]
                .abs()
                .partial_cmp(&work[j][col].abs())
                .unwrap()
        })?;
        if work[pivot_row][col].abs() < 1e-14 {
            return None;
        }
        work.swap(col, pivot_row);
        let pivot = work[col][col];
        for v in work[col].iter_mut() {
            *v /= pivot;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = work[row][col];
            if factor == 0.0 {
                continue;
            }
            for j in 0..2 * n {
                work[row][j] -= factor * work[col][j];
            }
        }
    }
    Some(work.into_iter().map(|row| row[n..].to_vec()).collect())
}

/// Normal-equations OLS with the clustered sandwich evaluated by direct
/// loops: `c * (X'X)^-1 (sum_g s_g s_g') (X'X)^-1`,
/// `c = G/(G-1) * (n-1)/(n-k)`.
pub fn ols_oracle(
    x: &[Vec<f64>],
    y: &[f64],
    clusters: &[String],
) -> Option<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = x.len();
    let k = x[0].len();
    let mut xtx = vec![vec![0.0; k]; k];
    let mut xty = vec![0.0; k];
    for i in 0..n {
        for a in 0..k {
            xty[a] += x[i][a] * y[i];
            for b in 0..k {
                xtx[a][b] += x[i][a] * x[i][b];
            }
        }
    }
    let xtx_inv = gauss_jordan_inverse(&xtx)?;
    let beta: Vec<f64> = (0..k)
        .map(|a| (0..k).map(|b| xtx_inv[a][b] * xty[b]).sum())
        .collect();

    let residuals: Vec<f64> = (0..n)
        .map(|i| y[i] - (0..k).map(|a| x[i][a] * beta[a]).sum::<f64>())
        .collect();

    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, c) in clusters.iter().enumerate() {
        groups.entry(c.as_str()).or_default().push(i);
    }
    let g = groups.len();
    let mut meat = vec![vec![0.0; k]; k];
    for rows in groups.values() {
        let mut score = vec![0.0; k];
        for &i in rows {
            for a in 0..k {
                score[a] += x[i][a] * residuals[i];
            }
        }
        for a in 0..k {
            for b in 0..k {
                meat[a][b] += score[a] * score[b];
            }
        }
    }
    let c = (g as f64 / (g as f64 - 1.0)) * ((n as f64 - 1.0) / (n as f64 - k as f64));
    let mut cov = vec![vec![0.0; k]; k];
    for a in 0..k {
        for b in 0..k {
            let mut acc = 0.0;
            for p in 0..k {
                for q in 0..k {
                    acc += xtx_inv[a][p] * meat[p][q] * xtx_inv[q][b];
                }
            }
            cov[a][b] = c * acc;
        }
    }
    Some((beta, cov))
}

fn square_feature(id: &str, x0: f64, y0: f64, x1: f64, y1: f64) -> String {
    format!(
        r#"{{"type":"Feature","properties":{{"GEOID":"{id}"}},"geometry":{{"type":"Polygon","coordinates":[[[{x0},{y0}],[{x1},{y0}],[{x1},{y1}],[{x0},{y1}],[{x0},{y0}]]]}}}}"#
    )
}

fn feature_collection(features: &[String]) -> String {
    format!(
        r#"{{"type":"FeatureCollection","features":[{}]}}"#,
        features.join(",")
    )
}

/// Hand-computed expectations for the two-layer straddle fixture.
pub struct StlExpectation {
    pub stl: f64,
    pub spr: f64,
    pub excluded: f64,
}

/// Two-layer fixture: five central source regions nested in the first
/// target, three straddling ones, 12 weighted points. Counts are written
/// for 2011 and doubled for 2016. Returns the hand-computed 2011 totals.
pub fn write_stl_fixture(dir: &Path) -> StlExpectation {
    let mut cocs = Vec::new();
    for i in 1..=5 {
        let x0 = (i - 1) as f64;
        cocs.push(square_feature(&format!("c{i}"), x0, 0.0, x0 + 1.0, 1.0));
    }
    cocs.push(square_feature("c6", 5.0, 0.0, 8.0, 2.0));
    cocs.push(square_feature("c7", 5.0, 2.0, 8.0, 4.0));
    cocs.push(square_feature("c8", 8.0, 2.0, 11.0, 4.0));
    fs::write(dir.join("cocs.geojson"), feature_collection(&cocs)).unwrap();

    let msas = vec![
        square_feature("stl", 0.0, 0.0, 6.0, 4.0),
        square_feature("spr", 7.0, 0.0, 10.0, 4.0),
    ];
    fs::write(dir.join("msas.geojson"), feature_collection(&msas)).unwrap();

    let mut points = String::from("geoid,x,y,population\n");
    for i in 1..=5 {
        points.push_str(&format!("b{i},{},0.5,{}\n", (i - 1) as f64 + 0.5, 100 * i));
    }
    points.push_str("b6a,5.5,1.0,300\n");
    points.push_str("b6b,7.5,1.0,100\n");
    points.push_str("b6c,6.5,1.0,600\n");
    points.push_str("b7a,5.5,3.0,200\n");
    points.push_str("b7b,7.5,3.0,200\n");
    points.push_str("b8a,8.5,3.0,150\n");
    points.push_str("b8b,10.5,3.0,50\n");
    fs::write(dir.join("blockgroups.csv"), points).unwrap();

    let mut counts = String::from("region_id,year,count\n");
    for (i, h) in [(1, 10.0), (2, 20.0), (3, 30.0), (4, 40.0), (5, 50.0)] {
        counts.push_str(&format!("c{i},2011,{h}\n"));
        counts.push_str(&format!("c{i},2016,{}\n", 2.0 * h));
    }
    for (id, h) in [("c6", 50.0), ("c7", 40.0), ("c8", 80.0)] {
        counts.push_str(&format!("{id},2011,{h}\n"));
        counts.push_str(&format!("{id},2016,{}\n", 2.0 * h));
    }
    fs::write(dir.join("counts.csv"), counts).unwrap();

    // By hand: central regions contribute 150 to stl. c6 splits 50 into
    // 15 (stl) + 5 (spr) + 30 excluded; c7 splits 40 into 20 + 20;
    // c8 splits 80 into 60 (spr) + 20 excluded.
    StlExpectation {
        stl: 185.0,
        spr: 85.0,
        excluded: 50.0,
    }
}

pub const FIXTURE_MSAS: usize = 30;
pub const FIXTURE_YEARS: [i32; 3] = [2011, 2016, 2020];
pub const FIXTURE_INDUSTRIES: [&str; 8] = ["11", "21", "23", "31", "42", "48", "52", "62"];

/// Synthetic series, supply constraints, industry shares, and national
/// growth for the estimation presets. Rent changes load on the share-
/// weighted growth so the IV system has a real first stage.
pub fn write_estimation_fixture(dir: &Path, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // National industry growth per period start.
    let mut growth_csv = String::from("naics2,year,log_growth\n");
    let mut growth: BTreeMap<(i32, &str), f64> = BTreeMap::new();
    for &year in &[2011, 2016] {
        for &ind in &FIXTURE_INDUSTRIES {
            let g = rng.gen_range(-0.05..0.10);
            growth.insert((year, ind), g);
            growth_csv.push_str(&format!("{ind},{year},{g}\n"));
        }
    }
    fs::write(dir.join("growth.csv"), growth_csv).unwrap();

    let mut shares_csv = String::from("msa_id,year,naics2,share\n");
    let mut eta_csv = String::from("msa_id,wri,elasticity,undevelopable_share\n");
    let mut series_csv = String::from("msa_id,year,variable,value\n");
    let deflator: BTreeMap<i32, f64> =
        BTreeMap::from([(2011, 1.32), (2016, 1.45), (2020, 1.60)]);

    for m in 0..FIXTURE_MSAS {
        let msa = format!("m{m:02}");
        // Time-invariant industry mix, written for both period starts.
        let raw: Vec<f64> = (0..FIXTURE_INDUSTRIES.len())
            .map(|_| rng.gen_range(0.05f64..1.0))
            .collect();
        let total: f64 = raw.iter().sum();
        let shares: Vec<f64> = raw.iter().map(|v| v / total).collect();
        for &year in &[2011, 2016] {
            for (ind, share) in FIXTURE_INDUSTRIES.iter().zip(&shares) {
                shares_csv.push_str(&format!("{msa},{year},{ind},{share}\n"));
            }
        }
        let wri = rng.gen_range(-1.0..2.0);
        let elasticity = rng.gen_range(0.5..4.0);
        let undevelopable = rng.gen_range(0.05..0.8);
        eta_csv.push_str(&format!("{msa},{wri},{elasticity},{undevelopable}\n"));

        let bartik: BTreeMap<i32, f64> = [2011, 2016]
            .iter()
            .map(|&year| {
                let b = FIXTURE_INDUSTRIES
                    .iter()
                    .zip(&shares)
                    .map(|(ind, s)| s * growth[&(year, *ind)])
                    .sum::<f64>();
                (year, b)
            })
            .collect();

        let population = rng.gen_range(1.0e5..3.0e6);
        let mut employment = population * rng.gen_range(0.35..0.55);
        let mut rent: f64 = rng.gen_range(700.0..1400.0);
        // Both precarious-housing rates load on one latent factor so their
        // cross-sectional correlation is positive every year, as the sanity
        // check expects.
        let pressure = rng.gen_range(0.0..1.0);
        let mut chronic_rate: f64 = 1.0e-4 * (1.0 + 5.0 * pressure) * rng.gen_range(0.8..1.2);
        let mut crowded_share: f64 = 0.004 * (1.0 + 2.0 * pressure) * rng.gen_range(0.8..1.2);
        let mut income: f64 = rng.gen_range(40_000.0..90_000.0);
        let mut pct_pa: f64 = rng.gen_range(1.0..5.0);
        let mut unemployment: f64 = rng.gen_range(3.0..12.0);
        let mut vacancy: f64 = rng.gen_range(2.0..15.0);

        for (step, &year) in FIXTURE_YEARS.iter().enumerate() {
            if step > 0 {
                let period_start = FIXTURE_YEARS[step - 1];
                let b = bartik[&period_start];
                // Rents respond to predicted employment growth, more where
                // supply is constrained. Every seventh market declines
                // structurally so the negative split column is populated at
                // every horizon.
                let drift = if m % 7 == 0 { -0.06 } else { 0.0 };
                let d_log_rent = 1.2 * b * (1.0 + 0.4 * wri + 0.3 * undevelopable)
                    + drift
                    + rng.gen_range(-0.05..0.07);
                rent *= d_log_rent.exp();
                employment *= (b + rng.gen_range(-0.02..0.02f64)).exp();
                let d_log_chronic = 1.7 * d_log_rent.max(0.0) + 0.02 * d_log_rent.min(0.0)
                    + rng.gen_range(-0.25..0.25);
                chronic_rate *= d_log_chronic.exp();
                crowded_share *= (0.9 * d_log_rent.max(0.0) + rng.gen_range(-0.15..0.15f64)).exp();
                income *= rng.gen_range(0.98..1.10f64);
                pct_pa = (pct_pa + rng.gen_range(-0.4..0.4)).max(0.2);
                unemployment = (unemployment * rng.gen_range(0.85..1.20f64)).clamp(1.5, 25.0);
                vacancy = (vacancy * (0.004 * (rent * 0.05) + rng.gen_range(-0.2..0.2f64)).exp())
                    .clamp(0.5, 30.0);
            }
            // Nominal dollars on disk; the pipeline deflates on load.
            let infl = deflator[&year];
            let mut push = |var: &str, value: f64| {
                series_csv.push_str(&format!("{msa},{year},{var},{value}\n"));
            };
            push("population", population);
            push("chronic_count", chronic_rate * population);
            push("crowded_units", crowded_share * population * 0.4);
            push("total_units", population * 0.4);
            push("median_rent", rent * infl);
            push("median_hh_income", income * infl);
            push("pct_public_assistance", pct_pa);
            push("unemployment_rate", unemployment);
            push("vacancy_rate", vacancy);
            push("employment", employment);
            for (q, factor) in [(1, 0.30), (2, 0.60), (3, 1.00), (4, 1.60), (5, 2.80)] {
                push(
                    &format!("income_q{q}"),
                    income * factor * rng.gen_range(0.97..1.03) * infl,
                );
            }
            for (pct, factor) in [("p05", 0.55), ("p15", 0.70), ("p25", 0.85), ("p50", 1.0)] {
                push(
                    &format!("rent_{pct}"),
                    rent * factor * rng.gen_range(0.97..1.03) * infl,
                );
            }
        }
    }
    fs::write(dir.join("shares.csv"), shares_csv).unwrap();
    fs::write(dir.join("eta.csv"), eta_csv).unwrap();
    fs::write(dir.join("series.csv"), series_csv).unwrap();

    let mut deflator_csv = String::from("year,index\n");
    for (year, index) in &deflator {
        deflator_csv.push_str(&format!("{year},{index}\n"));
    }
    fs::write(dir.join("deflator.csv"), deflator_csv).unwrap();
}

/// Write every fixture plus a config covering all five commands; returns
/// the config path.
pub fn write_full_fixture(dir: &Path, seed: u64) -> PathBuf {
    write_stl_fixture(dir);
    write_estimation_fixture(dir, seed);
    let config = format!(
        r#"{{
  "geometry": {{
    "source": "cocs.geojson",
    "target": "msas.geojson",
    "points": "blockgroups.csv"
  }},
  "counts": "counts.csv",
  "series": "series.csv",
  "deflator": "deflator.csv",
  "eta": "eta.csv",
  "industry_shares": "shares.csv",
  "national_growth": "growth.csv",
  "market": {{
    "utility": {{
      "complementarity": 1.0,
      "h_min": 1.0,
      "h_next": 2.0,
      "prices": [[1.0, 30.0], [2.0, 400.0]]
    }},
    "n_agents": 1500,
    "income_log_mean": 4.0,
    "income_log_sd": 0.55,
    "supply": {{ "points": [[11.5, 1050.0], [31.5, 1500.0]] }},
    "scarring": -6.0,
    "noise_width": 0.5,
    "income_floor": 1e-6,
    "seed": {seed}
  }},
  "bridge": {{
    "market": {{
      "utility": {{
        "complementarity": 1.0,
        "h_min": 1.0,
        "h_next": 2.0,
        "prices": [[1.0, 30.0], [2.0, 400.0]]
      }},
      "n_agents": 500,
      "income_log_mean": 4.0,
      "income_log_sd": 0.55,
      "supply": {{ "points": [[11.5, 350.0], [31.5, 500.0]] }},
      "scarring": -6.0,
      "noise_width": 0.5,
      "income_floor": 1e-6,
      "seed": {seed}
    }},
    "n_markets": 25,
    "n_periods": 2,
    "burn_in": 3,
    "shock_width": 0.06,
    "seed": {seed}
  }},
  "simulate": {{ "t_max": 5, "shift_fraction": 0.05, "shocks": [[2, 0.95]], "run_bridge": true }},
  "output_dir": "out",
  "seed": {seed}
}}"#
    );
    let path = dir.join("pipeline.json");
    fs::write(&path, config).unwrap();
    path
}
