//! Shift-share instruments end to end: predicted growth from industry
//! shares, interactions with supply constraints, first stages, two-stage
//! least squares, the over-identification test, and the leave-one-out
//! refits.
//!
//! ```bash
//! cargo run -p atlas --example bartik_iv
//! ```

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use atlas::panel::piecewise_split;
use atlas::report;
use atlas::shiftshare::{
    bartik, build_instruments, first_stages, fit_iv, hansen_j, leave_one_out, EtaRow,
    IVDesign, NationalGrowth, SupplyConstraints, INSTRUMENT_LABELS,
};

fn main() -> atlas::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let industries = ["11", "23", "31", "48", "62"];
    let growth = NationalGrowth::from_pairs(
        industries
            .iter()
            .map(|k| (k.to_string(), rng.gen_range(-0.02..0.08))),
    )?;

    // Per-region shares, constraints, and the predicted growth rate.
    let n = 1200;
    let mut eta = SupplyConstraints::default();
    let mut bartik_values = BTreeMap::new();
    for i in 0..n {
        let msa = format!("m{i:04}");
        let raw: Vec<f64> = industries.iter().map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let shares: BTreeMap<String, f64> = industries
            .iter()
            .zip(&raw)
            .map(|(k, v)| (k.to_string(), v / total))
            .collect();
        let b = bartik(&shares, &growth)?;
        bartik_values.insert((msa.clone(), "t".to_string()), b);
        eta.insert(
            &msa,
            EtaRow {
                wri: rng.gen_range(-1.0..2.0),
                elasticity: rng.gen_range(0.5..4.0),
                undevelopable_share: rng.gen_range(0.05..0.9),
            },
        )?;
    }
    let (instruments, dropped) = build_instruments(&bartik_values, &eta);
    println!(
        "built {} instrument rows ({} dropped for missing constraints)",
        instruments.len(),
        dropped.len()
    );

    // Structural system: rents and employment respond to the instruments
    // and to a common shock that also moves the outcome, so plain OLS is
    // biased and the instrumented fit is not.
    let mut y = DVector::zeros(n);
    let mut endogenous = DMatrix::zeros(n, 3);
    let mut exogenous = DMatrix::zeros(n, 1);
    let mut z = DMatrix::zeros(n, 4);
    let mut clusters = Vec::with_capacity(n);
    for (i, ((msa, _), row)) in instruments.iter().enumerate() {
        let shock: f64 = rng.gen_range(-0.1..0.1);
        let d_rent = 2.0 * row[0] + 0.8 * row[1] - 0.6 * row[2] + 0.5 * row[3]
            + 0.9 * shock
            + rng.gen_range(-0.03..0.03);
        let (plus, minus) = piecewise_split(d_rent);
        let d_emp = 1.5 * row[0] + 0.4 * row[1] + 0.5 * shock + rng.gen_range(-0.03..0.03);
        y[i] = 0.2 + 1.6 * plus + 0.1 * minus + 0.7 * d_emp + 1.0 * shock
            + rng.gen_range(-0.05..0.05);
        endogenous[(i, 0)] = plus;
        endogenous[(i, 1)] = minus;
        endogenous[(i, 2)] = d_emp;
        exogenous[(i, 0)] = 1.0;
        for j in 0..4 {
            z[(i, j)] = row[j];
        }
        clusters.push(msa.clone());
    }
    let design = IVDesign {
        y,
        endogenous,
        exogenous,
        instruments: z,
        clusters,
        endogenous_names: vec!["rent_plus".into(), "rent_minus".into(), "d_employment".into()],
        exogenous_names: vec!["intercept".into()],
        instrument_names: INSTRUMENT_LABELS.iter().map(|s| s.to_string()).collect(),
    };

    for fs in first_stages(&design)? {
        println!(
            "first stage [{}]: partial F = {:.1}",
            fs.endogenous_name, fs.partial_f
        );
    }

    let fit = fit_iv(&design, "bartik demo")?;
    print!("{}", report::estimate_table(&fit));
    print!("{}", report::hansen_line(&hansen_j(&design, &fit)?));

    println!("\nleave-one-out refits:");
    for (dropped_instrument, refit) in leave_one_out(&design, "bartik demo")? {
        println!(
            "  without {dropped_instrument}: rent_plus = {:.3}, rent_minus = {:.3}",
            refit.coefficient("rent_plus").unwrap(),
            refit.coefficient("rent_minus").unwrap()
        );
    }
    Ok(())
}
