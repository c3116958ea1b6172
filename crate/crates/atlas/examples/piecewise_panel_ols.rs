//! Build a long-differenced panel with the price change split at zero, fit
//! it by cluster-robust OLS, test the two split coefficients against each
//! other, and trace the margins curve.
//!
//! ```bash
//! cargo run -p atlas --example piecewise_panel_ols
//! ```

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use atlas::ols;
use atlas::panel::{build_panel, RawSeries, SpecConfig, VariableSpec};
use atlas::report;

fn main() -> atlas::Result<()> {
    // Synthetic two-period panel: outcome responds strongly to price
    // increases and barely to decreases.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut series = RawSeries::new();
    for m in 0..120 {
        let msa = format!("m{m:03}");
        let mut rate: f64 = rng.gen_range(1.0e-4..5.0e-4);
        let mut rent: f64 = rng.gen_range(700.0..1500.0);
        let mut assistance: f64 = rng.gen_range(1.0..5.0);
        for year in [2011, 2016, 2020] {
            series.insert(&msa, year, "outcome_rate", rate)?;
            series.insert(&msa, year, "price", rent)?;
            series.insert(&msa, year, "assistance", assistance)?;
            let d_log_price: f64 = rng.gen_range(-0.08..0.12);
            rent *= d_log_price.exp();
            rate *= (1.8 * d_log_price.max(0.0) + 0.05 * d_log_price.min(0.0)
                + rng.gen_range(-0.2..0.2))
            .exp();
            assistance = (assistance + rng.gen_range(-0.3..0.3)).max(0.2);
        }
    }

    let spec = SpecConfig {
        label: "piecewise demo".into(),
        outcome: VariableSpec::log("outcome_rate"),
        split: Some(VariableSpec::log("price")),
        covariates: vec![VariableSpec::level("assistance")],
        periods: vec![(2011, 2016), (2016, 2020)],
    };
    let panel = build_panel(&series, &spec)?;
    println!(
        "panel: {} observations, {} dropped",
        panel.observations.len(),
        panel.drops.len()
    );

    let design = ols::design_from_panel(&panel)?;
    let fit = ols::fit_labeled(&design, &spec.label, panel.drops.summary())?;
    print!("{}", report::estimate_table(&fit));

    let wald = ols::wald_equal_coefficients(&fit, "price_plus", "price_minus")?;
    print!("{}", report::wald_line("price_plus = price_minus", &wald));

    let grid: Vec<f64> = (-10..=10).map(|i| i as f64 / 100.0).collect();
    let curve = ols::margins(&fit, "price_plus", "price_minus", &grid, &BTreeMap::new())?;
    println!("\nmargins (grid, fit, 95% band):");
    for point in curve.iter().step_by(4) {
        println!(
            "  {:+.2}  {:+.4}  [{:+.4}, {:+.4}]",
            point.grid, point.fit, point.lo, point.hi
        );
    }
    Ok(())
}
