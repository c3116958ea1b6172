//! Per-year correlation tests and summary statistics between two precarity
//! measures, the way the validation stage uses them.
//!
//! ```bash
//! cargo run -p atlas --example sanity_checks
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use atlas::panel::{correlation_test, summary_stats, RawSeries};
use atlas::report;

fn main() -> atlas::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut series = RawSeries::new();
    for m in 0..200 {
        let msa = format!("m{m:03}");
        // One latent factor drives both rates, plus idiosyncratic noise.
        let pressure: f64 = rng.gen_range(0.0..1.0);
        for year in [2011, 2016, 2020] {
            let chronic = 1.0e-4 * (1.0 + 4.0 * pressure) * rng.gen_range(0.7..1.3);
            let crowded = 0.005 * (1.0 + 2.0 * pressure) * rng.gen_range(0.7..1.3);
            series.insert(&msa, year, "chronic_rate", chronic)?;
            series.insert(&msa, year, "crowded_rate", crowded)?;
        }
    }

    let mut rows = Vec::new();
    for year in series.years() {
        let pairs: Vec<(f64, f64)> = series
            .variable_values("crowded_rate", year)
            .into_iter()
            .zip(series.variable_values("chronic_rate", year))
            .map(|((_, x), (_, y))| (x, y))
            .collect();
        let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let raw = correlation_test(&x, &y)?;
        let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
        let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
        let logged = correlation_test(&lx, &ly)?;
        rows.push((year, raw, logged));
    }
    print!("{}", report::correlation_table(&rows));

    let summaries = summary_stats(
        &series,
        &["crowded_rate".to_string(), "chronic_rate".to_string()],
    );
    println!();
    print!("{}", report::summary_table(&summaries));
    Ok(())
}
