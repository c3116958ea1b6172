//! Drive all five pipeline commands from a config file, writing a complete
//! synthetic input set first. This is the same path the `atlas` binary
//! takes.
//!
//! ```bash
//! cargo run -p atlas --example full_pipeline
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use atlas::pipeline::Pipeline;

fn write_inputs(dir: &Path) -> std::io::Result<()> {
    // Two region systems with one straddling source region.
    let feature = |id: &str, x0: f64, y0: f64, x1: f64, y1: f64| {
        format!(
            r#"{{"type":"Feature","properties":{{"GEOID":"{id}"}},"geometry":{{"type":"Polygon","coordinates":[[[{x0},{y0}],[{x1},{y0}],[{x1},{y1}],[{x0},{y1}],[{x0},{y0}]]]}}}}"#
        )
    };
    fs::write(
        dir.join("source.geojson"),
        format!(
            r#"{{"type":"FeatureCollection","features":[{},{},{}]}}"#,
            feature("s1", 0.0, 0.0, 2.0, 2.0),
            feature("s2", 2.0, 0.0, 4.0, 2.0),
            feature("s3", 4.0, 0.0, 7.0, 2.0)
        ),
    )?;
    fs::write(
        dir.join("target.geojson"),
        format!(
            r#"{{"type":"FeatureCollection","features":[{},{}]}}"#,
            feature("t1", 0.0, 0.0, 5.0, 2.0),
            feature("t2", 5.0, 0.0, 7.0, 2.0)
        ),
    )?;
    fs::write(
        dir.join("points.csv"),
        "geoid,x,y,population\n\
         p1,1.0,1.0,500\np2,3.0,1.0,300\np3,4.5,1.0,400\np4,6.0,1.0,600\n",
    )?;
    fs::write(
        dir.join("counts.csv"),
        "region_id,year,count\ns1,2011,40\ns2,2011,30\ns3,2011,100\n",
    )?;

    // Minimal series for the estimation and validation stages.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut series = String::from("msa_id,year,variable,value\n");
    let deflator = |year: i32| match year {
        2011 => 1.32,
        2016 => 1.45,
        _ => 1.60,
    };
    for m in 0..40 {
        let msa = format!("m{m:02}");
        let pressure: f64 = rng.gen_range(0.0..1.0);
        let mut rate: f64 = 1.0e-4 * (1.0 + 4.0 * pressure);
        let mut crowded: f64 = 0.005 * (1.0 + 2.0 * pressure);
        let mut rent: f64 = rng.gen_range(800.0..1400.0);
        let population: f64 = rng.gen_range(2.0e5..2.0e6);
        let mut income: f64 = rng.gen_range(45_000.0..80_000.0);
        let mut assistance: f64 = rng.gen_range(1.0..4.0);
        for year in [2011, 2016, 2020] {
            // Dollar figures go to disk in nominal terms; the pipeline
            // deflates them back on load.
            let infl = deflator(year);
            series.push_str(&format!("{msa},{year},population,{population}\n"));
            series.push_str(&format!("{msa},{year},chronic_count,{}\n", rate * population));
            series.push_str(&format!("{msa},{year},crowded_units,{}\n", crowded * population * 0.4));
            series.push_str(&format!("{msa},{year},total_units,{}\n", population * 0.4));
            series.push_str(&format!("{msa},{year},median_rent,{}\n", rent * infl));
            series.push_str(&format!("{msa},{year},median_hh_income,{}\n", income * infl));
            series.push_str(&format!("{msa},{year},pct_public_assistance,{assistance}\n"));
            let d: f64 = rng.gen_range(-0.06..0.10);
            rent *= d.exp();
            rate *= (1.8 * d.max(0.0) + rng.gen_range(-0.2..0.2f64)).exp();
            crowded *= (0.9 * d.max(0.0) + rng.gen_range(-0.1..0.1f64)).exp();
            income *= rng.gen_range(0.98..1.08f64);
            assistance = (assistance + rng.gen_range(-0.3..0.3)).max(0.3);
        }
    }
    fs::write(dir.join("series.csv"), series)?;
    fs::write(dir.join("deflator.csv"), "year,index\n2011,1.32\n2016,1.45\n2020,1.60\n")?;

    fs::write(
        dir.join("pipeline.json"),
        r#"{
  "geometry": {"source": "source.geojson", "target": "target.geojson", "points": "points.csv"},
  "counts": "counts.csv",
  "series": "series.csv",
  "deflator": "deflator.csv",
  "simulate": {"t_max": 5, "shift_fraction": 0.05, "shocks": [[2, 0.95]], "run_bridge": false},
  "output_dir": "out",
  "seed": 42
}"#,
    )?;
    Ok(())
}

fn main() -> atlas::Result<()> {
    let dir = std::env::temp_dir().join("atlas-full-pipeline-demo");
    fs::create_dir_all(&dir).map_err(|e| atlas::AtlasError::io(&dir, e))?;
    write_inputs(&dir).map_err(|e| atlas::AtlasError::io(&dir, e))?;

    let pipeline = Pipeline::load(&dir.join("pipeline.json"), None, None)?;
    println!("inputs and outputs under {}", dir.display());

    let manifest = pipeline.cmd_interpolate()?;
    println!("\ninterpolate: {} stages", manifest.stages.len());
    println!(
        "{}",
        fs::read_to_string(pipeline.out_dir().join("interpolated_counts.csv")).unwrap()
    );

    pipeline.cmd_panel("chronic-pooled")?;
    pipeline.cmd_estimate("chronic-pooled")?;
    println!(
        "{}",
        fs::read_to_string(pipeline.out_dir().join("chronic-pooled/estimate.txt")).unwrap()
    );

    pipeline.cmd_simulate()?;
    println!(
        "asymmetry report:\n{}",
        fs::read_to_string(pipeline.out_dir().join("asymmetry.json")).unwrap()
    );

    pipeline.cmd_validate()?;
    println!(
        "{}",
        fs::read_to_string(pipeline.out_dir().join("validation.txt")).unwrap()
    );
    Ok(())
}
