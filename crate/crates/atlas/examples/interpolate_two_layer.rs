//! Reallocate counts from one region system onto another through weighted
//! points.
//!
//! Five source regions sit entirely inside the first target region, three
//! more straddle the boundary, and part of the mass falls outside every
//! target. Run with:
//!
//! ```bash
//! cargo run -p atlas --example interpolate_two_layer
//! ```

use std::collections::BTreeMap;

use atlas::geo::{RegionPolygon, RegionSet, WeightedPoint};
use atlas::interpolate::{interpolate_counts, SourceTotals};

fn main() -> atlas::Result<()> {
    // Source layer: five nested squares plus three straddling rectangles.
    let mut polygons: Vec<RegionPolygon> = (1..=5)
        .map(|i| {
            let x0 = (i - 1) as f64;
            RegionPolygon::rect(format!("c{i}"), x0, 0.0, x0 + 1.0, 1.0)
        })
        .collect();
    polygons.push(RegionPolygon::rect("c6", 5.0, 0.0, 8.0, 2.0));
    polygons.push(RegionPolygon::rect("c7", 5.0, 2.0, 8.0, 4.0));
    polygons.push(RegionPolygon::rect("c8", 8.0, 2.0, 11.0, 4.0));
    let source = RegionSet::new("reporting", 2010, polygons)?;

    let target = RegionSet::new(
        "metro",
        2010,
        vec![
            RegionPolygon::rect("metro-west", 0.0, 0.0, 6.0, 4.0),
            RegionPolygon::rect("metro-east", 7.0, 0.0, 10.0, 4.0),
        ],
    )?;

    let mut points = Vec::new();
    for i in 1..=5 {
        points.push(WeightedPoint::new(
            format!("b{i}"),
            (i - 1) as f64 + 0.5,
            0.5,
            100.0 * i as f64,
        ));
    }
    points.push(WeightedPoint::new("b6a", 5.5, 1.0, 300.0));
    points.push(WeightedPoint::new("b6b", 7.5, 1.0, 100.0));
    points.push(WeightedPoint::new("b6c", 6.5, 1.0, 600.0)); // outside both targets
    points.push(WeightedPoint::new("b7a", 5.5, 3.0, 200.0));
    points.push(WeightedPoint::new("b7b", 7.5, 3.0, 200.0));
    points.push(WeightedPoint::new("b8a", 8.5, 3.0, 150.0));
    points.push(WeightedPoint::new("b8b", 10.5, 3.0, 50.0));

    let mut totals = SourceTotals::new();
    for (id, count) in [
        ("c1", 10.0),
        ("c2", 20.0),
        ("c3", 30.0),
        ("c4", 40.0),
        ("c5", 50.0),
        ("c6", 50.0),
        ("c7", 40.0),
        ("c8", 80.0),
    ] {
        totals.insert(id, count)?;
    }
    let source_mass = totals.grand_total();
    let by_year = BTreeMap::from([(2011, totals)]);

    let (result, diagnostics) = interpolate_counts(&source, &target, &points, &by_year)?;
    let year = &result[&2011];

    println!("source mass: {source_mass}");
    for (id, count) in &year.totals {
        println!("  {id}: {count}");
    }
    println!("  excluded (outside every target): {}", year.excluded_mass);
    println!(
        "conserved: {} (relative error {:.2e})",
        year.grand_total(),
        (year.grand_total() - source_mass).abs() / source_mass
    );
    println!(
        "excluded share: {:.4}",
        diagnostics.excluded_mass_share[&2011]
    );
    println!(
        "points outside the target layer: {}",
        diagnostics.points_outside_target
    );
    Ok(())
}
