//! File formats: GeoJSON region readers, CSV readers for every input table,
//! and deterministic CSV/JSON writers.
//!
//! Writers iterate sorted containers and format floats with Rust's
//! shortest-roundtrip `Display`, so identical data always produces
//! byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{AtlasError, Result};
use crate::geo::{RegionPolygon, RegionSet, Ring, WeightedPoint};
use crate::interpolate::{SourceTotals, TargetTotals};
use crate::ols::MarginsPoint;
use crate::panel::{DropLog, Panel, RawSeries};
use crate::shiftshare::{EtaRow, IndustryShares, NationalGrowth, SupplyConstraints};

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| AtlasError::io(path, e))
}

/// Region geometries from a GeoJSON FeatureCollection of Polygon features.
/// The feature property holding the region id is configurable and defaults
/// to `GEOID`.
pub fn read_geojson_regions(
    path: &Path,
    id_property: &str,
    name: &str,
    vintage: i32,
) -> Result<RegionSet> {
    let text = read_to_string(path)?;
    let root: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| AtlasError::parse(path, format!("invalid JSON: {e}")))?;
    if root["type"] != "FeatureCollection" {
        return Err(AtlasError::parse(path, "expected a FeatureCollection"));
    }
    let features = root["features"]
        .as_array()
        .ok_or_else(|| AtlasError::parse(path, "missing features array"))?;

    let mut polygons = Vec::with_capacity(features.len());
    for (idx, feature) in features.iter().enumerate() {
        let id = match &feature["properties"][id_property] {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Number(n) => n.to_string(),
            _ => {
                return Err(AtlasError::parse(
                    path,
                    format!("feature {idx} lacks property '{id_property}'"),
                ))
            }
        };
        let geometry = &feature["geometry"];
        let geom_type = geometry["type"].as_str().unwrap_or("");
        if geom_type != "Polygon" {
            return Err(AtlasError::parse(
                path,
                format!(
                    "feature '{id}' has geometry type '{geom_type}'; only Polygon is supported \
                     (split multipolygon regions into one feature per part upstream)"
                ),
            ));
        }
        let rings_json = geometry["coordinates"]
            .as_array()
            .ok_or_else(|| AtlasError::parse(path, format!("feature '{id}' lacks coordinates")))?;
        let mut rings: Vec<Ring> = Vec::with_capacity(rings_json.len());
        for ring_json in rings_json {
            let coords = ring_json
                .as_array()
                .ok_or_else(|| AtlasError::parse(path, format!("feature '{id}': bad ring")))?;
            let mut ring = Vec::with_capacity(coords.len());
            for c in coords {
                let pair = c
                    .as_array()
                    .filter(|p| p.len() >= 2)
                    .ok_or_else(|| AtlasError::parse(path, format!("feature '{id}': bad coordinate")))?;
                let x = pair[0].as_f64().ok_or_else(|| {
                    AtlasError::parse(path, format!("feature '{id}': non-numeric coordinate"))
                })?;
                let y = pair[1].as_f64().ok_or_else(|| {
                    AtlasError::parse(path, format!("feature '{id}': non-numeric coordinate"))
                })?;
                ring.push([x, y]);
            }
            rings.push(ring);
        }
        if rings.is_empty() {
            return Err(AtlasError::parse(path, format!("feature '{id}' has no rings")));
        }
        let exterior = rings.remove(0);
        polygons.push(RegionPolygon::new(id, exterior, rings));
    }
    RegionSet::new(name, vintage, polygons)
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| AtlasError::parse(path, e.to_string()))
}

fn parse_field<T: std::str::FromStr>(path: &Path, row: usize, field: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| {
        AtlasError::parse(path, format!("row {row}: cannot parse {field} from '{raw}'"))
    })
}

/// Weighted points from CSV columns `geoid,x,y,population`.
pub fn read_points_csv(path: &Path) -> Result<Vec<WeightedPoint>> {
    let mut reader = csv_reader(path)?;
    let mut points = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| AtlasError::parse(path, e.to_string()))?;
        if record.len() < 4 {
            return Err(AtlasError::parse(path, format!("row {i}: expected 4 columns")));
        }
        points.push(WeightedPoint::new(
            record[0].to_string(),
            parse_field(path, i, "x", &record[1])?,
            parse_field(path, i, "y", &record[2])?,
            parse_field(path, i, "population", &record[3])?,
        ));
    }
    Ok(points)
}

/// Per-year region totals from CSV columns `region_id,year,count`.
pub fn read_counts_csv(path: &Path) -> Result<BTreeMap<i32, SourceTotals>> {
    let mut reader = csv_reader(path)?;
    let mut by_year: BTreeMap<i32, SourceTotals> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| AtlasError::parse(path, e.to_string()))?;
        if record.len() < 3 {
            return Err(AtlasError::parse(path, format!("row {i}: expected 3 columns")));
        }
        let year: i32 = parse_field(path, i, "year", &record[1])?;
        let count: f64 = parse_field(path, i, "count", &record[2])?;
        by_year
            .entry(year)
            .or_default()
            .insert(record[0].to_string(), count)?;
    }
    Ok(by_year)
}

/// Long-format panel series from CSV columns `msa_id,year,variable,value`.
pub fn read_series_csv(path: &Path) -> Result<RawSeries> {
    let mut reader = csv_reader(path)?;
    let mut series = RawSeries::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| AtlasError::parse(path, e.to_string()))?;
        if record.len() < 4 {
            return Err(AtlasError::parse(path, format!("row {i}: expected 4 columns")));
        }
        series.insert(
            record[0].to_string(),
            parse_field(path, i, "year", &record[1])?,
            record[2].to_string(),
            parse_field(path, i, "value", &record[3])?,
        )?;
    }
    Ok(series)
}

/// Deflator table from CSV columns `year,index` (index relative to the base
/// year).
pub fn read_deflator_csv(path: &Path) -> Result<BTreeMap<i32, f64>> {
    let mut reader = csv_reader(path)?;
    let mut table = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| AtlasError::parse(path, e.to_string()))?;
        if record.len() < 2 {
            return Err(AtlasError::parse(path, format!("row {i}: expected 2 columns")));
        }
        table.insert(
            parse_field(path, i, "year", &record[0])?,
            parse_field(path, i, "index", &record[1])?,
        );
    }
    Ok(table)
}

/// Industry shares from CSV columns `msa_id,year,naics2,share`, renormalized
/// per region-year.
pub fn read_industry_shares_csv(path: &Path) -> Result<IndustryShares> {
    let mut reader = csv_reader(path)?;
    let mut shares = IndustryShares::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| AtlasError::parse(path, e.to_string()))?;
        if record.len() < 4 {
            return Err(AtlasError::parse(path, format!("row {i}: expected 4 columns")));
        }
        shares.insert(
            record[0].to_string(),
            parse_field(path, i, "year", &record[1])?,
            record[2].to_string(),
            parse_field(path, i, "share", &record[3])?,
        )?;
    }
    shares.normalize();
    Ok(shares)
}

/// National growth rates from CSV columns `naics2,year,log_growth`, grouped
/// into one table per year. The year labels the period by its start.
pub fn read_national_growth_csv(path: &Path) -> Result<BTreeMap<i32, NationalGrowth>> {
    let mut reader = csv_reader(path)?;
    let mut raw: BTreeMap<i32, Vec<(String, f64)>> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| AtlasError::parse(path, e.to_string()))?;
        if record.len() < 3 {
            return Err(AtlasError::parse(path, format!("row {i}: expected 3 columns")));
        }
        let year: i32 = parse_field(path, i, "year", &record[1])?;
        let growth: f64 = parse_field(path, i, "log_growth", &record[2])?;
        raw.entry(year).or_default().push((record[0].to_string(), growth));
    }
    let mut out = BTreeMap::new();
    for (year, pairs) in raw {
        out.insert(year, NationalGrowth::from_pairs(pairs)?);
    }
    Ok(out)
}

/// Supply constraints from CSV columns
/// `msa_id,wri,elasticity,undevelopable_share`. One row per region; the
/// loader rejects duplicates so the file stays time-invariant.
pub fn read_eta_csv(path: &Path) -> Result<SupplyConstraints> {
    let mut reader = csv_reader(path)?;
    let mut eta = SupplyConstraints::default();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| AtlasError::parse(path, e.to_string()))?;
        if record.len() < 4 {
            return Err(AtlasError::parse(path, format!("row {i}: expected 4 columns")));
        }
        eta.insert(
            record[0].to_string(),
            EtaRow {
                wri: parse_field(path, i, "wri", &record[1])?,
                elasticity: parse_field(path, i, "elasticity", &record[2])?,
                undevelopable_share: parse_field(path, i, "undevelopable_share", &record[3])?,
            },
        )?;
    }
    Ok(eta)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| AtlasError::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| AtlasError::io(path, e))
}

/// Interpolated totals as CSV `target_id,year,count`, sorted by id then
/// year. The excluded mass lives in the JSON diagnostics, not here.
pub fn write_target_totals_csv(path: &Path, by_year: &BTreeMap<i32, TargetTotals>) -> Result<()> {
    let mut rows: Vec<(String, i32, f64)> = Vec::new();
    for (&year, totals) in by_year {
        for (id, &count) in &totals.totals {
            rows.push((id.clone(), year, count));
        }
    }
    rows.sort_by(|a, b| (a.0.as_str(), a.1).cmp(&(b.0.as_str(), b.1)));
    let mut out = String::from("target_id,year,count\n");
    for (id, year, count) in rows {
        out.push_str(&format!("{id},{year},{count}\n"));
    }
    write_file(path, &out)
}

/// Any serializable report as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| AtlasError::parse(path, format!("serialize: {e}")))?;
    write_file(path, &format!("{text}\n"))
}

/// Estimation panel as CSV for inspection.
pub fn write_panel_csv(path: &Path, panel: &Panel) -> Result<()> {
    let mut header = String::from(
        "msa,period,outcome,outcome_level_start,outcome_level_end,split_plus,split_minus",
    );
    for c in &panel.covariate_names {
        header.push_str(&format!(",d_{c}"));
    }
    for label in panel.period_labels.iter().skip(1) {
        header.push_str(&format!(",period_{label}"));
    }
    header.push_str(",cluster\n");
    let mut out = header;
    for obs in &panel.observations {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}",
            obs.msa,
            obs.period,
            obs.outcome,
            obs.outcome_level_start,
            obs.outcome_level_end,
            obs.split_plus,
            obs.split_minus
        ));
        for c in &obs.covariates {
            out.push_str(&format!(",{c}"));
        }
        for d in &obs.period_dummies {
            out.push_str(&format!(",{d}"));
        }
        out.push_str(&format!(",{}\n", obs.cluster));
    }
    write_file(path, &out)
}

/// Drop log as CSV `msa,context,reason`.
pub fn write_drops_csv(path: &Path, drops: &DropLog) -> Result<()> {
    let mut out = String::from("msa,context,reason\n");
    for r in drops.iter() {
        out.push_str(&format!("{},{},{}\n", r.msa, r.context, r.reason));
    }
    write_file(path, &out)
}

/// Margins curve as CSV `grid,fit,lo,hi`.
pub fn write_margins_csv(path: &Path, curve: &[MarginsPoint]) -> Result<()> {
    let mut out = String::from("grid,fit,lo,hi\n");
    for p in curve {
        out.push_str(&format!("{},{},{},{}\n", p.grid, p.fit, p.lo, p.hi));
    }
    write_file(path, &out)
}

/// Simulated market periods as CSV.
pub fn write_market_csv(path: &Path, periods: &[crate::market::PeriodRecord]) -> Result<()> {
    let mut out = String::from(
        "t,price,quantity,homeless_count,mean_income_homeless,mean_income_housed\n",
    );
    for r in periods {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.t, r.price, r.quantity, r.homeless_count, r.mean_income_homeless, r.mean_income_housed
        ));
    }
    write_file(path, &out)
}
