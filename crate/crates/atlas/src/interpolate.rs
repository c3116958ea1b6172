//! Mass-preserving reallocation of region totals onto a second region system.
//!
//! Totals are first disaggregated to weighted points in proportion to their
//! weights, then re-aggregated over the target regions. Source mass is
//! conserved exactly up to floating error: points outside every target region
//! accumulate into an explicit `excluded_mass` instead of vanishing.

use std::collections::BTreeMap;

use crate::error::{AtlasError, Result};
use crate::geo::{assign_points_indexed, Assignment, RegionSet, SpatialIndex, WeightedPoint};

/// Compensated (Kahan) summation. Region sums run over ~1e5 points and must
/// reproduce source totals to 1e-9 relative.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub fn add(&mut self, v: f64) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Per-region totals for one year of one region system.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SourceTotals {
    totals: BTreeMap<String, f64>,
}

impl SourceTotals {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, f64)>) -> Result<Self> {
        let mut t = SourceTotals::new();
        for (id, v) in pairs {
            t.insert(id, v)?;
        }
        Ok(t)
    }

    pub fn insert(&mut self, id: impl Into<String>, value: f64) -> Result<()> {
        let id = id.into();
        if !value.is_finite() || value < 0.0 {
            return Err(AtlasError::InvalidInput(format!(
                "total for region '{id}' must be finite and >= 0, got {value}"
            )));
        }
        self.totals.insert(id, value);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<f64> {
        self.totals.get(id).copied()
    }

    /// Drop a region's total, returning it if present. Used by the yearly
    /// boundary-change exclusion lists.
    pub fn remove(&mut self, id: &str) -> Option<f64> {
        self.totals.remove(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.totals.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn grand_total(&self) -> f64 {
        let mut s = KahanSum::default();
        for v in self.totals.values() {
            s.add(*v);
        }
        s.value()
    }

    /// Every referenced region must exist in the given set.
    pub fn validate_against(&self, regions: &RegionSet) -> Result<()> {
        let ids = regions.region_ids();
        for id in self.totals.keys() {
            if !ids.iter().any(|r| r == id) {
                return Err(AtlasError::InvalidInput(format!(
                    "totals reference region '{id}' absent from region set '{}'",
                    regions.name
                )));
            }
        }
        Ok(())
    }
}

/// Point id -> allocated count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointAllocation {
    alloc: BTreeMap<String, f64>,
}

impl PointAllocation {
    pub fn get(&self, point_id: &str) -> Option<f64> {
        self.alloc.get(point_id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.alloc.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.alloc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alloc.is_empty()
    }
}

/// Target-region totals plus the mass that landed outside every target.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TargetTotals {
    pub totals: BTreeMap<String, f64>,
    pub excluded_mass: f64,
}

impl TargetTotals {
    pub fn get(&self, id: &str) -> f64 {
        self.totals.get(id).copied().unwrap_or(0.0)
    }

    pub fn grand_total(&self) -> f64 {
        let mut s = KahanSum::default();
        for v in self.totals.values() {
            s.add(*v);
        }
        s.add(self.excluded_mass);
        s.value()
    }
}

/// Split each region total across its points in proportion to point weight.
///
/// A region with positive total but zero carrying capacity (no assigned
/// points, or all weights zero) is a hard error: reallocating its mass
/// anywhere else would fabricate spatial information.
pub fn disaggregate(
    totals: &SourceTotals,
    source_assign: &Assignment,
    points: &[WeightedPoint],
) -> Result<PointAllocation> {
    let mut weight_by_region: BTreeMap<&str, KahanSum> = BTreeMap::new();
    for p in points {
        if !source_assign.contains_point(&p.id) {
            return Err(AtlasError::IdMismatch {
                missing: vec![p.id.clone()],
            });
        }
        if let Some(region) = source_assign.get(&p.id) {
            weight_by_region.entry(region).or_default().add(p.weight);
        }
    }

    for (region, total) in totals.iter() {
        if total > 0.0 {
            let capacity = weight_by_region.get(region).map(|s| s.value()).unwrap_or(0.0);
            if capacity <= 0.0 {
                return Err(AtlasError::ZeroPopulationRegion {
                    region: region.to_string(),
                    total,
                });
            }
        }
    }

    let mut alloc = BTreeMap::new();
    for p in points {
        let share = match source_assign.get(&p.id) {
            Some(region) => match totals.get(region) {
                Some(total) if total > 0.0 => {
                    let capacity = weight_by_region[region].value();
                    total * (p.weight / capacity)
                }
                _ => 0.0,
            },
            None => 0.0,
        };
        alloc.insert(p.id.clone(), share);
    }
    Ok(PointAllocation { alloc })
}

/// Sum point allocations over target regions; unassigned points feed
/// `excluded_mass`.
pub fn aggregate(alloc: &PointAllocation, target_assign: &Assignment) -> Result<TargetTotals> {
    let missing_in_assign: Vec<String> = alloc
        .iter()
        .filter(|(id, _)| !target_assign.contains_point(id))
        .map(|(id, _)| id.to_string())
        .collect();
    let missing_in_alloc: Vec<String> = target_assign
        .iter()
        .filter(|(id, _)| alloc.get(id).is_none())
        .map(|(id, _)| id.to_string())
        .collect();
    if !missing_in_assign.is_empty() || !missing_in_alloc.is_empty() {
        let mut missing = missing_in_assign;
        missing.extend(missing_in_alloc);
        missing.sort();
        return Err(AtlasError::IdMismatch { missing });
    }

    let mut sums: BTreeMap<String, KahanSum> = BTreeMap::new();
    let mut excluded = KahanSum::default();
    for (id, h) in alloc.iter() {
        match target_assign.get(id) {
            Some(region) => sums.entry(region.to_string()).or_default().add(h),
            None => excluded.add(h),
        }
    }
    Ok(TargetTotals {
        totals: sums.into_iter().map(|(k, s)| (k, s.value())).collect(),
        excluded_mass: excluded.value(),
    })
}

/// Diagnostics accompanying a full interpolation run.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct InterpolationDiagnostics {
    /// Source region id -> number of assigned points.
    pub source_point_counts: BTreeMap<String, usize>,
    /// Target region id -> number of assigned points.
    pub target_point_counts: BTreeMap<String, usize>,
    /// Source regions with zero aggregate weight.
    pub zero_population_regions: Vec<String>,
    pub overlap_warnings: Vec<String>,
    /// Sampled polygon-quality warnings (overlapping pairs, crossing ring
    /// segments), filled by the pipeline.
    pub geometry_warnings: Vec<String>,
    /// Per year: excluded mass divided by total source mass (0 when the
    /// source mass is zero).
    pub excluded_mass_share: BTreeMap<i32, f64>,
    /// Regions removed per year by the boundary-change exclusion list,
    /// filled by the pipeline.
    pub excluded_regions: BTreeMap<i32, Vec<String>>,
    pub points_outside_source: usize,
    pub points_outside_target: usize,
}

/// Full interpolation of per-year totals from `source` regions onto `target`
/// regions through weighted points.
pub fn interpolate_counts(
    source: &RegionSet,
    target: &RegionSet,
    points: &[WeightedPoint],
    totals_by_year: &BTreeMap<i32, SourceTotals>,
) -> Result<(BTreeMap<i32, TargetTotals>, InterpolationDiagnostics)> {
    for totals in totals_by_year.values() {
        totals.validate_against(source)?;
    }

    let source_index = SpatialIndex::build(source)?;
    let target_index = SpatialIndex::build(target)?;
    let source_result = assign_points_indexed(points, source, &source_index)?;
    let target_result = assign_points_indexed(points, target, &target_index)?;

    let mut diagnostics = InterpolationDiagnostics::default();
    for id in source.region_ids() {
        diagnostics.source_point_counts.insert(id, 0);
    }
    for id in target.region_ids() {
        diagnostics.target_point_counts.insert(id, 0);
    }
    let mut weight_by_region: BTreeMap<String, KahanSum> = BTreeMap::new();
    for p in points {
        match source_result.assignment.get(&p.id) {
            Some(region) => {
                *diagnostics
                    .source_point_counts
                    .get_mut(region)
                    .expect("assignment references known region") += 1;
                weight_by_region.entry(region.to_string()).or_default().add(p.weight);
            }
            None => diagnostics.points_outside_source += 1,
        }
        match target_result.assignment.get(&p.id) {
            Some(region) => {
                *diagnostics
                    .target_point_counts
                    .get_mut(region)
                    .expect("assignment references known region") += 1;
            }
            None => diagnostics.points_outside_target += 1,
        }
    }
    for id in source.region_ids() {
        if weight_by_region.get(&id).map(|s| s.value()).unwrap_or(0.0) <= 0.0 {
            diagnostics.zero_population_regions.push(id);
        }
    }
    diagnostics.overlap_warnings = source_result
        .overlap_warnings
        .iter()
        .chain(target_result.overlap_warnings.iter())
        .cloned()
        .collect();
    diagnostics.overlap_warnings.sort();

    let mut out = BTreeMap::new();
    for (&year, totals) in totals_by_year {
        let alloc = disaggregate(totals, &source_result.assignment, points)?;
        let target_totals = aggregate(&alloc, &target_result.assignment)?;
        let source_mass = totals.grand_total();
        let share = if source_mass > 0.0 {
            target_totals.excluded_mass / source_mass
        } else {
            0.0
        };
        diagnostics.excluded_mass_share.insert(year, share);
        out.insert(year, target_totals);
    }
    Ok((out, diagnostics))
}
