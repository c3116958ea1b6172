//! Geometry primitives and the spatial assignment of weighted points to
//! regions.
//!
//! Coordinates are treated as planar throughout; containment is decided by
//! the even–odd (ray-casting) rule with points exactly on an edge counted as
//! inside. Both conventions are deterministic so repeated runs produce
//! byte-identical assignments.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::error::{AtlasError, Result};

/// A point carrying an id and a nonnegative weight (e.g. a census block-group
/// centroid with its population).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPoint {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub weight: f64,
}

impl WeightedPoint {
    pub fn new(id: impl Into<String>, x: f64, y: f64, weight: f64) -> Self {
        WeightedPoint {
            id: id.into(),
            x,
            y,
            weight,
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.x.is_finite() || !self.y.is_finite() {
            return Err(AtlasError::InvalidInput(format!(
                "point '{}' has non-finite coordinates",
                self.id
            )));
        }
        if !self.weight.is_finite() || self.weight < 0.0 {
            return Err(AtlasError::InvalidInput(format!(
                "point '{}' has invalid weight {}",
                self.id, self.weight
            )));
        }
        Ok(())
    }
}

/// Closed ring of vertices; first vertex equals the last.
pub type Ring = Vec<[f64; 2]>;

/// One polygon: an exterior ring plus zero or more interior rings (holes).
#[derive(Debug, Clone)]
pub struct RegionPolygon {
    pub id: String,
    pub exterior: Ring,
    pub interiors: Vec<Ring>,
}

impl RegionPolygon {
    pub fn new(id: impl Into<String>, exterior: Ring, interiors: Vec<Ring>) -> Self {
        RegionPolygon {
            id: id.into(),
            exterior,
            interiors,
        }
    }

    /// Convenience constructor for axis-aligned rectangle fixtures.
    pub fn rect(id: impl Into<String>, x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        RegionPolygon::new(
            id,
            vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]],
            Vec::new(),
        )
    }

    /// Structural validation: ring closure, vertex counts, finite coordinates.
    pub fn validate(&self) -> Result<()> {
        for (ring_idx, ring) in std::iter::once(&self.exterior)
            .chain(self.interiors.iter())
            .enumerate()
        {
            if ring.len() < 4 {
                return Err(AtlasError::InvalidGeometry {
                    region: self.id.clone(),
                    ring: ring_idx,
                    vertex: ring.len().saturating_sub(1),
                    reason: format!("ring has {} vertices, need at least 4", ring.len()),
                });
            }
            for (vertex_idx, v) in ring.iter().enumerate() {
                if !v[0].is_finite() || !v[1].is_finite() {
                    return Err(AtlasError::InvalidGeometry {
                        region: self.id.clone(),
                        ring: ring_idx,
                        vertex: vertex_idx,
                        reason: "non-finite coordinate".into(),
                    });
                }
            }
            if ring[0] != ring[ring.len() - 1] {
                return Err(AtlasError::InvalidGeometry {
                    region: self.id.clone(),
                    ring: ring_idx,
                    vertex: ring.len() - 1,
                    reason: "ring is not closed (first vertex != last vertex)".into(),
                });
            }
        }
        Ok(())
    }

    pub fn bounding_box(&self) -> BoundingBox {
        BoundingBox::of_ring(&self.exterior)
    }

    /// Even–odd containment with the on-edge-is-inside tie-break. A point on
    /// any ring boundary (including hole boundaries) counts as inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        if on_ring_edge(&self.exterior, x, y) {
            return true;
        }
        for ring in &self.interiors {
            if on_ring_edge(ring, x, y) {
                return true;
            }
        }
        if !ray_cast_inside(&self.exterior, x, y) {
            return false;
        }
        !self.interiors.iter().any(|ring| ray_cast_inside(ring, x, y))
    }
}

/// A named collection of polygons for one vintage year.
#[derive(Debug, Clone)]
pub struct RegionSet {
    pub name: String,
    pub vintage: i32,
    pub polygons: Vec<RegionPolygon>,
}

impl RegionSet {
    pub fn new(name: impl Into<String>, vintage: i32, polygons: Vec<RegionPolygon>) -> Result<Self> {
        let set = RegionSet {
            name: name.into(),
            vintage,
            polygons,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for poly in &self.polygons {
            poly.validate()?;
            if !seen.insert(poly.id.as_str()) {
                return Err(AtlasError::InvalidInput(format!(
                    "region set '{}' has duplicate polygon id '{}'",
                    self.name, poly.id
                )));
            }
        }
        Ok(())
    }

    pub fn region_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.polygons.iter().map(|p| p.id.clone()).collect();
        ids.sort();
        ids
    }

    /// Probabilistic overlap diagnostic: samples interior points of pairwise
    /// bounding-box intersections and reports pairs that both claim a
    /// sample. Boundary-only contact (a degenerate intersection box) is
    /// skipped, so adjoining tiles stay quiet. Real region layers
    /// occasionally overlap at slivers, so this emits warnings rather than
    /// failing the load.
    pub fn overlap_diagnostic(&self, samples_per_pair: usize, seed: u64) -> Vec<String> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let boxes: Vec<BoundingBox> = self.polygons.iter().map(|p| p.bounding_box()).collect();
        let mut warnings = Vec::new();
        for i in 0..self.polygons.len() {
            for j in (i + 1)..self.polygons.len() {
                let Some(overlap) = boxes[i].intersection(&boxes[j]) else {
                    continue;
                };
                if overlap.min_x >= overlap.max_x || overlap.min_y >= overlap.max_y {
                    continue;
                }
                for _ in 0..samples_per_pair {
                    let x = rng.gen_range(overlap.min_x..overlap.max_x);
                    let y = rng.gen_range(overlap.min_y..overlap.max_y);
                    if self.polygons[i].contains(x, y) && self.polygons[j].contains(x, y) {
                        warnings.push(format!(
                            "regions '{}' and '{}' both contain sampled point ({x}, {y})",
                            self.polygons[i].id, self.polygons[j].id
                        ));
                        break;
                    }
                }
            }
        }
        warnings
    }

    /// Probabilistic self-intersection diagnostic: per ring, tests sampled
    /// pairs of non-adjacent segments for proper crossings. A diagnostic
    /// pass, not a hard gate, to tolerate real-world shapefiles.
    pub fn self_intersection_diagnostic(&self, samples_per_ring: usize, seed: u64) -> Vec<String> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut warnings = Vec::new();
        for poly in &self.polygons {
            for (ring_idx, ring) in std::iter::once(&poly.exterior)
                .chain(poly.interiors.iter())
                .enumerate()
            {
                let n_edges = ring.len() - 1;
                if n_edges < 4 {
                    continue;
                }
                // Exhaust small rings; sample large ones.
                let all_pairs = n_edges * (n_edges - 1) / 2;
                let budget = samples_per_ring.min(all_pairs);
                let mut found = false;
                for _ in 0..budget {
                    let a = rng.gen_range(0..n_edges);
                    let b = rng.gen_range(0..n_edges);
                    let lo = a.min(b);
                    let hi = a.max(b);
                    // Adjacent edges (including the wrap-around pair) share
                    // a vertex and never cross properly.
                    if hi - lo <= 1 || (lo == 0 && hi == n_edges - 1) {
                        continue;
                    }
                    if segments_cross(
                        ring[lo], ring[lo + 1], ring[hi], ring[hi + 1],
                    ) {
                        warnings.push(format!(
                            "region '{}': ring {ring_idx} segments {lo} and {hi} cross",
                            poly.id
                        ));
                        found = true;
                        break;
                    }
                }
                if found {
                    continue;
                }
            }
        }
        warnings
    }
}

/// Proper crossing test (shared endpoints and collinear touches excluded).
fn segments_cross(a0: [f64; 2], a1: [f64; 2], b0: [f64; 2], b1: [f64; 2]) -> bool {
    let orient = |p: [f64; 2], q: [f64; 2], r: [f64; 2]| {
        (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
    };
    let d1 = orient(b0, b1, a0);
    let d2 = orient(b0, b1, a1);
    let d3 = orient(a0, a1, b0);
    let d4 = orient(a0, a1, b1);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

/// Point id -> containing region id, absent when the point lies in no polygon.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignment {
    map: BTreeMap<String, Option<String>>,
}

impl Assignment {
    pub fn get(&self, point_id: &str) -> Option<&str> {
        self.map.get(point_id).and_then(|r| r.as_deref())
    }

    pub fn contains_point(&self, point_id: &str) -> bool {
        self.map.contains_key(point_id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Iterate in point-id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Option<&str>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_deref()))
    }

    pub fn assigned_count(&self) -> usize {
        self.map.values().filter(|v| v.is_some()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BoundingBox {
    fn of_ring(ring: &Ring) -> BoundingBox {
        let mut bb = BoundingBox {
            min_x: f64::INFINITY,
            min_y: f64::INFINITY,
            max_x: f64::NEG_INFINITY,
            max_y: f64::NEG_INFINITY,
        };
        for v in ring {
            bb.min_x = bb.min_x.min(v[0]);
            bb.min_y = bb.min_y.min(v[1]);
            bb.max_x = bb.max_x.max(v[0]);
            bb.max_y = bb.max_y.max(v[1]);
        }
        bb
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x <= self.max_x && y >= self.min_y && y <= self.max_y
    }

    fn intersection(&self, other: &BoundingBox) -> Option<BoundingBox> {
        let min_x = self.min_x.max(other.min_x);
        let min_y = self.min_y.max(other.min_y);
        let max_x = self.max_x.min(other.max_x);
        let max_y = self.max_y.min(other.max_y);
        if min_x <= max_x && min_y <= max_y {
            Some(BoundingBox {
                min_x,
                min_y,
                max_x,
                max_y,
            })
        } else {
            None
        }
    }
}

/// Even–odd ray cast against a single ring (edge hits excluded; those are
/// handled by `on_ring_edge` first).
fn ray_cast_inside(ring: &Ring, x: f64, y: f64) -> bool {
    let mut inside = false;
    for w in ring.windows(2) {
        let (ax, ay) = (w[0][0], w[0][1]);
        let (bx, by) = (w[1][0], w[1][1]);
        // Half-open vertical range keeps vertices from being counted twice.
        if (ay > y) != (by > y) {
            let x_cross = ax + (y - ay) * (bx - ax) / (by - ay);
            if x < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

/// True when (x, y) lies exactly on one of the ring's segments.
fn on_ring_edge(ring: &Ring, x: f64, y: f64) -> bool {
    for w in ring.windows(2) {
        let (ax, ay) = (w[0][0], w[0][1]);
        let (bx, by) = (w[1][0], w[1][1]);
        let cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
        if cross != 0.0 {
            continue;
        }
        if x < ax.min(bx) || x > ax.max(bx) || y < ay.min(by) || y > ay.max(by) {
            continue;
        }
        return true;
    }
    false
}

/// Containment test against a full polygon; exposed as a free function to
/// match the rest of the per-operation API.
pub fn point_in_polygon(p: (f64, f64), poly: &RegionPolygon) -> Result<bool> {
    poly.validate()?;
    Ok(poly.contains(p.0, p.1))
}

/// Uniform grid over polygon bounding boxes. Candidate lookup returns a
/// superset of the true containers; the index is read-only once built.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    bounds: Option<BoundingBox>,
    nx: usize,
    ny: usize,
    cell_w: f64,
    cell_h: f64,
    /// Per cell: indices into `boxes`/the polygon list, sorted ascending.
    cells: Vec<Vec<u32>>,
    boxes: Vec<BoundingBox>,
}

impl SpatialIndex {
    /// Empty region set yields an explicit empty index whose queries return
    /// no candidates.
    pub fn build(regions: &RegionSet) -> Result<SpatialIndex> {
        regions.validate()?;
        let boxes: Vec<BoundingBox> = regions.polygons.iter().map(|p| p.bounding_box()).collect();
        if boxes.is_empty() {
            return Ok(SpatialIndex {
                bounds: None,
                nx: 0,
                ny: 0,
                cell_w: 0.0,
                cell_h: 0.0,
                cells: Vec::new(),
                boxes,
            });
        }
        let mut total = boxes[0];
        for bb in &boxes[1..] {
            total.min_x = total.min_x.min(bb.min_x);
            total.min_y = total.min_y.min(bb.min_y);
            total.max_x = total.max_x.max(bb.max_x);
            total.max_y = total.max_y.max(bb.max_y);
        }
        // Aim for O(1) polygons per cell on evenly spread layers.
        let n = boxes.len();
        let per_axis = ((n as f64).sqrt().ceil() as usize).max(1);
        let (nx, ny) = (per_axis, per_axis);
        let cell_w = ((total.max_x - total.min_x) / nx as f64).max(f64::MIN_POSITIVE);
        let cell_h = ((total.max_y - total.min_y) / ny as f64).max(f64::MIN_POSITIVE);
        let mut cells = vec![Vec::new(); nx * ny];
        for (poly_idx, bb) in boxes.iter().enumerate() {
            let ix0 = cell_coord(bb.min_x, total.min_x, cell_w, nx);
            let ix1 = cell_coord(bb.max_x, total.min_x, cell_w, nx);
            let iy0 = cell_coord(bb.min_y, total.min_y, cell_h, ny);
            let iy1 = cell_coord(bb.max_y, total.min_y, cell_h, ny);
            for iy in iy0..=iy1 {
                for ix in ix0..=ix1 {
                    cells[iy * nx + ix].push(poly_idx as u32);
                }
            }
        }
        Ok(SpatialIndex {
            bounds: Some(total),
            nx,
            ny,
            cell_w,
            cell_h,
            cells,
            boxes,
        })
    }

    /// Indices of polygons whose bounding box contains the point. Sorted
    /// ascending, so iteration order is deterministic.
    pub fn candidates(&self, x: f64, y: f64) -> Vec<usize> {
        let Some(bounds) = self.bounds else {
            return Vec::new();
        };
        if !bounds.contains(x, y) {
            return Vec::new();
        }
        let ix = cell_coord(x, bounds.min_x, self.cell_w, self.nx);
        let iy = cell_coord(y, bounds.min_y, self.cell_h, self.ny);
        self.cells[iy * self.nx + ix]
            .iter()
            .filter(|&&i| self.boxes[i as usize].contains(x, y))
            .map(|&i| i as usize)
            .collect()
    }
}

fn cell_coord(v: f64, min: f64, cell: f64, n: usize) -> usize {
    (((v - min) / cell).floor() as isize).clamp(0, n as isize - 1) as usize
}

/// Result of assigning a point set to a region set: the assignment itself
/// plus warnings for points claimed by more than one polygon.
#[derive(Debug, Clone)]
pub struct AssignmentResult {
    pub assignment: Assignment,
    pub overlap_warnings: Vec<String>,
}

/// Map each point to the unique containing region, or to none. When
/// overlapping polygons both claim a point (a data defect), the
/// lexicographically smallest region id wins and a warning is recorded.
///
/// Parallel over points; output is independent of the worker schedule.
pub fn assign_points(points: &[WeightedPoint], regions: &RegionSet) -> Result<AssignmentResult> {
    let index = SpatialIndex::build(regions)?;
    assign_points_indexed(points, regions, &index)
}

/// Same as [`assign_points`] but reusing a prebuilt index.
pub fn assign_points_indexed(
    points: &[WeightedPoint],
    regions: &RegionSet,
    index: &SpatialIndex,
) -> Result<AssignmentResult> {
    let mut seen = BTreeSet::new();
    for p in points {
        p.validate()?;
        if !seen.insert(p.id.as_str()) {
            return Err(AtlasError::InvalidInput(format!(
                "duplicate point id '{}'",
                p.id
            )));
        }
    }

    let per_point: Vec<(String, Option<String>, Option<String>)> = points
        .par_iter()
        .map(|p| {
            let mut containers: Vec<&str> = index
                .candidates(p.x, p.y)
                .into_iter()
                .filter(|&i| regions.polygons[i].contains(p.x, p.y))
                .map(|i| regions.polygons[i].id.as_str())
                .collect();
            containers.sort();
            let warning = if containers.len() > 1 {
                Some(format!(
                    "point '{}' contained by {:?}; assigned to '{}'",
                    p.id, containers, containers[0]
                ))
            } else {
                None
            };
            (
                p.id.clone(),
                containers.first().map(|s| s.to_string()),
                warning,
            )
        })
        .collect();

    let mut map = BTreeMap::new();
    let mut overlap_warnings = Vec::new();
    for (id, region, warning) in per_point {
        map.insert(id, region);
        if let Some(w) = warning {
            overlap_warnings.push(w);
        }
    }
    overlap_warnings.sort();
    Ok(AssignmentResult {
        assignment: Assignment { map },
        overlap_warnings,
    })
}
