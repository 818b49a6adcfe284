//! Area and route flood-probability queries over per-patch forecast
//! ensembles.
//!
//! Coordinates are raster cell units: `x` is the column axis and `y` the row
//! axis, so cell `(row, col)` covers `[col, col+1] × [row, row+1]`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::PatchInfo;
use crate::ensemble::ForecastEnsemble;
use crate::error::{Error, Result};

/// Overlap areas at or below this are treated as edge contact.
const AREA_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Area,
    Route,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryPolygon {
    pub vertices: Vec<(f64, f64)>,
    pub kind: QueryKind,
}

impl QueryPolygon {
    pub fn new(vertices: Vec<(f64, f64)>, kind: QueryKind) -> Result<Self> {
        let p = Self { vertices, kind };
        p.validate()?;
        Ok(p)
    }

    /// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64, kind: QueryKind) -> Result<Self> {
        Self::new(vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)], kind)
    }

    pub fn validate(&self) -> Result<()> {
        let v = &self.vertices;
        if v.len() < 3 {
            return Err(Error::InvalidPolygon(format!("{} vertices, need at least 3", v.len())));
        }
        if v.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::InvalidPolygon("non-finite vertex".into()));
        }
        if signed_area(v).abs() <= AREA_EPS {
            return Err(Error::InvalidPolygon("polygon has zero area".into()));
        }
        let n = v.len();
        for i in 0..n {
            for j in i + 1..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    continue;
                }
                if segments_intersect(v[i], v[(i + 1) % n], v[j], v[(j + 1) % n]) {
                    return Err(Error::InvalidPolygon(format!(
                        "edges {i} and {j} intersect; polygon must be simple"
                    )));
                }
            }
        }
        Ok(())
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        self.vertices.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)),
        )
    }

    /// One `x y` pair per line; blank lines and `#` comments ignored.
    pub fn parse(text: &str, kind: QueryKind) -> Result<Self> {
        let mut vertices = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let nums: Vec<f64> = line
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::InvalidPolygon(format!("line {}: expected `x y`", i + 1)))?;
            match nums.as_slice() {
                [x, y] => vertices.push((*x, *y)),
                _ => return Err(Error::InvalidPolygon(format!("line {}: expected `x y`", i + 1))),
            }
        }
        Self::new(vertices, kind)
    }

    pub fn to_text(&self) -> String {
        self.vertices.iter().map(|(x, y)| format!("{x} {y}\n")).collect()
    }
}

fn signed_area(v: &[(f64, f64)]) -> f64 {
    let n = v.len();
    (0..n)
        .map(|i| {
            let (a, b) = (v[i], v[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
        / 2.0
}

fn orient(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

fn on_segment(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> bool {
    p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
}

fn segments_intersect(p1: (f64, f64), p2: (f64, f64), q1: (f64, f64), q2: (f64, f64)) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// Clip `poly` to the half-plane selected by `inside`, cutting edges with `cut`.
fn clip_half(
    poly: &[(f64, f64)],
    inside: impl Fn((f64, f64)) -> bool,
    cut: impl Fn((f64, f64), (f64, f64)) -> (f64, f64),
) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(poly.len() + 4);
    let n = poly.len();
    for i in 0..n {
        let cur = poly[i];
        let prev = poly[(i + n - 1) % n];
        match (inside(prev), inside(cur)) {
            (true, true) => out.push(cur),
            (true, false) => out.push(cut(prev, cur)),
            (false, true) => {
                out.push(cut(prev, cur));
                out.push(cur);
            }
            (false, false) => {}
        }
    }
    out
}

/// Area of `poly ∩ [x0, x1] × [y0, y1]` by Sutherland–Hodgman clipping.
/// Exact for any simple polygon because the clip window is convex.
pub fn overlap_area(poly: &[(f64, f64)], x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    let at_x = |x: f64| move |a: (f64, f64), b: (f64, f64)| (x, a.1 + (b.1 - a.1) * (x - a.0) / (b.0 - a.0));
    let at_y = |y: f64| move |a: (f64, f64), b: (f64, f64)| (a.0 + (b.0 - a.0) * (y - a.1) / (b.1 - a.1), y);
    let mut p = clip_half(poly, |q| q.0 >= x0, at_x(x0));
    p = clip_half(&p, |q| q.0 <= x1, at_x(x1));
    p = clip_half(&p, |q| q.1 >= y0, at_y(y0));
    p = clip_half(&p, |q| q.1 <= y1, at_y(y1));
    if p.len() < 3 {
        0.0
    } else {
        signed_area(&p).abs()
    }
}

/// Cells (local `(row, col)`) of each patch whose square overlaps the polygon
/// with positive area. Patches without overlapping cells are omitted.
pub fn cells_overlapping(
    polygon: &QueryPolygon,
    layout: &[PatchInfo],
) -> Result<BTreeMap<String, Vec<(usize, usize)>>> {
    polygon.validate()?;
    let (bx0, by0, bx1, by1) = polygon.bounds();
    let mut out = BTreeMap::new();
    for patch in layout {
        let (r0, c0) = (patch.origin_row as f64, patch.origin_col as f64);
        let d = patch.dim as f64;
        let rows = cell_range(by0 - r0, by1 - r0, d);
        let cols = cell_range(bx0 - c0, bx1 - c0, d);
        let mut cells = Vec::new();
        for r in rows.clone() {
            for c in cols.clone() {
                let (x0, y0) = (c0 + c as f64, r0 + r as f64);
                if overlap_area(&polygon.vertices, x0, y0, x0 + 1.0, y0 + 1.0) > AREA_EPS {
                    cells.push((r, c));
                }
            }
        }
        if !cells.is_empty() {
            out.insert(patch.patch_id.clone(), cells);
        }
    }
    Ok(out)
}

fn cell_range(lo: f64, hi: f64, dim: f64) -> std::ops::Range<usize> {
    let start = lo.floor().clamp(0.0, dim) as usize;
    let end = hi.ceil().clamp(0.0, dim) as usize;
    start..end.max(start)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchProbability {
    pub patch_id: String,
    /// Fraction of members keeping every queried cell ≤ d over the horizon.
    pub probability_at_most: f64,
    pub members_at_most: usize,
    pub members: usize,
    pub cells_considered: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub kind: QueryKind,
    /// Probability that at least one queried cell exceeds `threshold` within
    /// the horizon.
    pub probability_above: f64,
    /// `1 − probability_above`; the "route stays passable" answer.
    pub probability_not_flooded: f64,
    pub per_patch: Vec<PatchProbability>,
    pub threshold: f64,
    pub horizon: usize,
}

/// Members of `ens` whose listed cells all stay ≤ `d` for the first `horizon` steps.
fn members_at_most(ens: &ForecastEnsemble, cells: &[(usize, usize)], d: f64, horizon: usize) -> usize {
    let dim = ens.dim();
    ens.members
        .iter()
        .filter(|traj| {
            traj[..horizon]
                .iter()
                .all(|f| cells.iter().all(|&(r, c)| f.cells()[r * dim + c] <= d))
        })
        .count()
}

/// Probability that flooding anywhere in the polygon exceeds `d` within
/// `horizon` hours, treating patches as independent.
pub fn area_flood_probability(
    polygon: &QueryPolygon,
    d: f64,
    horizon: usize,
    layout: &[PatchInfo],
    ensembles: &BTreeMap<String, ForecastEnsemble>,
) -> Result<QueryResult> {
    if !d.is_finite() {
        return Err(Error::InvalidParameter("threshold must be finite".into()));
    }
    if horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be at least 1".into()));
    }
    let cells = cells_overlapping(polygon, layout)?;
    let mut per_patch = Vec::with_capacity(cells.len());
    let mut p_all_below = 1.0;
    for (patch_id, patch_cells) in &cells {
        let ens = ensembles
            .get(patch_id)
            .ok_or_else(|| Error::MissingEnsemble(patch_id.clone()))?;
        ens.validate()?;
        if ens.horizon() < horizon {
            return Err(Error::InvalidParameter(format!(
                "ensemble for {patch_id} covers {} steps, query needs {horizon}",
                ens.horizon()
            )));
        }
        let ok = members_at_most(ens, patch_cells, d, horizon);
        let p = ok as f64 / ens.member_count() as f64;
        p_all_below *= p;
        per_patch.push(PatchProbability {
            patch_id: patch_id.clone(),
            probability_at_most: p,
            members_at_most: ok,
            members: ens.member_count(),
            cells_considered: patch_cells.len(),
        });
    }
    Ok(QueryResult {
        kind: polygon.kind,
        probability_above: 1.0 - p_all_below,
        probability_not_flooded: p_all_below,
        per_patch,
        threshold: d,
        horizon,
    })
}

/// Probability that a route stays dry (all cells ≤ 0) is `probability_not_flooded`.
pub fn route_flood_probability(
    polygon: &QueryPolygon,
    horizon: usize,
    layout: &[PatchInfo],
    ensembles: &BTreeMap<String, ForecastEnsemble>,
) -> Result<QueryResult> {
    let mut r = area_flood_probability(polygon, 0.0, horizon, layout, ensembles)?;
    r.kind = QueryKind::Route;
    Ok(r)
}
