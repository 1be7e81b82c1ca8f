//! Global-geometry validation with plane projective invariants.
//!
//! For five points the invariant is `|m124||m135| / (|m125||m134|)` and for six
//! points `|m123||m456| / (|m124||m356|)`, where `m_abc` is the determinant of
//! the homogeneous coordinates of points `a, b, c`. Landmark combinations whose
//! invariant is nearly constant across labelled faces are kept with an
//! intrinsic range; a shape scores the fraction of combinations in range.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, Shape};

/// Determinants of normalized points below this magnitude count as collinear.
pub const COLLINEARITY_THRESHOLD: f64 = 1e-9;
pub const MIN_DISCOVERY_SHAPES: usize = 10;
pub const DEFAULT_REL_STD: f64 = 0.05;
pub const DEFAULT_MAX_COMBINATIONS: usize = 256;

/// Stable landmarks of the 68-point ibug markup: eye corners, nose, mouth corners, chin, inner brows.
pub const IBUG68_STABLE_SUBSET: [usize; 14] = [36, 39, 42, 45, 27, 30, 31, 33, 35, 48, 54, 8, 21, 22];

fn det3(a: Point2, b: Point2, c: Point2) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

pub fn projective_invariant(points: &[Point2]) -> Result<f64> {
    let k = points.len();
    if k != 5 && k != 6 {
        return Err(Error::DimensionMismatch { expected: 5, found: k });
    }
    // center and scale to unit RMS so the collinearity threshold is scale free
    let n = k as f64;
    let c = points.iter().fold(Point2::ZERO, |a, p| a + *p) * (1.0 / n);
    let rms = (points.iter().map(|p| (*p - c).norm_sq()).sum::<f64>() / n).sqrt();
    if !(rms > 0.0) || !rms.is_finite() {
        return Err(Error::DegenerateConfiguration);
    }
    let p: Vec<Point2> = points.iter().map(|q| (*q - c) * (1.0 / rms)).collect();
    let m = |a: usize, b: usize, c: usize| -> Result<f64> {
        let d = det3(p[a - 1], p[b - 1], p[c - 1]).abs();
        if d < COLLINEARITY_THRESHOLD {
            Err(Error::DegenerateConfiguration)
        } else {
            Ok(d)
        }
    };
    if k == 5 {
        Ok((m(1, 2, 4)? * m(1, 3, 5)?) / (m(1, 2, 5)? * m(1, 3, 4)?))
    } else {
        Ok((m(1, 2, 3)? * m(4, 5, 6)?) / (m(1, 2, 4)? * m(3, 5, 6)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicRange {
    pub c_min: f64,
    pub c_max: f64,
    pub mean: f64,
    pub std: f64,
}

impl IntrinsicRange {
    pub fn contains(&self, v: f64) -> bool {
        self.c_min <= v && v <= self.c_max
    }

    pub fn rel_std(&self) -> f64 {
        self.std / self.mean.abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StableCombination {
    pub indices: Vec<usize>,
    pub range: IntrinsicRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryModel {
    pub landmark_count: usize,
    pub stable_subset: Vec<usize>,
    pub combinations: Vec<StableCombination>,
}

impl GeometryModel {
    /// Tab-separated table: indices, mean, std, c_min, c_max.
    pub fn to_table(&self) -> String {
        let mut s = String::from("indices\tmean\tstd\tc_min\tc_max\n");
        for c in &self.combinations {
            let idx: Vec<String> = c.indices.iter().map(|i| i.to_string()).collect();
            let r = &c.range;
            let _ = writeln!(s, "{}\t{:?}\t{:?}\t{:?}\t{:?}", idx.join("-"), r.mean, r.std, r.c_min, r.c_max);
        }
        s
    }
}

fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    let n = items.len();
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.iter().map(|&i| items[i]).collect());
        let Some(pos) = (0..k).rev().find(|&i| idx[i] != i + n - k) else { break };
        idx[pos] += 1;
        for j in pos + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
    out
}

fn invariant_of(shape: &Shape, indices: &[usize]) -> Result<f64> {
    let pts: Vec<Point2> = indices.iter().map(|&i| shape.point(i)).collect();
    projective_invariant(&pts)
}

/// Range rule: `mean ± 3 std`, clipped to the observed extremes when those are tighter.
fn range_of(values: &[f64]) -> IntrinsicRange {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    IntrinsicRange {
        c_min: (mean - 3.0 * std).max(lo),
        c_max: (mean + 3.0 * std).min(hi),
        mean: mean.clamp(lo, hi),
        std,
    }
}

/// Enumerates every 5- and 6-subset of `subset` (sorted ascending, lexicographic
/// order), keeps those with relative std at most `rel_std_threshold` and no
/// degenerate evaluation, then keeps the `max_combinations` most stable.
pub fn discover_combinations(
    shapes: &[Shape],
    subset: &[usize],
    rel_std_threshold: f64,
    max_combinations: usize,
) -> Result<GeometryModel> {
    if shapes.len() < MIN_DISCOVERY_SHAPES {
        return Err(Error::InsufficientShapes { required: MIN_DISCOVERY_SHAPES, found: shapes.len() });
    }
    let l = shapes[0].len();
    if let Some(s) = shapes.iter().find(|s| s.len() != l) {
        return Err(Error::LandmarkMismatch { expected: l, found: s.len() });
    }
    let mut subset = subset.to_vec();
    subset.sort_unstable();
    subset.dedup();
    if subset.len() < 5 {
        return Err(Error::config("the stable subset needs at least 5 distinct landmarks"));
    }
    if let Some(&i) = subset.iter().find(|&&i| i >= l) {
        return Err(Error::config(format!("subset index {i} out of range for {l} landmarks")));
    }
    if max_combinations == 0 {
        return Err(Error::config("max_combinations must be >= 1"));
    }
    let mut candidates = combinations(&subset, 5);
    candidates.extend(combinations(&subset, 6));
    let mut kept: Vec<StableCombination> = candidates
        .into_par_iter()
        .filter_map(|indices| {
            let values: Vec<f64> = shapes.iter().map(|s| invariant_of(s, &indices)).collect::<Result<_>>().ok()?;
            let range = range_of(&values);
            (range.rel_std() <= rel_std_threshold).then_some(StableCombination { indices, range })
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::NoStableCombination);
    }
    kept.sort_by(|a, b| a.range.rel_std().total_cmp(&b.range.rel_std()).then_with(|| a.indices.cmp(&b.indices)));
    kept.truncate(max_combinations);
    Ok(GeometryModel { landmark_count: l, stable_subset: subset, combinations: kept })
}

/// Fraction of combinations whose invariant lies in its intrinsic range; degenerate evaluations count as out of range.
pub fn geometry_score(shape: &Shape, model: &GeometryModel) -> Result<f64> {
    if shape.len() != model.landmark_count {
        return Err(Error::LandmarkMismatch { expected: model.landmark_count, found: shape.len() });
    }
    let hits = model
        .combinations
        .iter()
        .filter(|c| invariant_of(shape, &c.indices).is_ok_and(|v| c.range.contains(v)))
        .count();
    Ok(hits as f64 / model.combinations.len() as f64)
}
