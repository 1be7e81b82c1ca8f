//! Normalized mean error, cumulative error distributions and rank correlation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, Shape};

/// Landmarks whose centroids are the two pupils.
///
/// Markups without explicit pupil points (such as ibug-68) locate each pupil
/// as the centroid of its eye contour.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PupilIndices {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
}

impl PupilIndices {
    pub fn ibug68() -> Self {
        PupilIndices { left: (36..42).collect(), right: (42..48).collect() }
    }

    pub fn pair(left: usize, right: usize) -> Self {
        PupilIndices { left: vec![left], right: vec![right] }
    }

    pub fn validate(&self, landmarks: usize) -> Result<()> {
        if self.left.is_empty() || self.right.is_empty() {
            return Err(Error::config("pupil index lists must be nonempty"));
        }
        if let Some(&i) = self.left.iter().chain(&self.right).find(|&&i| i >= landmarks) {
            return Err(Error::config(format!("pupil index {i} out of range for {landmarks} landmarks")));
        }
        Ok(())
    }

    pub fn centers(&self, shape: &Shape) -> (Point2, Point2) {
        let c = |idx: &[usize]| idx.iter().fold(Point2::ZERO, |a, &i| a + shape.point(i)) * (1.0 / idx.len() as f64);
        (c(&self.left), c(&self.right))
    }

    pub fn distance(&self, shape: &Shape) -> Result<f64> {
        let (l, r) = self.centers(shape);
        let d = l.distance(&r);
        if d > 0.0 {
            Ok(d)
        } else {
            Err(Error::ZeroPupilDistance)
        }
    }
}

/// Mean landmark error in percent of the ground-truth inter-pupil distance.
pub fn nme(pred: &Shape, gt: &Shape, pupils: &PupilIndices) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::LandmarkMismatch { expected: gt.len(), found: pred.len() });
    }
    pupils.validate(gt.len())?;
    let d = pupils.distance(gt)?;
    Ok(100.0 * pred.mean_distance(gt) / d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmeResult {
    pub tag: String,
    pub errors: Vec<f64>,
    pub mean: f64,
}

impl NmeResult {
    pub fn new(tag: impl Into<String>, errors: Vec<f64>) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::EmptyInput("no errors to average"));
        }
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        Ok(NmeResult { tag: tag.into(), errors, mean })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CedCurve {
    pub points: Vec<(f64, f64)>,
}

/// Default grid: 0 to 15 percent in steps of 0.1.
pub fn default_thresholds() -> Vec<f64> {
    (0..=150).map(|i| i as f64 / 10.0).collect()
}

/// `fraction(x) = |{e ≤ x}| / N` at every threshold.
pub fn ced_curve(errors: &[f64], thresholds: &[f64]) -> Result<CedCurve> {
    if errors.is_empty() {
        return Err(Error::EmptyInput("CED needs at least one error"));
    }
    if thresholds.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::config("CED thresholds must be strictly increasing"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let points = thresholds.iter().map(|&t| (t, sorted.partition_point(|&e| e <= t) as f64 / n)).collect();
    Ok(CedCurve { points })
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), found: y.len() });
    }
    if x.len() < 2 {
        return Err(Error::EmptyInput("correlation needs at least two pairs"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ConstantInput);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), found: y.len() });
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// `(sample id, score, error)`, sorted by error ascending.
    pub pairs: Vec<(String, f64, f64)>,
    pub spearman: f64,
    pub pearson: Option<f64>,
    pub count: usize,
}

/// Rank correlation between discrepancy scores and true label errors.
///
/// Infinite scores take part through their ranks; Pearson is reported only
/// when every score is finite.
pub fn discrepancy_error_correlation(records: &[(String, f64, f64)]) -> Result<CorrelationReport> {
    if records.len() < 3 {
        return Err(Error::EmptyInput("correlation needs at least three pairs"));
    }
    if records.iter().any(|(_, s, e)| s.is_nan() || !e.is_finite()) {
        return Err(Error::config("scores must not be NaN and errors must be finite"));
    }
    let scores: Vec<f64> = records.iter().map(|r| r.1).collect();
    let errors: Vec<f64> = records.iter().map(|r| r.2).collect();
    let rho = spearman(&scores, &errors)?;
    let pearson = if scores.iter().all(|s| s.is_finite()) { pearson(&scores, &errors).ok() } else { None };
    let mut pairs = records.to_vec();
    pairs.sort_by(|a, b| a.2.total_cmp(&b.2).then_with(|| a.0.cmp(&b.0)));
    Ok(CorrelationReport { count: pairs.len(), pairs, spearman: rho, pearson })
}

pub fn write_nme_csv(path: &Path, ids: &[String], errors: &[f64]) -> Result<()> {
    let mut s = String::from("sample_id,nme\n");
    for (id, e) in ids.iter().zip(errors) {
        let _ = writeln!(s, "{id},{e:?}");
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn write_ced_csv(path: &Path, curve: &CedCurve) -> Result<()> {
    let mut s = String::from("threshold,fraction\n");
    for (t, f) in &curve.points {
        let _ = writeln!(s, "{t:?},{f:?}");
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn write_correlation_csv(path: &Path, report: &CorrelationReport) -> Result<()> {
    let mut s = String::from("sample_id,score,error\n");
    for (id, score, err) in &report.pairs {
        let score = if score.is_infinite() { "inf".to_string() } else { format!("{score:?}") };
        let _ = writeln!(s, "{id},{score},{err:?}");
    }
    fs::write(path, s)?;
    Ok(())
}
