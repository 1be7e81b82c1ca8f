//! Shape containers, similarity alignment and the generalized Procrustes mean.
//!
//! Shapes are ordered landmark lists in pixel coordinates. The canonical frame
//! used by the feature extractors and the regressor is defined by aligning a
//! shape onto the unit-scale mean shape with [`procrustes_align`].

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum landmark count for datasets: the geometry validator needs 5-point subsets.
pub const MIN_LANDMARKS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ZERO: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(&self) -> f64 {
        self.x * self.x + self.y * self.y
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (*self - *other).norm()
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

/// An ordered list of 2-D landmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    points: Vec<Point2>,
}

impl Shape {
    /// Builds a shape, rejecting empty input and non-finite coordinates.
    pub fn new(points: Vec<Point2>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("shape has no landmarks"));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::config("shape contains a non-finite coordinate"));
        }
        Ok(Shape { points })
    }

    pub(crate) fn from_points_unchecked(points: Vec<Point2>) -> Self {
        debug_assert!(!points.is_empty());
        Shape { points }
    }

    pub fn from_xy(coords: &[(f64, f64)]) -> Result<Self> {
        Shape::new(coords.iter().map(|&(x, y)| Point2::new(x, y)).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn point(&self, index: usize) -> Point2 {
        self.points[index]
    }

    pub fn centroid(&self) -> Point2 {
        let n = self.points.len() as f64;
        let (sx, sy) = self.points.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        Point2::new(sx / n, sy / n)
    }

    /// Root-mean-square distance of the landmarks from their centroid.
    pub fn rms_radius(&self) -> f64 {
        let c = self.centroid();
        let ss: f64 = self.points.iter().map(|p| (*p - c).norm_sq()).sum();
        (ss / self.points.len() as f64).sqrt()
    }

    pub fn translated(&self, offset: Point2) -> Shape {
        Shape { points: self.points.iter().map(|p| *p + offset).collect() }
    }

    /// Centered at the origin with unit RMS radius.
    pub fn normalized(&self) -> Result<Shape> {
        let c = self.centroid();
        let r = self.rms_radius();
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::DegenerateShape);
        }
        Ok(Shape { points: self.points.iter().map(|p| (*p - c) * (1.0 / r)).collect() })
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> (Point2, Point2) {
        let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.points {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        (lo, hi)
    }

    /// Mean Euclidean distance between corresponding landmarks.
    pub fn mean_distance(&self, other: &Shape) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        let total: f64 = self.points.iter().zip(&other.points).map(|(a, b)| a.distance(b)).sum();
        total / self.len() as f64
    }
}

/// `p -> scale * R(rotation) * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: f64,
    pub translation: Point2,
}

impl SimilarityTransform {
    pub const IDENTITY: SimilarityTransform =
        SimilarityTransform { scale: 1.0, rotation: 0.0, translation: Point2::ZERO };

    pub fn new(scale: f64, rotation: f64, translation: Point2) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() || !rotation.is_finite() || !translation.is_finite() {
            return Err(Error::config("similarity transform needs a finite positive scale"));
        }
        Ok(SimilarityTransform { scale, rotation, translation })
    }

    fn linear(&self) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        (self.scale * c, self.scale * s)
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        let (a, b) = self.linear();
        Point2::new(a * p.x - b * p.y + self.translation.x, b * p.x + a * p.y + self.translation.y)
    }

    pub fn inverse(&self) -> SimilarityTransform {
        let scale = 1.0 / self.scale;
        let rotation = -self.rotation;
        let partial = SimilarityTransform { scale, rotation, translation: Point2::ZERO };
        let t = partial.apply(self.translation);
        SimilarityTransform { scale, rotation, translation: Point2::new(-t.x, -t.y) }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &SimilarityTransform) -> SimilarityTransform {
        SimilarityTransform {
            scale: self.scale * other.scale,
            rotation: self.rotation + other.rotation,
            translation: self.apply(other.translation),
        }
    }
}

pub fn apply_transform(t: &SimilarityTransform, s: &Shape) -> Shape {
    Shape { points: s.points.iter().map(|p| t.apply(*p)).collect() }
}

/// Closed-form least-squares similarity from the centered coordinates of two shapes.
/// Returns `(a, b, norm)` where `a + ib = scale * e^{i rotation} * norm`.
fn similarity_terms(src: &[Point2], src_c: Point2, dst: &[Point2], dst_c: Point2) -> (f64, f64, f64) {
    let mut a = 0.0;
    let mut b = 0.0;
    let mut norm = 0.0;
    for (p, q) in src.iter().zip(dst) {
        let (x, y) = (p.x - src_c.x, p.y - src_c.y);
        let (u, v) = (q.x - dst_c.x, q.y - dst_c.y);
        a += x * u + y * v;
        b += x * v - y * u;
        norm += x * x + y * y;
    }
    (a, b, norm)
}

fn check_degenerate(norm: f64, pts: &[Point2]) -> Result<()> {
    let extent = pts.iter().fold(0.0f64, |m, p| m.max(p.x.abs()).max(p.y.abs()));
    let floor = (f64::EPSILON * extent).powi(2) * pts.len() as f64;
    if !(norm > floor) {
        return Err(Error::DegenerateShape);
    }
    Ok(())
}

/// Similarity `T` minimizing `Σ ||T(src_l) - ref_l||²`.
pub fn procrustes_align(src: &Shape, reference: &Shape) -> Result<SimilarityTransform> {
    if src.len() != reference.len() {
        return Err(Error::LandmarkMismatch { expected: reference.len(), found: src.len() });
    }
    let sc = src.centroid();
    let rc = reference.centroid();
    let (a, b, norm) = similarity_terms(&src.points, sc, &reference.points, rc);
    check_degenerate(norm, &src.points)?;
    let scale = a.hypot(b) / norm;
    if !(scale > 0.0) {
        // reference is a single point; any rotation fits equally well
        return Err(Error::DegenerateShape);
    }
    let rotation = b.atan2(a);
    let partial = SimilarityTransform { scale, rotation, translation: Point2::ZERO };
    let moved = partial.apply(sc);
    Ok(SimilarityTransform { scale, rotation, translation: rc - moved })
}

/// Generalized Procrustes mean, centered with unit RMS radius.
///
/// The orientation gauge is the plain average of the normalized inputs, so the
/// result does not depend on input order. Iteration stops early once the mean
/// moves less than 1e-8 (RMS over landmarks).
pub fn mean_shape(shapes: &[Shape], iterations: usize) -> Result<Shape> {
    let first = shapes.first().ok_or(Error::EmptyInput("mean_shape needs at least one shape"))?;
    let l = first.len();
    if let Some(bad) = shapes.iter().find(|s| s.len() != l) {
        return Err(Error::LandmarkMismatch { expected: l, found: bad.len() });
    }
    let normalized: Vec<Shape> = shapes.iter().map(Shape::normalized).collect::<Result<_>>()?;

    let gauge = average(&normalized).normalized().or_else(|_| Ok::<_, Error>(normalized[0].clone()))?;
    let mut mean = gauge.clone();
    for _ in 0..iterations {
        let aligned: Vec<Shape> = normalized
            .iter()
            .map(|s| procrustes_align(s, &mean).map(|t| apply_transform(&t, s)))
            .collect::<Result<_>>()?;
        let mut next = average(&aligned).normalized()?;
        let fix = procrustes_align(&next, &gauge)?;
        next = apply_transform(&fix, &next).normalized()?;
        let moved = rms_displacement(&next, &mean);
        mean = next;
        if moved < 1e-8 {
            break;
        }
    }
    Ok(mean)
}

fn average(shapes: &[Shape]) -> Shape {
    let l = shapes[0].len();
    let n = shapes.len() as f64;
    let mut acc = vec![Point2::ZERO; l];
    for s in shapes {
        for (a, p) in acc.iter_mut().zip(&s.points) {
            *a = *a + *p;
        }
    }
    Shape { points: acc.into_iter().map(|p| p * (1.0 / n)).collect() }
}

fn rms_displacement(a: &Shape, b: &Shape) -> f64 {
    let ss: f64 = a.points.iter().zip(&b.points).map(|(p, q)| (*p - *q).norm_sq()).sum();
    (ss / a.len() as f64).sqrt()
}

/// Rotation and scale relating a shape's local frame to the canonical (mean-shape) frame.
///
/// Derived from differences to the first landmark, so an exact translation of
/// the shape leaves the frame bit-identical.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    // canonical = [a -b; b a] * image_offset
    a: f64,
    b: f64,
}

impl Frame {
    pub const IDENTITY: Frame = Frame { a: 1.0, b: 0.0 };

    /// Frame in which one canonical unit spans `pixels_per_unit` image pixels,
    /// with canonical axes rotated by `rotation` in the image.
    pub fn from_scale_rotation(pixels_per_unit: f64, rotation: f64) -> Frame {
        let k = 1.0 / pixels_per_unit;
        // canonical = R(-rotation) * image / pixels_per_unit
        let (s, c) = rotation.sin_cos();
        Frame { a: k * c, b: -k * s }
    }

    /// Frame of `shape` relative to `reference` (usually the unit-scale mean shape).
    pub fn of(shape: &Shape, reference: &Shape) -> Result<Frame> {
        if shape.len() != reference.len() {
            return Err(Error::LandmarkMismatch { expected: reference.len(), found: shape.len() });
        }
        let origin = shape.points[0];
        let rel: Vec<Point2> = shape.points.iter().map(|p| *p - origin).collect();
        let n = rel.len() as f64;
        let (sx, sy) = rel.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        let rc = Point2::new(sx / n, sy / n);
        let (a, b, norm) = similarity_terms(&rel, rc, &reference.points, reference.centroid());
        check_degenerate(norm, &rel)?;
        let (a, b) = (a / norm, b / norm);
        if !(a.hypot(b) > 0.0) {
            return Err(Error::DegenerateShape);
        }
        Ok(Frame { a, b })
    }

    /// Pixels per canonical unit.
    pub fn pixel_scale(&self) -> f64 {
        1.0 / self.a.hypot(self.b)
    }

    pub fn to_canonical(&self, d: Point2) -> Point2 {
        Point2::new(self.a * d.x - self.b * d.y, self.b * d.x + self.a * d.y)
    }

    pub fn to_image(&self, d: Point2) -> Point2 {
        self.image_basis().apply(d)
    }

    /// The inverse map as a reusable linear map, for many offsets in one frame.
    pub fn image_basis(&self) -> ImageBasis {
        let k = 1.0 / (self.a * self.a + self.b * self.b);
        ImageBasis { a: k * self.a, b: k * self.b }
    }
}

/// Canonical-to-image linear map `[a b; -b a]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageBasis {
    a: f64,
    b: f64,
}

impl ImageBasis {
    #[inline]
    pub fn apply(&self, d: Point2) -> Point2 {
        Point2::new(self.a * d.x + self.b * d.y, -self.b * d.x + self.a * d.y)
    }
}
