//! Local descriptors sampled around landmarks.
//!
//! Every landmark contributes a gradient-orientation histogram of a square
//! patch followed by a binary descriptor built from intensity comparisons on a
//! ring-shaped sampling pattern. Patches are laid out in the canonical frame
//! of the shape, so descriptors follow the face's rotation and scale.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Frame, Point2, Shape};
use crate::image::{GrayImage, ImageView};

const HOG_EPSILON: f64 = 1e-6;
const PAIR_PATTERN_SEED: u64 = 0x4c53_5246_5245_414b;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Side of the square patch, in patch pixels (odd).
    pub patch_size: usize,
    pub hog_cells: usize,
    pub hog_bins: usize,
    /// Ring radii in patch pixels, strictly increasing.
    pub ring_radii: Vec<f64>,
    pub points_per_ring: usize,
    pub comparison_pairs: usize,
    /// RMS face radius, in patch pixels, of a shape at canonical scale.
    pub reference_radius: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            patch_size: 31,
            hog_cells: 4,
            hog_bins: 8,
            ring_radii: vec![4.0, 8.0, 12.0],
            points_per_ring: 8,
            comparison_pairs: 128,
            reference_radius: 32.0,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 3 || self.patch_size.is_multiple_of(2) {
            return Err(Error::config("patch_size must be odd and >= 3"));
        }
        if self.hog_cells == 0 || self.hog_cells > self.patch_size {
            return Err(Error::config("hog_cells must be in 1..=patch_size"));
        }
        if self.hog_bins < 2 {
            return Err(Error::config("hog_bins must be >= 2"));
        }
        let half = self.patch_size as f64 / 2.0;
        let mut prev = 0.0;
        for &r in &self.ring_radii {
            if !(r > prev) || r >= half {
                return Err(Error::config("ring radii must be positive, strictly increasing and < patch_size / 2"));
            }
            prev = r;
        }
        if self.points_per_ring == 0 && !self.ring_radii.is_empty() {
            return Err(Error::config("points_per_ring must be >= 1"));
        }
        let n = self.sample_point_count();
        if self.comparison_pairs == 0 || self.comparison_pairs > n * (n - 1) / 2 {
            return Err(Error::config(format!("comparison_pairs must be in 1..={}", n * (n - 1) / 2)));
        }
        if !(self.reference_radius > 0.0) || !self.reference_radius.is_finite() {
            return Err(Error::config("reference_radius must be positive"));
        }
        Ok(())
    }

    pub fn hog_len(&self) -> usize {
        self.hog_cells * self.hog_cells * self.hog_bins
    }

    pub fn binary_len(&self) -> usize {
        self.comparison_pairs
    }

    /// Descriptor length contributed by a single landmark.
    pub fn landmark_len(&self) -> usize {
        self.hog_len() + self.binary_len()
    }

    fn sample_point_count(&self) -> usize {
        1 + self.ring_radii.len() * self.points_per_ring
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    GradientHistogram,
    Binary,
}

/// A fixed-length feature vector with a named segment layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub values: Vec<f64>,
    pub layout: Vec<(SegmentKind, usize)>,
}

impl Descriptor {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A validated [`FeatureConfig`] with its sampling pattern precomputed.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    cfg: FeatureConfig,
    /// Retinal sampling points: offset (patch pixels) and smoothing sigma.
    points: Vec<(Point2, f64)>,
    pairs: Vec<(usize, usize)>,
}

impl FeatureExtractor {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let mut points = vec![(Point2::ZERO, 1.0)];
        for (ring, &r) in cfg.ring_radii.iter().enumerate() {
            let n = cfg.points_per_ring;
            let stagger = if ring % 2 == 1 { PI / n as f64 } else { 0.0 };
            let sigma = (0.35 * r).max(1.0);
            for k in 0..n {
                let theta = 2.0 * PI * k as f64 / n as f64 + stagger;
                points.push((Point2::new(r * theta.cos(), r * theta.sin()), sigma));
            }
        }
        let mut all: Vec<(usize, usize)> =
            (0..points.len()).flat_map(|a| (a + 1..points.len()).map(move |b| (a, b))).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(PAIR_PATTERN_SEED ^ points.len() as u64);
        all.shuffle(&mut rng);
        all.truncate(cfg.comparison_pairs);
        Ok(FeatureExtractor { cfg, points, pairs: all })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// The comparison pairs (indices into the sampling points), in bit order.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    #[inline]
    fn locate(&self, center: Point2, frame: &Frame, offset: Point2) -> Point2 {
        center + frame.to_image(offset * (1.0 / self.cfg.reference_radius))
    }

    /// Gradient-orientation histogram of the patch centered at `center`.
    pub fn hog(&self, view: &ImageView<'_>, center: Point2, frame: &Frame) -> Vec<f64> {
        let p = self.cfg.patch_size;
        let g = p + 2;
        let half = ((p - 1) / 2) as f64;
        let mut grid = vec![0.0f64; g * g];
        for j in 0..g {
            for i in 0..g {
                let off = Point2::new(i as f64 - 1.0 - half, j as f64 - 1.0 - half);
                grid[j * g + i] = view.bilinear(self.locate(center, frame, off));
            }
        }
        let cells = self.cfg.hog_cells;
        let bins = self.cfg.hog_bins;
        let mut hist = vec![0.0f64; cells * cells * bins];
        for y in 0..p {
            let cy = y * cells / p;
            for x in 0..p {
                let cx = x * cells / p;
                let (gi, gj) = (x + 1, y + 1);
                let gx = grid[gj * g + gi + 1] - grid[gj * g + gi - 1];
                let gy = grid[(gj + 1) * g + gi] - grid[(gj - 1) * g + gi];
                let mag = (gx * gx + gy * gy).sqrt();
                if mag == 0.0 {
                    continue;
                }
                hist[(cy * cells + cx) * bins + orientation_bin(gx, gy, bins)] += mag;
            }
        }
        let norm = (hist.iter().map(|v| v * v).sum::<f64>() + HOG_EPSILON * HOG_EPSILON).sqrt();
        hist.iter_mut().for_each(|v| *v /= norm);
        hist
    }

    /// Smoothed intensities at the retinal sampling points.
    pub fn ring_samples(&self, view: &ImageView<'_>, center: Point2, frame: &Frame) -> Vec<f64> {
        const W: [f64; 3] = [0.606_530_659_712_633_4, 1.0, 0.606_530_659_712_633_4];
        let wsum: f64 = W.iter().map(|a| W.iter().map(|b| a * b).sum::<f64>()).sum();
        self.points
            .iter()
            .map(|&(offset, sigma)| {
                let mut acc = 0.0;
                for (v, wv) in W.iter().enumerate() {
                    for (u, wu) in W.iter().enumerate() {
                        let o = offset + Point2::new((u as f64 - 1.0) * sigma, (v as f64 - 1.0) * sigma);
                        acc += wu * wv * view.bilinear(self.locate(center, frame, o));
                    }
                }
                acc / wsum
            })
            .collect()
    }

    /// Bit k is 1 iff the first point of pair k is strictly brighter than the second.
    pub fn binary(&self, view: &ImageView<'_>, center: Point2, frame: &Frame) -> Vec<f64> {
        let s = self.ring_samples(view, center, frame);
        self.pairs.iter().map(|&(a, b)| if s[a] > s[b] { 1.0 } else { 0.0 }).collect()
    }

    /// Histogram segment followed by the binary segment.
    pub fn landmark(&self, view: &ImageView<'_>, center: Point2, frame: &Frame) -> Vec<f64> {
        let mut v = self.hog(view, center, frame);
        v.extend(self.binary(view, center, frame));
        v
    }

    /// Per-landmark descriptors of a shape given in coordinates local to `view`.
    pub fn shape_descriptors(&self, view: &ImageView<'_>, local: &Shape, frame: &Frame) -> Vec<Vec<f64>> {
        local.points().iter().map(|&c| self.landmark(view, c, frame)).collect()
    }
}

#[inline]
fn orientation_bin(gx: f64, gy: f64, bins: usize) -> usize {
    let angle = gy.atan2(gx).rem_euclid(PI);
    ((angle / PI * bins as f64) as usize).min(bins - 1)
}

/// Splits a shape into an integer anchor and anchor-relative coordinates.
pub fn anchored(shape: &Shape) -> ((i64, i64), Shape) {
    let p0 = shape.point(0);
    let (ax, ay) = (p0.x.floor(), p0.y.floor());
    let local = shape.translated(Point2::new(-ax, -ay));
    ((ax as i64, ay as i64), local)
}

/// Histogram segment at `center` with patch pixels aligned to image pixels.
pub fn hog_patch(img: &GrayImage, center: Point2, cfg: &FeatureConfig) -> Result<Vec<f64>> {
    let fx = FeatureExtractor::new(cfg.clone())?;
    Ok(fx.hog(&img.view(0, 0), center, &Frame::from_scale_rotation(cfg.reference_radius, 0.0)))
}

/// Binary segment at `center` with patch pixels aligned to image pixels.
pub fn binary_descriptor(img: &GrayImage, center: Point2, cfg: &FeatureConfig) -> Result<Vec<f64>> {
    let fx = FeatureExtractor::new(cfg.clone())?;
    Ok(fx.binary(&img.view(0, 0), center, &Frame::from_scale_rotation(cfg.reference_radius, 0.0)))
}

/// Concatenated per-landmark descriptors, sampled in the frame that aligns
/// `shape` to `reference`.
pub fn shape_indexed_features(
    img: &GrayImage,
    shape: &Shape,
    reference: &Shape,
    cfg: &FeatureConfig,
) -> Result<Descriptor> {
    let fx = FeatureExtractor::new(cfg.clone())?;
    let frame = Frame::of(shape, reference)?;
    let ((ax, ay), local) = anchored(shape);
    let view = img.view(ax, ay);
    let mut values = Vec::with_capacity(shape.len() * cfg.landmark_len());
    let mut layout = Vec::with_capacity(2 * shape.len());
    for d in fx.shape_descriptors(&view, &local, &frame) {
        values.extend(d);
        layout.push((SegmentKind::GradientHistogram, cfg.hog_len()));
        layout.push((SegmentKind::Binary, cfg.binary_len()));
    }
    Ok(Descriptor { values, layout })
}
