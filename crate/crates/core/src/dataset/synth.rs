//! Procedural faces with exact ground truth.
//!
//! A 68-point template is deformed along a few expression and identity modes,
//! placed in the image and warped by a random homography. Each landmark
//! carries its own texture (an oriented ridge plus an offset dot, fixed by the
//! texture seed) drawn in the landmark's local affine frame, over a skin
//! ellipse and a value-noise background with optional clutter.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BoundingBox, DatasetManifest, ManifestEntry, SplitTag};
use crate::error::{Error, Result};
use crate::evaluation::PupilIndices;
use crate::geometry::{Point2, Shape};
use crate::image::GrayImage;
use crate::rng;

pub const IBUG68: &str = "ibug68";
/// Pixels per template unit before jitter.
const FACE_SCALE: f64 = 46.0;
const RIDGE_WIDTH: f64 = 0.028;
const PATTERN_RADIUS: f64 = 0.07;
const DOT_WIDTH: f64 = 0.018;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFaceConfig {
    pub landmarks: usize,
    pub template: String,
    /// Standard deviation of each deformation-mode coefficient.
    pub deformation_std: f64,
    /// Overall strength of the random homography; 0 gives the plain placement.
    pub homography_jitter: f64,
    /// Bounding-box jitter as a fraction of its size.
    pub bbox_jitter: f64,
    /// Number of landmark-like distractors is `round(12 · clutter)`.
    pub clutter: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub texture_seed: u64,
    pub image_size: usize,
    pub count: usize,
    pub rng_seed: u64,
}

impl Default for SyntheticFaceConfig {
    fn default() -> Self {
        SyntheticFaceConfig {
            landmarks: 68,
            template: IBUG68.into(),
            deformation_std: 1.0,
            homography_jitter: 1.0,
            bbox_jitter: 0.04,
            clutter: 0.5,
            noise: 0.02,
            texture_seed: 1,
            image_size: 128,
            count: 100,
            rng_seed: 0,
        }
    }
}

impl SyntheticFaceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.template != IBUG68 || self.landmarks != 68 {
            return Err(Error::config("only the 68-point `ibug68` template is available"));
        }
        if self.count == 0 {
            return Err(Error::config("count must be >= 1"));
        }
        if self.image_size < 64 {
            return Err(Error::config("image_size must be >= 64"));
        }
        for (name, v) in [
            ("deformation_std", self.deformation_std),
            ("homography_jitter", self.homography_jitter),
            ("bbox_jitter", self.bbox_jitter),
            ("clutter", self.clutter),
            ("noise", self.noise),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

/// The 68-point template in template units (x right, y down, face about 2 units wide).
pub fn ibug68_template() -> Vec<Point2> {
    let mut p = Vec::with_capacity(68);
    for i in 0..17 {
        let phi = std::f64::consts::PI * i as f64 / 16.0;
        p.push(Point2::new(-0.95 * phi.cos(), -0.2 + 1.2 * phi.sin()));
    }
    for k in 0..5 {
        let x = -0.75 + 0.15 * k as f64;
        p.push(Point2::new(x, -0.55 - 0.1 * (std::f64::consts::PI * k as f64 / 4.0).sin()));
    }
    for k in 0..5 {
        let x = 0.15 + 0.15 * k as f64;
        p.push(Point2::new(x, -0.55 - 0.1 * (std::f64::consts::PI * k as f64 / 4.0).sin()));
    }
    for k in 0..4 {
        p.push(Point2::new(0.0, -0.35 + k as f64 * 0.5 / 3.0));
    }
    for (x, y) in [(-0.2, 0.3), (-0.1, 0.33), (0.0, 0.35), (0.1, 0.33), (0.2, 0.3)] {
        p.push(Point2::new(x, y));
    }
    for cx in [-0.42, 0.42] {
        let cy = -0.3;
        for (dx, dy) in [(-0.15, 0.0), (-0.05, -0.06), (0.05, -0.06), (0.15, 0.0), (0.05, 0.06), (-0.05, 0.06)] {
            p.push(Point2::new(cx + dx, cy + dy));
        }
    }
    for (x, y) in [
        (-0.35, 0.6),
        (-0.22, 0.55),
        (-0.08, 0.52),
        (0.0, 0.535),
        (0.08, 0.52),
        (0.22, 0.55),
        (0.35, 0.6),
        (0.22, 0.68),
        (0.08, 0.72),
        (0.0, 0.725),
        (-0.08, 0.72),
        (-0.22, 0.68),
        (-0.28, 0.6),
        (-0.1, 0.585),
        (0.0, 0.585),
        (0.1, 0.585),
        (0.28, 0.6),
        (0.1, 0.635),
        (0.0, 0.635),
        (-0.1, 0.635),
    ] {
        p.push(Point2::new(x, y));
    }
    p
}

pub const DEFORMATION_MODES: usize = 8;

/// Displacement of template point `i` (at `p`) under unit coefficient of `mode`.
fn mode_displacement(mode: usize, i: usize, p: Point2) -> Point2 {
    let lower_lip = matches!(i, 55..=59 | 65..=67);
    let eye_center = if (36..42).contains(&i) {
        Some(Point2::new(-0.42, -0.3))
    } else if (42..48).contains(&i) {
        Some(Point2::new(0.42, -0.3))
    } else {
        None
    };
    match mode {
        // mouth opening
        0 => {
            if lower_lip {
                Point2::new(0.0, 0.09)
            } else if (4..=12).contains(&i) {
                Point2::new(0.0, 0.05 * (1.0 - ((i as f64 - 8.0) / 5.0).abs()))
            } else {
                Point2::ZERO
            }
        }
        // smile
        1 => match i {
            48 | 60 => Point2::new(-0.04, -0.05),
            54 | 64 => Point2::new(0.04, -0.05),
            49 | 59 => Point2::new(-0.02, -0.025),
            53 | 55 => Point2::new(0.02, -0.025),
            _ => Point2::ZERO,
        },
        // brow raise
        2 => {
            if (17..27).contains(&i) {
                Point2::new(0.0, -0.07)
            } else {
                Point2::ZERO
            }
        }
        // face width
        3 => Point2::new(0.08 * p.x, 0.0),
        // jaw length
        4 => Point2::new(0.0, if p.y > 0.3 { 0.12 * (p.y - 0.3) } else { 0.0 }),
        // eye size
        5 => match eye_center {
            Some(c) => Point2::new(0.15 * (p.x - c.x), 0.5 * (p.y - c.y)),
            None => Point2::ZERO,
        },
        // nose length
        6 => {
            if (28..36).contains(&i) {
                Point2::new(0.0, if i >= 31 { 0.06 } else { 0.02 * (i - 27) as f64 })
            } else {
                Point2::ZERO
            }
        }
        // asymmetry
        _ => Point2::new(0.04 * p.y, 0.03 * p.x * p.x),
    }
}

pub type Homography = [[f64; 3]; 3];

fn apply_h(h: &Homography, p: Point2) -> Point2 {
    let w = h[2][0] * p.x + h[2][1] * p.y + h[2][2];
    Point2::new((h[0][0] * p.x + h[0][1] * p.y + h[0][2]) / w, (h[1][0] * p.x + h[1][1] * p.y + h[1][2]) / w)
}

fn invert_h(h: &Homography) -> Homography {
    let m = h;
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let inv = 1.0 / det;
    [
        [
            (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv,
            (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv,
            (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv,
        ],
        [
            (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv,
            (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv,
            (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv,
        ],
        [
            (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv,
            (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv,
            (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv,
        ],
    ]
}

/// Parameters fully determining one synthetic face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFace {
    pub index: usize,
    pub coefficients: Vec<f64>,
    /// Maps template units to image pixels.
    pub homography: Homography,
    pub bbox: BoundingBox,
}

impl SyntheticFace {
    /// Deformed template, in template units.
    pub fn template_points(&self) -> Vec<Point2> {
        ibug68_template()
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                self.coefficients.iter().enumerate().fold(p, |acc, (m, &c)| acc + mode_displacement(m, i, p) * c)
            })
            .collect()
    }

    pub fn landmarks(&self) -> Shape {
        Shape::from_points_unchecked(self.template_points().into_iter().map(|p| apply_h(&self.homography, p)).collect())
    }

    /// Linear part of the warp at template point `u`, as columns `(d/du_x, d/du_y)`.
    fn jacobian(&self, u: Point2) -> [[f64; 2]; 2] {
        let h = &self.homography;
        let w = h[2][0] * u.x + h[2][1] * u.y + h[2][2];
        let p = apply_h(h, u);
        [
            [(h[0][0] - p.x * h[2][0]) / w, (h[0][1] - p.x * h[2][1]) / w],
            [(h[1][0] - p.y * h[2][0]) / w, (h[1][1] - p.y * h[2][1]) / w],
        ]
    }
}

#[derive(Debug, Clone, Copy)]
struct Pattern {
    normal: Point2,
    ridge_amp: f64,
    dot_offset: Point2,
    dot_amp: f64,
}

fn patterns(texture_seed: u64, n: usize) -> Vec<Pattern> {
    (0..n)
        .map(|l| {
            let mut r = rng::stream(texture_seed, &[l as u64]);
            let theta = r.random_range(0.0..std::f64::consts::PI);
            let sign = if r.random_bool(0.5) { 1.0 } else { -1.0 };
            let ridge_amp = sign * r.random_range(0.18..0.32);
            let phi = r.random_range(0.0..std::f64::consts::TAU);
            let rho = r.random_range(0.025..0.05);
            let dsign = if r.random_bool(0.5) { 1.0 } else { -1.0 };
            Pattern {
                normal: Point2::new(theta.cos(), theta.sin()),
                ridge_amp,
                dot_offset: Point2::new(rho * phi.cos(), rho * phi.sin()),
                dot_amp: dsign * r.random_range(0.15..0.3),
            }
        })
        .collect()
}

impl Pattern {
    fn value(&self, u: Point2) -> f64 {
        let env = (-u.norm_sq() / (2.0 * PATTERN_RADIUS * PATTERN_RADIUS)).exp();
        let d = u.x * self.normal.x + u.y * self.normal.y;
        let ridge = self.ridge_amp * (-d * d / (2.0 * RIDGE_WIDTH * RIDGE_WIDTH)).exp() * env;
        let dot = self.dot_amp * (-(u - self.dot_offset).norm_sq() / (2.0 * DOT_WIDTH * DOT_WIDTH)).exp();
        ridge + dot
    }
}

fn value_noise(rng: &mut impl Rng, size: usize, cell: usize) -> Vec<f64> {
    let g = size / cell + 2;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.random::<f64>()).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 / cell as f64, y as f64 / cell as f64);
            let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (fx - ix as f64, fy - iy as f64);
            let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
            let v00 = grid[iy * g + ix];
            let v10 = grid[iy * g + ix + 1];
            let v01 = grid[(iy + 1) * g + ix];
            let v11 = grid[(iy + 1) * g + ix + 1];
            let top = v00 + (v10 - v00) * sx;
            let bot = v01 + (v11 - v01) * sx;
            out[y * size + x] = top + (bot - top) * sy;
        }
    }
    out
}

/// Draws the parameters of face `index`.
pub fn sample_face(cfg: &SyntheticFaceConfig, index: usize) -> SyntheticFace {
    let mut r = rng::stream(cfg.rng_seed, &[0, index as u64]);
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let coefficients: Vec<f64> = (0..DEFORMATION_MODES).map(|_| cfg.deformation_std * n.sample(&mut r)).collect();
    let j = cfg.homography_jitter;
    let size = cfg.image_size as f64;
    let center = Point2::new(size / 2.0 + 4.0 * j * n.sample(&mut r), size / 2.0 + 2.0 + 4.0 * j * n.sample(&mut r));
    let theta = 0.12 * j * n.sample(&mut r);
    let scale = FACE_SCALE * (size / 128.0) * (1.0 + 0.06 * j * n.sample(&mut r));
    let (gx, gy) = (0.06 * j * n.sample(&mut r), 0.06 * j * n.sample(&mut r));
    let (s, c) = theta.sin_cos();
    // x_img = center + scale * R u / (1 + g·u)
    let homography = [
        [scale * c + center.x * gx, -scale * s + center.x * gy, center.x],
        [scale * s + center.y * gx, scale * c + center.y * gy, center.y],
        [gx, gy, 1.0],
    ];
    let mut face =
        SyntheticFace { index, coefficients, homography, bbox: BoundingBox { x: 0.0, y: 0.0, w: 1.0, h: 1.0 } };
    let (lo, hi) = face.landmarks().bounds();
    let (w, h) = (hi.x - lo.x, hi.y - lo.y);
    let bj = cfg.bbox_jitter;
    let m = 0.08;
    let x = lo.x - m * w + bj * w * n.sample(&mut r);
    let y = lo.y - m * h + bj * h * n.sample(&mut r);
    let bw = w * (1.0 + 2.0 * m) * (1.0 + bj * n.sample(&mut r));
    let bh = h * (1.0 + 2.0 * m) * (1.0 + bj * n.sample(&mut r));
    face.bbox = BoundingBox { x: x.round(), y: y.round(), w: bw.round().max(1.0), h: bh.round().max(1.0) };
    face
}

/// Renders face `face` (drawn with `cfg`) to an 8-bit-quantized image.
pub fn render_face(cfg: &SyntheticFaceConfig, face: &SyntheticFace) -> GrayImage {
    let size = cfg.image_size;
    let mut r = rng::stream(cfg.rng_seed, &[1, face.index as u64]);
    let pats = patterns(cfg.texture_seed, cfg.landmarks);
    let bg = value_noise(&mut r, size, 16);
    let fine = value_noise(&mut r, size, 5);
    let skin = r.random_range(0.5..0.7);
    let shade = Point2::new(r.random_range(-0.1..0.1), r.random_range(-0.1..0.1));
    let inv = invert_h(&face.homography);

    let mut img: Vec<f64> = (0..size * size)
        .map(|k| {
            let (x, y) = ((k % size) as f64, (k / size) as f64);
            let back = 0.15 + 0.5 * bg[k] + 0.15 * (fine[k] - 0.5);
            let u = apply_h(&inv, Point2::new(x, y));
            let e = (u.x / 1.0).powi(2) + ((u.y - 0.15) / 1.12).powi(2);
            let inside = 1.0 / (1.0 + ((e - 1.0) * 25.0).exp());
            let face_v = skin + shade.x * u.x + shade.y * u.y + 0.04 * (fine[k] - 0.5);
            inside * face_v + (1.0 - inside) * back
        })
        .collect();

    let mut stamp = |center: Point2, jac: [[f64; 2]; 2], pat: &Pattern| {
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        let reach =
            3.5 * PATTERN_RADIUS * jac[0][0].abs().max(jac[0][1].abs()).max(jac[1][0].abs()).max(jac[1][1].abs()) * 1.5;
        let (x0, x1) = (
            (center.x - reach).floor().max(0.0) as usize,
            (center.x + reach).ceil().min(size as f64 - 1.0).max(0.0) as usize,
        );
        let (y0, y1) = (
            (center.y - reach).floor().max(0.0) as usize,
            (center.y + reach).ceil().min(size as f64 - 1.0).max(0.0) as usize,
        );
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = Point2::new(x as f64 - center.x, y as f64 - center.y);
                let u =
                    Point2::new((jac[1][1] * d.x - jac[0][1] * d.y) / det, (-jac[1][0] * d.x + jac[0][0] * d.y) / det);
                img[y * size + x] += pat.value(u);
            }
        }
    };

    let clutter = (12.0 * cfg.clutter).round() as usize;
    for _ in 0..clutter {
        let l = r.random_range(0..cfg.landmarks);
        let c = Point2::new(r.random_range(0.0..size as f64), r.random_range(0.0..size as f64));
        let rot = r.random_range(0.0..std::f64::consts::TAU);
        let s = FACE_SCALE * (size as f64 / 128.0) * r.random_range(0.8..1.2);
        let (sn, cs) = rot.sin_cos();
        stamp(c, [[s * cs, -s * sn], [s * sn, s * cs]], &pats[l]);
    }
    let tpl = face.template_points();
    let lm = face.landmarks();
    for (l, pat) in pats.iter().enumerate() {
        stamp(lm.point(l), face.jacobian(tpl[l]), pat);
    }

    let contrast = r.random_range(0.8..1.2);
    let brightness = r.random_range(-0.08..0.08);
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("positive std");
    let bytes: Vec<u8> = img
        .iter()
        .map(|&v| {
            let n = if cfg.noise > 0.0 { noise.sample(&mut r) } else { 0.0 };
            let v = contrast * (v - 0.5) + 0.5 + brightness + n;
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    GrayImage::from_u8(size, size, &bytes).expect("sized buffer")
}

/// Faces and images without touching the filesystem.
pub fn generate(cfg: &SyntheticFaceConfig) -> Result<Vec<(SyntheticFace, GrayImage)>> {
    cfg.validate()?;
    Ok((0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let f = sample_face(cfg, i);
            let img = render_face(cfg, &f);
            (f, img)
        })
        .collect())
}

/// Writes `images/`, `pts/`, `boxes/` and `manifest.jsonl` under `out_dir`; every entry is tagged train.
pub fn synthesize_dataset(cfg: &SyntheticFaceConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    for d in ["images", "pts", "boxes"] {
        fs::create_dir_all(out_dir.join(d))?;
    }
    let entries = (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let face = sample_face(cfg, i);
            let img = render_face(cfg, &face);
            let id = format!("face_{i:05}");
            let image = Path::new("images").join(format!("{id}.png"));
            let pts = Path::new("pts").join(format!("{id}.pts"));
            img.save_png(&out_dir.join(&image))?;
            super::write_pts(&out_dir.join(&pts), &face.landmarks())?;
            face.bbox.save(&out_dir.join("boxes").join(format!("{id}.box")))?;
            Ok(ManifestEntry { id, image, pts: Some(pts), bbox: face.bbox, split: SplitTag::Train })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest::new(cfg.landmarks, PupilIndices::ibug68(), entries, out_dir.to_path_buf())?;
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_has_68_distinct_points() {
        let t = ibug68_template();
        assert_eq!(t.len(), 68);
        for i in 0..68 {
            for j in 0..i {
                assert!(t[i].distance(&t[j]) > 1e-3, "{i} {j}");
            }
        }
    }

    #[test]
    fn zero_noise_places_template() {
        let cfg = SyntheticFaceConfig {
            deformation_std: 0.0,
            homography_jitter: 0.0,
            bbox_jitter: 0.0,
            count: 1,
            ..Default::default()
        };
        let f = sample_face(&cfg, 0);
        let c = Point2::new(64.0, 66.0);
        for (p, t) in f.landmarks().points().iter().zip(ibug68_template()) {
            assert!(p.distance(&(c + t * FACE_SCALE)) < 1e-12);
        }
    }

    #[test]
    fn deterministic_and_inverse() {
        let cfg = SyntheticFaceConfig { count: 2, ..Default::default() };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        let h = a[0].0.homography;
        let back = apply_h(&invert_h(&h), apply_h(&h, Point2::new(0.3, -0.2)));
        assert!(back.distance(&Point2::new(0.3, -0.2)) < 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_difference() {
        let f = sample_face(&SyntheticFaceConfig::default(), 3);
        let u = Point2::new(0.2, 0.1);
        let j = f.jacobian(u);
        let e = 1e-6;
        let dx = (apply_h(&f.homography, u + Point2::new(e, 0.0)) - apply_h(&f.homography, u - Point2::new(e, 0.0)))
            * (0.5 / e);
        assert!((dx.x - j[0][0]).abs() < 1e-4 && (dx.y - j[1][0]).abs() < 1e-4);
    }

    #[test]
    fn bbox_contains_face() {
        let cfg = SyntheticFaceConfig::default();
        for i in 0..10 {
            let f = sample_face(&cfg, i);
            let (lo, hi) = f.landmarks().bounds();
            assert!(f.bbox.x < lo.x + 5.0 && f.bbox.x + f.bbox.w > hi.x - 5.0);
            assert!(f.bbox.y < lo.y + 5.0 && f.bbox.y + f.bbox.h > hi.y - 5.0);
            assert_eq!(f.bbox.x.fract(), 0.0);
        }
    }
}
