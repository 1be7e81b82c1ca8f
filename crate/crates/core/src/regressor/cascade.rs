use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ridge::{train_global_regression, GlobalLinearStage};
use super::tree::{train_local_mappings, LocalMappingStage, StageConfig, StageSample};
use super::{TrainConfig, TrainingSample};
use crate::dataset::BoundingBox;
use crate::error::{Error, Result};
use crate::evaluation::PupilIndices;
use crate::geometry::{mean_shape, Frame, Point2, Shape, MIN_LANDMARKS};
use crate::image::{GrayImage, ImageView};
use crate::rng;

pub const MODEL_VERSION: u32 = 1;
const GPA_ITERATIONS: usize = 10;
const JITTER_SCALE_STD: f64 = 0.05;
const JITTER_ROTATION_STD: f64 = 0.05;
const JITTER_SHIFT_STD: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeStage {
    pub local: LocalMappingStage,
    pub global: GlobalLinearStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeModel {
    pub version: u32,
    pub landmark_count: usize,
    /// Unit-RMS Procrustes mean; defines the canonical frame.
    pub mean_shape: Shape,
    /// Mean label in bounding-box units (`(p - corner) / size`), used to place the initial shape.
    pub init_shape: Shape,
    pub stages: Vec<CascadeStage>,
}

impl CascadeModel {
    /// Initial shape for `bbox`, in coordinates local to the anchor `floor(bbox corner)`.
    pub fn place(&self, bbox: &BoundingBox) -> ((i64, i64), Shape) {
        let anchor = bbox.anchor();
        let (fx, fy) = (bbox.x - anchor.0 as f64, bbox.y - anchor.1 as f64);
        let pts = self.init_shape.points().iter().map(|u| Point2::new(fx + u.x * bbox.w, fy + u.y * bbox.h)).collect();
        (anchor, Shape::from_points_unchecked(pts))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    /// Mean normalized error (percent) over training rows before and after the stage.
    pub nme_before: f64,
    pub nme_after: f64,
    /// Squared residual in canonical units before the global fit and after it.
    pub residual_before: f64,
    pub residual_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: usize,
    pub stages: Vec<StageReport>,
}

struct Row<'a> {
    view: ImageView<'a>,
    truth: Shape,
    current: Shape,
    normalizer: f64,
}

pub fn train_cascade(samples: &[TrainingSample<'_>], cfg: &TrainConfig) -> Result<(CascadeModel, TrainReport)> {
    cfg.validate()?;
    let survivors: Vec<&TrainingSample<'_>> = samples.iter().filter(|s| s.survives).collect();
    if survivors.is_empty() {
        return Err(Error::NoSurvivors);
    }
    let l = survivors[0].shape.len();
    if l < MIN_LANDMARKS {
        return Err(Error::InsufficientShapes { required: MIN_LANDMARKS, found: l });
    }
    if let Some(s) = survivors.iter().find(|s| s.shape.len() != l) {
        return Err(Error::LandmarkMismatch { expected: l, found: s.shape.len() });
    }
    if let Some(p) = &cfg.pupils {
        p.validate(l)?;
    }

    let labels: Vec<Shape> = survivors.iter().map(|s| s.shape.clone()).collect();
    let mean = mean_shape(&labels, GPA_ITERATIONS)?;
    let init_shape = bbox_mean(&survivors);
    let mut model =
        CascadeModel { version: MODEL_VERSION, landmark_count: l, mean_shape: mean, init_shape, stages: Vec::new() };

    let mut rows = Vec::with_capacity(survivors.len() * cfg.initial_perturbations_per_sample);
    // jitter streams are keyed by survivor rank, so dead samples change nothing
    for (i, s) in survivors.iter().enumerate() {
        let (anchor, placed) = model.place(&s.bbox);
        let truth = s.shape.translated(Point2::new(-(anchor.0 as f64), -(anchor.1 as f64)));
        let normalizer = normalizer(s.shape, cfg.pupils.as_ref())?;
        for r in 0..cfg.initial_perturbations_per_sample {
            let current = if r == 0 { placed.clone() } else { jitter(&placed, &s.bbox, anchor, cfg.rng_seed, i, r) };
            rows.push(Row { view: s.image.view(anchor.0, anchor.1), truth: truth.clone(), current, normalizer });
        }
    }

    let mut report = TrainReport { rows: rows.len(), stages: Vec::new() };
    for t in 0..cfg.stages {
        let frames: Vec<Frame> =
            rows.par_iter().map(|r| Frame::of(&r.current, &model.mean_shape)).collect::<Result<_>>()?;
        let stage_rows: Vec<StageSample<'_>> = rows
            .iter()
            .zip(&frames)
            .map(|(r, f)| StageSample {
                view: r.view,
                shape: r.current.clone(),
                frame: *f,
                target: r.truth.points().iter().zip(r.current.points()).map(|(g, c)| f.to_canonical(*g - *c)).collect(),
                survives: true,
            })
            .collect();
        let stage_cfg = StageConfig {
            trees_per_landmark: cfg.trees_per_landmark,
            depth: cfg.tree_depth,
            radius: 2.0 * cfg.radius(t),
            candidates_per_split: cfg.candidates_per_split,
            pixel_pool_size: cfg.pixel_pool_size,
            seed: rng::stream(cfg.rng_seed, &[STAGE_STREAM, t as u64]).next_u64_seed(),
        };
        let local = train_local_mappings(&stage_rows, &stage_cfg)?;
        let phi: Vec<Vec<u32>> =
            stage_rows.par_iter().map(|s| local.binary_features(&s.view, &s.shape, &s.frame)).collect();
        let targets: Vec<Vec<f64>> =
            stage_rows.iter().map(|s| s.target.iter().flat_map(|p| [p.x, p.y]).collect()).collect();
        let dim = local.feature_dim();
        let global = train_global_regression(&phi, &targets, &vec![true; phi.len()], dim, cfg.ridge.resolve(dim))?;

        let residual_before: f64 = targets.iter().flatten().map(|v| v * v).sum();
        let residual_after: f64 = phi
            .iter()
            .zip(&targets)
            .map(|(p, t)| global.apply(p).iter().zip(t).map(|(a, b)| (b - a) * (b - a)).sum::<f64>())
            .sum();
        let nme_before = mean_nme(&rows);
        let stage = CascadeStage { local, global };
        let updated: Vec<Shape> = rows
            .par_iter()
            .zip(phi.par_iter().zip(frames.par_iter()))
            .map(|(r, (p, f))| apply_update(&stage.global, &r.current, p, f))
            .collect();
        for (r, s) in rows.iter_mut().zip(updated) {
            r.current = s;
        }
        report.stages.push(StageReport {
            stage: t,
            nme_before,
            nme_after: mean_nme(&rows),
            residual_before,
            residual_after,
        });
        model.stages.push(stage);
    }
    Ok((model, report))
}

const STAGE_STREAM: u64 = 1;
const JITTER_STREAM: u64 = 2;

trait SeedOut {
    fn next_u64_seed(self) -> u64;
}

impl SeedOut for rand_chacha::ChaCha8Rng {
    fn next_u64_seed(mut self) -> u64 {
        rand::RngCore::next_u64(&mut self)
    }
}

/// Runs the cascade from the placed initial shape.
pub fn predict(model: &CascadeModel, image: &GrayImage, bbox: &BoundingBox) -> Shape {
    let (anchor, mut current) = model.place(bbox);
    let view = image.view(anchor.0, anchor.1);
    for stage in &model.stages {
        let Ok(frame) = Frame::of(&current, &model.mean_shape) else { break };
        let phi = stage.local.binary_features(&view, &current, &frame);
        current = apply_update(&stage.global, &current, &phi, &frame);
    }
    current.translated(Point2::new(anchor.0 as f64, anchor.1 as f64))
}

fn apply_update(global: &GlobalLinearStage, current: &Shape, phi: &[u32], frame: &Frame) -> Shape {
    let delta = global.apply(phi);
    let pts = current
        .points()
        .iter()
        .enumerate()
        .map(|(l, p)| *p + frame.to_image(Point2::new(delta[2 * l], delta[2 * l + 1])))
        .collect();
    Shape::from_points_unchecked(pts)
}

fn bbox_mean(survivors: &[&TrainingSample<'_>]) -> Shape {
    let l = survivors[0].shape.len();
    let mut acc = vec![Point2::ZERO; l];
    for s in survivors {
        for (a, p) in acc.iter_mut().zip(s.shape.points()) {
            *a = *a + Point2::new((p.x - s.bbox.x) / s.bbox.w, (p.y - s.bbox.y) / s.bbox.h);
        }
    }
    let n = survivors.len() as f64;
    Shape::from_points_unchecked(acc.into_iter().map(|p| p * (1.0 / n)).collect())
}

fn jitter(placed: &Shape, bbox: &BoundingBox, anchor: (i64, i64), seed: u64, sample: usize, r: usize) -> Shape {
    let mut rng = rng::stream(seed, &[JITTER_STREAM, sample as u64, r as u64]);
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let scale = 1.0 + JITTER_SCALE_STD * n.sample(&mut rng);
    let theta = JITTER_ROTATION_STD * n.sample(&mut rng);
    let shift =
        Point2::new(JITTER_SHIFT_STD * bbox.w * n.sample(&mut rng), JITTER_SHIFT_STD * bbox.h * n.sample(&mut rng));
    let center = Point2::new(bbox.x + 0.5 * bbox.w - anchor.0 as f64, bbox.y + 0.5 * bbox.h - anchor.1 as f64);
    let (s, c) = theta.sin_cos();
    let pts = placed
        .points()
        .iter()
        .map(|p| {
            let d = *p - center;
            center + Point2::new(scale * (c * d.x - s * d.y), scale * (s * d.x + c * d.y)) + shift
        })
        .collect();
    Shape::from_points_unchecked(pts)
}

fn normalizer(truth: &Shape, pupils: Option<&PupilIndices>) -> Result<f64> {
    match pupils {
        Some(p) => p.distance(truth),
        None => {
            let r = truth.rms_radius();
            if r > 0.0 {
                Ok(r)
            } else {
                Err(Error::DegenerateShape)
            }
        }
    }
}

fn mean_nme(rows: &[Row<'_>]) -> f64 {
    let total: f64 = rows.iter().map(|r| 100.0 * r.current.mean_distance(&r.truth) / r.normalizer).sum();
    total / rows.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regressor::RidgeWeight;

    fn face_image(shift: (usize, usize)) -> GrayImage {
        GrayImage::from_fn(64, 64, |x, y| {
            let (x, y) = (x as i64 - shift.0 as i64, y as i64 - shift.1 as i64);
            (((x * 37 + y * 11 + x * y) & 255) as f32 / 255.0).clamp(0.0, 1.0)
        })
        .unwrap()
    }

    fn label() -> Shape {
        Shape::from_xy(&[(20.0, 22.0), (40.0, 21.0), (30.0, 32.0), (23.0, 42.0), (38.0, 43.0)]).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            stages: 2,
            trees_per_landmark: 3,
            tree_depth: 3,
            radius_schedule: vec![0.3, 0.2],
            ridge: RidgeWeight::Fixed(1e-3),
            initial_perturbations_per_sample: 4,
            candidates_per_split: 40,
            pixel_pool_size: 40,
            rng_seed: 11,
            pupils: None,
        }
    }

    #[test]
    fn rejects_zero_trees() {
        let cfg = TrainConfig { trees_per_landmark: 0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { stages: 0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_weights_return_placed_init() {
        let img = face_image((0, 0));
        let shape = label();
        let bbox = BoundingBox::new(12.0, 14.0, 36.0, 36.0).unwrap();
        let sample = TrainingSample { image: &img, bbox, shape: &shape, survives: true };
        let (mut model, _) = train_cascade(&[sample], &small_cfg()).unwrap();
        for s in model.stages.iter_mut() {
            s.global.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        let pred = predict(&model, &img, &bbox);
        for (p, q) in pred.points().iter().zip(shape.points()) {
            assert!(p.distance(q) < 1e-9);
        }
    }

    #[test]
    fn translation_covariance() {
        let shape = label();
        let img = face_image((0, 0));
        let bbox = BoundingBox::new(12.0, 14.0, 36.0, 36.0).unwrap();
        let sample = TrainingSample { image: &img, bbox, shape: &shape, survives: true };
        let (model, _) = train_cascade(&[sample], &small_cfg()).unwrap();
        let moved = face_image((5, 3));
        let a = predict(&model, &img, &bbox);
        let b = predict(&model, &moved, &BoundingBox::new(17.0, 17.0, 36.0, 36.0).unwrap());
        for (p, q) in a.points().iter().zip(b.points()) {
            assert_eq!(p.x + 5.0, q.x);
            assert_eq!(p.y + 3.0, q.y);
        }
    }

    #[test]
    fn dead_samples_do_not_matter() {
        let img = face_image((0, 0));
        let shape = label();
        let other = shape.translated(Point2::new(2.0, -1.0));
        let bbox = BoundingBox::new(12.0, 14.0, 36.0, 36.0).unwrap();
        let live = TrainingSample { image: &img, bbox, shape: &shape, survives: true };
        let dead = TrainingSample { image: &img, bbox, shape: &other, survives: false };
        let (a, _) = train_cascade(&[live, dead], &small_cfg()).unwrap();
        let (b, _) = train_cascade(&[live], &small_cfg()).unwrap();
        assert_eq!(a, b);
        assert!(matches!(train_cascade(&[dead], &small_cfg()), Err(Error::NoSurvivors)));
    }
}
