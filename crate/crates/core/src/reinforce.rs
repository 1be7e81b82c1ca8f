//! Self-reinforced training: train on survivors, predict the unlabeled pool,
//! score predictions by appearance and geometry, and admit low-discrepancy
//! predictions under a growing threshold until the scores settle.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::appearance::{self, fit_classifier_set, LandmarkClassifierSet, PerturbationConfig};
use crate::dataset::BoundingBox;
use crate::error::{Error, Result};
use crate::evaluation::{nme, PupilIndices};
use crate::features::{FeatureConfig, FeatureExtractor};
use crate::geometry::{mean_shape, Shape};
use crate::geometry_validator::{self, discover_combinations, GeometryModel};
use crate::image::GrayImage;
use crate::regressor::{ShapeRegressor, TrainingSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Manual,
    Predicted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub bbox: BoundingBox,
    pub label: Option<Shape>,
    pub origin: Origin,
    pub v: bool,
    pub a: f64,
    pub g: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReinforceConfig {
    pub lambda: f64,
    pub alpha0: f64,
    pub alpha_step: f64,
    pub max_iterations: usize,
    /// Convergence bound on the mean per-sample change of `a` and `g`; the
    /// survivor set must also stay unchanged for two consecutive iterations.
    pub tolerance: f64,
    /// Scores are floored at this value before taking logs; 0 keeps hard rejection.
    pub score_floor: f64,
    /// Re-predict manual labels too (they stay pinned as survivors).
    pub refit_manual: bool,
    pub perturbation: PerturbationConfig,
    pub features: FeatureConfig,
    pub bins: usize,
    pub smoothing: f64,
    pub stable_subset: Vec<usize>,
    pub rel_std_threshold: f64,
    pub max_combinations: usize,
}

impl ReinforceConfig {
    /// Defaults, with perturbation lengths in pixels.
    pub fn new(perturbation: PerturbationConfig, stable_subset: Vec<usize>) -> Self {
        ReinforceConfig {
            lambda: 1.0,
            alpha0: 0.5,
            alpha_step: 0.25,
            max_iterations: 5,
            tolerance: 1e-3,
            score_floor: 0.0,
            refit_manual: false,
            perturbation,
            features: FeatureConfig::default(),
            bins: appearance::DEFAULT_BINS,
            smoothing: appearance::DEFAULT_SMOOTHING,
            stable_subset,
            rel_std_threshold: geometry_validator::DEFAULT_REL_STD,
            max_combinations: geometry_validator::DEFAULT_MAX_COMBINATIONS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || self.lambda.is_nan() {
            return Err(Error::config("lambda must be nonnegative"));
        }
        if !(self.alpha_step > 0.0) {
            return Err(Error::config("alpha step must be positive"));
        }
        if !self.alpha0.is_finite() {
            return Err(Error::config("alpha0 must be finite"));
        }
        if self.max_iterations == 0 {
            return Err(Error::config("max_iterations must be >= 1"));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::config("tolerance must be nonnegative"));
        }
        if !(self.score_floor >= 0.0 && self.score_floor <= 1.0) {
            return Err(Error::config("score floor must lie in [0, 1]"));
        }
        self.perturbation.validate()?;
        self.features.validate()
    }
}

/// `-(ln a + λ ln g)` with optional flooring; `+∞` when a used factor is 0, never NaN.
pub fn combined_score(a: f64, g: f64, lambda: f64, floor: f64) -> f64 {
    let a = a.max(floor);
    let g = g.max(floor);
    let mut s = -a.ln();
    if lambda != 0.0 {
        s += -lambda * g.ln();
    }
    s + 0.0
}

/// Strict survival rule.
pub fn survives(score: f64, alpha: f64) -> bool {
    score < alpha
}

/// Applies the survival rule; manual records always survive.
pub fn survive(records: &mut [SampleRecord], alpha: f64) {
    for r in records.iter_mut() {
        r.v = r.origin == Origin::Manual || (r.label.is_some() && survives(r.score, alpha));
    }
}

/// Classifiers and geometry model trained once on the manual seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Validators {
    pub appearance: LandmarkClassifierSet,
    pub geometry: GeometryModel,
}

impl Validators {
    pub fn fit(manual: &[(&GrayImage, &Shape)], cfg: &ReinforceConfig) -> Result<Self> {
        if manual.is_empty() {
            return Err(Error::EmptySeed);
        }
        let shapes: Vec<Shape> = manual.iter().map(|(_, s)| (*s).clone()).collect();
        let reference = mean_shape(&shapes, 10)?;
        let appearance =
            fit_classifier_set(manual, &reference, &cfg.features, &cfg.perturbation, cfg.bins, cfg.smoothing)?;
        let geometry = discover_combinations(&shapes, &cfg.stable_subset, cfg.rel_std_threshold, cfg.max_combinations)?;
        Ok(Validators { appearance, geometry })
    }

    /// `(a, g)` for a shape; an unscorable shape gets `a = 0`.
    pub fn score(&self, extractor: &FeatureExtractor, img: &GrayImage, shape: &Shape) -> (f64, f64) {
        let a = appearance::appearance_score(img, shape, &self.appearance, extractor).unwrap_or(0.0);
        let g = geometry_validator::geometry_score(shape, &self.geometry).unwrap_or(0.0);
        (a, g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub t: usize,
    pub alpha: f64,
    pub survivors: usize,
    pub total: usize,
    pub mean_a: Option<f64>,
    pub mean_g: Option<f64>,
    pub heldout_nme: Option<f64>,
    pub mean_delta_a: f64,
    pub mean_delta_g: f64,
    pub flipped: usize,
}

/// A face given to the loop; a label marks it as manual.
#[derive(Debug, Clone)]
pub struct ReinforceInput<'a> {
    pub id: String,
    pub image: &'a GrayImage,
    pub bbox: BoundingBox,
    pub label: Option<Shape>,
}

/// Held-out faces for monitoring.
#[derive(Debug, Clone)]
pub struct Validation<'a> {
    pub samples: Vec<(&'a GrayImage, BoundingBox, Shape)>,
    pub pupils: PupilIndices,
}

#[derive(Debug, Clone)]
pub struct ReinforceState<'a, M> {
    pub t: usize,
    pub alpha: f64,
    pub model: Option<M>,
    pub records: Vec<SampleRecord>,
    pub images: Vec<&'a GrayImage>,
    pub history: Vec<IterationLog>,
    pub validators: Validators,
    /// Whether the last step changed any survival flag.
    pub survivors_changed: bool,
}

impl<M> ReinforceState<'_, M> {
    pub fn survivor_count(&self) -> usize {
        self.records.iter().filter(|r| r.v).count()
    }

    fn training_set(&self) -> Vec<TrainingSample<'_>> {
        self.records
            .iter()
            .zip(&self.images)
            .filter(|(r, _)| r.v)
            .map(|(r, img)| TrainingSample {
                image: img,
                bbox: r.bbox,
                shape: r.label.as_ref().expect("survivors carry labels"),
                survives: true,
            })
            .collect()
    }
}

/// Manual faces start as survivors; unlabeled faces start excluded and unlabeled.
pub fn initialize<'a, M>(inputs: Vec<ReinforceInput<'a>>, cfg: &ReinforceConfig) -> Result<ReinforceState<'a, M>> {
    cfg.validate()?;
    let manual: Vec<(&GrayImage, &Shape)> =
        inputs.iter().filter_map(|i| i.label.as_ref().map(|l| (i.image, l))).collect();
    if manual.is_empty() {
        return Err(Error::EmptySeed);
    }
    let validators = Validators::fit(&manual, cfg)?;
    let mut records = Vec::with_capacity(inputs.len());
    let mut images = Vec::with_capacity(inputs.len());
    for i in inputs {
        let manual = i.label.is_some();
        records.push(SampleRecord {
            id: i.id,
            bbox: i.bbox,
            label: i.label,
            origin: if manual { Origin::Manual } else { Origin::Predicted },
            v: manual,
            a: if manual { 1.0 } else { 0.0 },
            g: if manual { 1.0 } else { 0.0 },
            score: if manual { 0.0 } else { f64::INFINITY },
        });
        images.push(i.image);
    }
    Ok(ReinforceState {
        t: 0,
        alpha: cfg.alpha0,
        model: None,
        records,
        images,
        history: Vec::new(),
        validators,
        survivors_changed: true,
    })
}

/// One alternation: retrain on survivors, relabel, rescore, grow α, reselect.
pub fn reinforce_step<'a, R: ShapeRegressor>(
    mut state: ReinforceState<'a, R::Model>,
    regressor: &R,
    cfg: &ReinforceConfig,
    validation: Option<&Validation<'_>>,
) -> Result<ReinforceState<'a, R::Model>> {
    let samples = state.training_set();
    if samples.is_empty() {
        return Err(Error::NoSurvivors);
    }
    let model = regressor.train(&samples)?;
    drop(samples);

    let extractor = state.validators.appearance.extractor()?;
    let validators = &state.validators;
    let relabel: Vec<Option<(Shape, f64, f64)>> = state
        .records
        .par_iter()
        .zip(state.images.par_iter())
        .map(|(r, img)| {
            let redo = r.origin == Origin::Predicted || cfg.refit_manual;
            redo.then(|| {
                let shape = regressor.predict(&model, img, &r.bbox);
                let (a, g) = validators.score(&extractor, img, &shape);
                (shape, a, g)
            })
        })
        .collect();

    let (mut sum_da, mut sum_dg) = (0.0f64, 0.0f64);
    let (mut sum_a, mut sum_g, mut n_pred) = (0.0, 0.0, 0usize);
    for (r, upd) in state.records.iter_mut().zip(relabel) {
        let Some((shape, a, g)) = upd else { continue };
        if r.origin == Origin::Manual {
            // manual labels stay fixed; a refit only reports its scores
            r.a = a;
            r.g = g;
            continue;
        }
        let first = r.label.is_none();
        sum_da += if first { f64::INFINITY } else { (a - r.a).abs() };
        sum_dg += if first { f64::INFINITY } else { (g - r.g).abs() };
        r.label = Some(shape);
        r.a = a;
        r.g = g;
        r.score = combined_score(a, g, cfg.lambda, cfg.score_floor);
        sum_a += a;
        sum_g += g;
        n_pred += 1;
    }

    state.t += 1;
    state.alpha = cfg.alpha0 + state.t as f64 * cfg.alpha_step;
    let before: Vec<bool> = state.records.iter().map(|r| r.v).collect();
    survive(&mut state.records, state.alpha);
    let flipped = before.iter().zip(&state.records).filter(|(b, r)| **b != r.v).count();
    state.survivors_changed = flipped > 0;

    let heldout_nme = match validation {
        Some(v) if !v.samples.is_empty() => {
            let errs: Vec<f64> = v
                .samples
                .par_iter()
                .map(|(img, bbox, gt)| nme(&regressor.predict(&model, img, bbox), gt, &v.pupils))
                .collect::<Result<_>>()?;
            Some(errs.iter().sum::<f64>() / errs.len() as f64)
        }
        _ => None,
    };
    let mean = |s: f64| (n_pred > 0).then(|| s / n_pred as f64);
    state.history.push(IterationLog {
        t: state.t,
        alpha: state.alpha,
        survivors: state.survivor_count(),
        total: state.records.len(),
        mean_a: mean(sum_a),
        mean_g: mean(sum_g),
        heldout_nme,
        mean_delta_a: mean(sum_da).unwrap_or(0.0),
        mean_delta_g: mean(sum_dg).unwrap_or(0.0),
        flipped,
    });
    state.model = Some(model);
    Ok(state)
}

fn converged<M>(state: &ReinforceState<'_, M>, cfg: &ReinforceConfig) -> bool {
    let [.., prev, last] = state.history.as_slice() else { return false };
    last.mean_delta_a <= cfg.tolerance && last.mean_delta_g <= cfg.tolerance && prev.flipped == 0 && last.flipped == 0
}

/// Iterates until stable or `max_iterations`, calling `on_iteration` after each step.
///
/// If the final step changed the survivor set, the model is retrained once on
/// the final survivors so it matches the returned records.
pub fn run<'a, R: ShapeRegressor>(
    mut state: ReinforceState<'a, R::Model>,
    regressor: &R,
    cfg: &ReinforceConfig,
    validation: Option<&Validation<'_>>,
    mut on_iteration: impl FnMut(&ReinforceState<'a, R::Model>) -> Result<()>,
) -> Result<(R::Model, ReinforceState<'a, R::Model>)> {
    cfg.validate()?;
    loop {
        state = reinforce_step(state, regressor, cfg, validation)?;
        on_iteration(&state)?;
        if converged(&state, cfg) || state.t >= cfg.max_iterations {
            break;
        }
    }
    let model = if state.survivors_changed {
        regressor.train(&state.training_set())?
    } else {
        state.model.clone().expect("at least one step ran")
    };
    Ok((model, state))
}
