//! Cascaded shape regression behind a pluggable interface.
//!
//! The shipped implementation learns local binary features with per-landmark
//! regression forests and maps them to shape updates with a global ridge
//! regression, stage by stage. Every training routine honours per-sample
//! survival flags: rows with `survives == false` are ignored exactly.

mod cascade;
mod ridge;
mod tree;

use serde::{Deserialize, Serialize};

pub use cascade::{predict, train_cascade, CascadeModel, CascadeStage, StageReport, TrainReport};
pub use ridge::{cholesky_in_place, solve_factored, train_global_regression, GlobalLinearStage};
pub use tree::{train_local_mappings, LocalMappingStage, RegressionTree, Split, StageConfig, StageSample};

use crate::dataset::BoundingBox;
use crate::error::{Error, Result};
use crate::evaluation::PupilIndices;
use crate::geometry::Shape;
use crate::image::GrayImage;

/// Ridge weight for the global regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RidgeWeight {
    Fixed(f64),
    /// `μ = factor · D`, with `D` the binary feature dimension.
    PerFeature(f64),
}

impl RidgeWeight {
    pub fn resolve(&self, feature_dim: usize) -> f64 {
        match *self {
            RidgeWeight::Fixed(mu) => mu,
            RidgeWeight::PerFeature(f) => f * feature_dim as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stages: usize,
    pub trees_per_landmark: usize,
    pub tree_depth: usize,
    /// Sampling radius per stage as a fraction of face size (twice the RMS
    /// radius); the last entry repeats for later stages.
    pub radius_schedule: Vec<f64>,
    pub ridge: RidgeWeight,
    pub initial_perturbations_per_sample: usize,
    pub candidates_per_split: usize,
    pub pixel_pool_size: usize,
    pub rng_seed: u64,
    /// Normalizer for the training NME log; RMS radius of the truth when absent.
    pub pupils: Option<PupilIndices>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stages: 5,
            trees_per_landmark: 5,
            tree_depth: 4,
            radius_schedule: vec![0.3, 0.2, 0.15, 0.1, 0.08],
            ridge: RidgeWeight::PerFeature(0.1),
            initial_perturbations_per_sample: 5,
            candidates_per_split: 100,
            pixel_pool_size: 400,
            rng_seed: 0,
            pupils: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::config("stages must be >= 1"));
        }
        if self.trees_per_landmark == 0 {
            return Err(Error::config("trees_per_landmark must be >= 1"));
        }
        if self.tree_depth == 0 || self.tree_depth > 12 {
            return Err(Error::config("tree_depth must be in 1..=12"));
        }
        if self.radius_schedule.is_empty() || self.radius_schedule.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::config("radius schedule must be nonempty and positive"));
        }
        if self.radius_schedule.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::config("radius schedule must be nonincreasing"));
        }
        let mu = match self.ridge {
            RidgeWeight::Fixed(m) | RidgeWeight::PerFeature(m) => m,
        };
        if !(mu >= 0.0) || !mu.is_finite() {
            return Err(Error::config("ridge weight must be finite and nonnegative"));
        }
        if self.initial_perturbations_per_sample == 0 {
            return Err(Error::config("initial_perturbations_per_sample must be >= 1"));
        }
        if self.candidates_per_split == 0 || self.pixel_pool_size < 2 {
            return Err(Error::config("need >= 1 split candidate and a pixel pool of >= 2"));
        }
        Ok(())
    }

    pub fn radius(&self, stage: usize) -> f64 {
        let i = stage.min(self.radius_schedule.len() - 1);
        self.radius_schedule[i]
    }
}

/// A labeled face used for training, with its survival flag.
#[derive(Debug, Clone, Copy)]
pub struct TrainingSample<'a> {
    pub image: &'a GrayImage,
    pub bbox: BoundingBox,
    pub shape: &'a Shape,
    pub survives: bool,
}

/// Train/predict contract for cascaded regressors.
pub trait ShapeRegressor: Sync {
    type Model: Clone + Send + Sync;

    fn train(&self, samples: &[TrainingSample<'_>]) -> Result<Self::Model>;

    fn predict(&self, model: &Self::Model, image: &GrayImage, bbox: &BoundingBox) -> Shape;
}

/// Local-binary-feature cascade.
#[derive(Debug, Clone, Default)]
pub struct LbfRegressor {
    pub config: TrainConfig,
}

impl ShapeRegressor for LbfRegressor {
    type Model = CascadeModel;

    fn train(&self, samples: &[TrainingSample<'_>]) -> Result<CascadeModel> {
        train_cascade(samples, &self.config).map(|(m, _)| m)
    }

    fn predict(&self, model: &CascadeModel, image: &GrayImage, bbox: &BoundingBox) -> Shape {
        predict(model, image, bbox)
    }
}
