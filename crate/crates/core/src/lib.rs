//! Self-reinforced cascaded regression for landmark localization.
//!
//! A cascaded regressor is trained on a small labelled seed, predicts labels
//! for unlabelled faces, and re-admits those predictions whose local
//! appearance ([`appearance`]) and global geometry ([`geometry_validator`])
//! look consistent. The loop in [`reinforce`] repeats this with a growing
//! admission threshold.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod appearance;
pub mod container;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod geometry;
pub mod geometry_validator;
pub mod image;
pub mod regressor;
pub mod reinforce;
mod rng;

pub use appearance::{LandmarkClassifier, LandmarkClassifierSet, PerturbationConfig, Validity};
pub use container::ModelBundle;
pub use dataset::{BoundingBox, DatasetManifest, SplitTag, SyntheticFaceConfig};
pub use error::{Error, Result};
pub use evaluation::{CedCurve, CorrelationReport, NmeResult, PupilIndices};
pub use features::{Descriptor, FeatureConfig};
pub use geometry::{Point2, Shape, SimilarityTransform};
pub use geometry_validator::{GeometryModel, IntrinsicRange};
pub use image::GrayImage;
pub use regressor::{CascadeModel, LbfRegressor, ShapeRegressor, TrainConfig};
pub use reinforce::{ReinforceConfig, ReinforceState, SampleRecord};
