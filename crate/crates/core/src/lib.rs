//! Multi-view body-mesh regression with pixel-aligned feedback features:
//! geometry, a procedural skinned body, feature sampling, multi-view fusion,
//! placement estimators and the iterative engine, plus a synthetic scenario
//! generator and evaluation reports.

// `!(x > y)` comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod body_model;
pub mod engine;
pub mod error;
pub mod estimators;
pub mod features;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod report;
pub mod scalar;
pub mod scenario;

pub use error::{Error, Result};

// Concrete scalar instances of the generic types.
pub type Rotation64 = geometry::Rotation<f64>;
pub type CameraView64 = geometry::CameraView<f64>;
pub type BodyTemplate64 = body_model::BodyTemplate<f64>;
pub type BodyState64 = body_model::BodyState<f64>;
pub type FeatureMap64 = features::FeatureMap<f64>;
pub type FeaturePyramid64 = features::FeaturePyramid<f64>;
pub type FusionWeights64 = fusion::FusionWeights<f64>;
pub type Rotation32 = geometry::Rotation<f32>;
pub type CameraView32 = geometry::CameraView<f32>;
pub type BodyTemplate32 = body_model::BodyTemplate<f32>;
pub type BodyState32 = body_model::BodyState<f32>;
pub type FeatureMap32 = features::FeatureMap<f32>;
pub type FeaturePyramid32 = features::FeaturePyramid<f32>;
pub type FusionWeights32 = fusion::FusionWeights<f32>;

pub use engine::{run, EngineConfig, Mode};
pub use report::{ablate, Report, Suite};
pub use scenario::{generate_scenario, Scenario, ScenarioConfig};
