//! Continual learning by per-task binary subnetworks over one shared backbone.
//!
//! Each task trains real-valued importance scores and selects a binary mask
//! over every maskable layer; weights claimed by earlier tasks are never
//! updated again, so earlier tasks keep their accuracy exactly. Masks are
//! stored as 32-task bitplanes, and in the domain-incremental setting the
//! task id of a test sample is inferred from first-layer activation
//! statistics.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod maskstore;
pub mod scalar;
pub mod subnet;
pub mod taskid;
pub mod tensor;
pub mod trainer;

pub use backbone::{Backbone, BackboneConfig, FreezePolicy, Scenario};
pub use error::{Error, Result};
pub use evalkit::AccuracyMatrix;
pub use experiment::{ExperimentConfig, Precision, Preset, RunState};
pub use maskstore::CompressedMaskBank;
pub use scalar::Scalar;
pub use subnet::{CumulativeMask, SelectionConfig, SelectionMode, TaskMask};
pub use taskid::{DistanceConfig, TaskStatistics, TaskStatisticsBank};
pub use tensor::{Mask, Tensor};
pub use trainer::{ContinualLearner, TrainConfig};

pub type Backbone32 = Backbone<f32>;
pub type Backbone64 = Backbone<f64>;
pub type Learner32 = ContinualLearner<f32>;
pub type Learner64 = ContinualLearner<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type RunState32 = RunState<f32>;
pub type RunState64 = RunState<f64>;
