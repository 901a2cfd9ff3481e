//! Conformal fairness monitoring and repair for classifier and detector
//! outputs.
//!
//! A calibration set fixes group confidence means and a split-conformal
//! threshold on a fairness-aware non-conformity score. At inference the
//! [`repair::OnlineEngine`] flags records whose score exceeds the
//! threshold, nudges their outputs toward parity, and lowers the
//! threshold as evidence accumulates.
//!
//! ```
//! use fairsight::{calibration, pipeline, synthgen, HyperParams};
//!
//! let scenario = synthgen::BiasScenario::classification(1, 400);
//! let (cal, test) = synthgen::generate_split(&scenario).unwrap();
//! let run = pipeline::run(&cal, &test, &HyperParams::default()).unwrap();
//! assert_eq!(run.outcomes.len(), 400);
//! # let _ = calibration::conformal_rank(10, 0.1);
//! ```

pub mod calibration;
pub mod cli;
pub mod data_model;
pub mod error;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod repair;
pub mod scoring;
pub mod synthgen;

pub use data_model::{
    BoundingBox, CalibrationArtifact, ClassificationRecord, Dataset, DetectionRecord, Group,
    GroupStats, HyperParams, RegionAggregation, Task, Threshold,
};
pub use error::{Error, Result};
pub use repair::{OnlineEngine, RepairOutcome};
