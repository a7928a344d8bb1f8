//! Operational confidence calibration for trained classifiers.
//!
//! Given the last-hidden-layer representations and logits a model produces on
//! a shifted operation domain, [`calibrator`] learns per-input calibrated
//! confidences from a small, actively chosen set of labels. The model's
//! predictions themselves are left unchanged.

pub mod baselines;
pub mod calibrator;
pub mod clustering;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gp;
pub mod metrics;
pub mod rng;
pub mod simulator;

pub use calibrator::{calibrate, CalibratorConfig, CalibratorState, LabelOracle};
pub use dataset::{Dataset, ModelOutputs, OperationRecord};
pub use error::{Error, Result};
pub use metrics::{CalibrationReport, CostModel};
