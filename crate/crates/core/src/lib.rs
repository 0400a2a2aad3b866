//! Similarity-distance-magnitude calibration: activation, exemplar adaptor,
//! calibrated uncertainty estimates and selective classification.

pub mod activation;
pub mod archive;
pub mod baselines;
pub mod calibration;
pub mod data;
pub mod error;
pub mod estimator;
pub mod llm_features;
pub mod network;
pub mod numerics;
pub mod region;
pub mod report;
pub mod similarity;
pub mod stats;
pub mod synthetic;
pub mod training;

pub use error::{Result, SdmError};
