//! Speaker-dependent blind score normalization for PLDA i-vector verification.
//!
//! Given a trained two-covariance PLDA model and a speaker's enrollment
//! i-vectors, the score of any test i-vector is a quadratic form whose mean
//! and variance under both hypotheses have closed forms. Those moments yield
//! a Bayes-optimal threshold per speaker without any impostor cohort.

pub mod calibration;
pub mod cli;
pub mod error;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod model;
pub mod preprocess;
pub mod scoring;
pub mod stats;
pub mod synth;
pub mod training;

#[cfg(test)]
mod testutil;

pub use calibration::{
    empirical_min_dcf, normalize_score, optimal_threshold, CalibratedSpeaker, DcfConfig, MinDcf,
};
pub use error::{Error, Result};
pub use model::{DerivedOperators, PldaParameters};
pub use preprocess::Preprocessor;
pub use scoring::{score_trial, BatchScorer, Enrollment, QuadraticForm};
pub use stats::{speaker_stats, ScoreMoments, SpeakerScoreStats};
pub use training::{em_fit, EmConfig, LabeledDataset};
