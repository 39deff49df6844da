//! Measure predictive churn between two model versions and reduce it by
//! combining them (accumulated model combination).
//!
//! The crate is organised bottom-up:
//!
//! - [`matrix`], [`ops`], [`io`]: data model, stable softmax/argmax, file formats.
//! - [`metrics`]: churn, negative-flip rate, flip decomposition, forgetting events.
//! - [`scores`]: per-sample selection scores (Conf, AvgConf, OOD scores) and the
//!   nearest-neighbour AvgConf estimator.
//! - [`calibration`]: temperature scaling, reliability tables, ranking changes.
//! - [`net`], [`trainer`], [`qp`]: a small MLP trainer with churn-reduction
//!   baselines, per-sample gradients and the compatible-gradient projection.
//! - [`amc`]: score-based model selection, stacking and distilled stacking.

pub mod amc;
pub mod calibration;
pub mod data;
pub mod error;
pub mod io;
pub mod matrix;
pub mod metrics;
pub mod net;
pub mod ops;
pub mod qp;
pub mod scores;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::{
    validate_bundle, CheckpointSeries, EmbeddingMatrix, LabelVector, LogitMatrix, Matrix, PredictionBundle, ProbMatrix,
};
pub use ops::{hard_predict, softmax};

/// Per-sample decision of a selection meta-model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    UseBase,
    UseNew,
}

impl Choice {
    pub fn as_str(self) -> &'static str {
        match self {
            Choice::UseBase => "base",
            Choice::UseNew => "new",
        }
    }
}
