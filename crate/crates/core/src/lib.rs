//! Physics-informed relational inference for interacting particle systems:
//! a spring/charge simulator, integration and observation error profiles, a
//! small reverse-mode autodiff engine, the encoder/decoder model, its loss
//! family, calibration diagnostics and the experiment driver used by the CLI.

// `!(x > 0.0)` is how NaN gets rejected; tensor arithmetic is fallible on
// shape mismatch, so it cannot be the std operator traits.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::should_implement_trait,
    clippy::needless_range_loop
)]

pub mod autodiff;
pub mod calibration;
pub mod error_profile;
pub mod experiment;
pub mod loss;
pub mod model;
pub mod sim;

pub use autodiff::{Graph, Tensor, Var};
pub use calibration::{EdgeAccuracy, FitReport, Pathologies, SigmaStats, ZScoreSet};
pub use error_profile::{ErrorGrid, PriorSchedule};
pub use experiment::{EpochRecord, Evaluation, ExperimentConfig, ExperimentError, TrainOutcome};
pub use loss::{LossConfig, LossKind, LossValue};
pub use model::{EdgePosterior, Fnri, ModelConfig, SigmaMode};
pub use sim::{
    Dataset, DatasetSplits, InteractionGraph, PhasePoint, SimConfig, SplitCounts, Trajectory,
};
