//! Exact data attribution by differentiating through training.
//!
//! A deterministic training run `A(w)` over data weights `w` is replayed in
//! reverse to obtain `d phi(A(w)) / d w` at `w = 1` exactly. The resulting
//! influence vector drives a first-order predictor of how the measurement
//! changes when training examples are dropped, scored against retraining
//! with the linear datamodeling score.

pub mod attribution;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod format;
pub mod linalg;
pub mod measure;
pub mod model;
pub mod optim;
pub mod replay;
pub mod stats;
pub mod trainer;

pub use checkpoint::{audit_budget, budget_report, BudgetReport, simulate_schedule, CheckpointStore, ReplayBudget, RetentionPolicy};
pub use data::{Dataset, Example, Generator, SyntheticSpec, Target, TaskKind};
pub use error::{Error, Result};
pub use measure::MeasurementFn;
pub use model::{Activation, ModelFamily};
pub use optim::{LrSchedule, OptimizerState, RuleKind, StateAdjoint, UpdateRule};
pub use replay::{replay_batch_adjoint, replay_metagradient, replay_metagradients, InfluenceVector};
pub use trainer::{BatchSchedule, DataWeights, TrainPlan};
pub use attribution::{
    ground_truth, lds, sample_subsets, smoothness_probe, LdsReport, RetrainMode, SmoothnessProbe, SubsetSample,
    TaskLds, TaylorPredictor,
};
pub use baselines::{convex_ij_influence, fd_influence, grad_dot, trak_lite, BaselineKind};
pub use replay::ReplayOptions;
pub use stats::{spearman, ConfidenceInterval};
