//! Support/query (S/Q) and support/target (S/T) meta-learning protocols on two
//! synthetic benchmarks: sinusoid regression and 2-d Gaussian classification.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense MLPs with exact reverse-mode gradients, gradients
//!   through an inner SGD step, SGD with momentum and a finite-difference oracle.
//! - [`tasks`]: task generators and episode samplers.
//! - [`solvers`]: MAML adaptation, ProtoNet classification and the
//!   similarity-weighted ProtoNet regressor.
//! - [`targets`]: analytic, Bayes-optimal and fine-tuned target models plus the
//!   on-disk target cache.
//! - [`hardness`]: task hardness scoring and hard-task selection.
//! - [`protocols`]: the training objectives and meta-train / meta-eval loops.
//! - [`harness`]: experiment orchestration shared by the CLI and the test suites.

pub mod error;
pub mod harness;
pub mod hardness;
pub mod numerics;
pub mod protocols;
pub mod solvers;
pub mod targets;
pub mod tasks;
pub mod util;

pub use error::{Error, Result};
pub use numerics::{Activation, Gradient, Matrix, MlpModel, OptimizerState};
pub use solvers::{AdaptedSolver, PrototypeSet};
pub use targets::{PretrainedModel, TargetKind, TargetModel};
pub use tasks::{Episode, GaussianClass, GaussianDataset, SinusoidTask, Split};
