//! Minimal dense-network training core.
//!
//! Parameters live in one flat `Vec<f64>`; every layer is a row-major
//! `out x in` weight block followed by its bias. The forward and backward
//! passes are generic over [`Scalar`], which lets the same code run on plain
//! `f64` and on [`Dual`] numbers. Running backprop on duals seeded with a
//! direction `v` yields the exact Hessian-vector product, which is all that is
//! needed to differentiate through an inner SGD step.

mod checkpoint;
mod fd;
mod inner;
mod loss;
mod matrix;
mod mlp;
mod optim;
mod scalar;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use fd::{finite_diff, finite_diff_grad, relative_error};
pub use inner::{adapt, grad_through_inner_step, InnerOrder, Objective};
pub use loss::{ConstantLoss, OutputLoss, SoftTargetCrossEntropy, SquaredError};
pub use matrix::Matrix;
pub use mlp::{
    backprop, backprop_with_input_grad, hessian_vector_product, Activation, Gradient, MlpModel,
};
pub use optim::{sgd_step, LrSchedule, OptimizerState};
pub use scalar::{Dual, Scalar};

pub(crate) use loss::log_softmax;
