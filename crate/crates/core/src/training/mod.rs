//! Cross-entropy training with Adam, and finite-difference gradient checks.

mod adam;
mod gradcheck;
mod train;

pub use adam::{adam_step, Adam, AdamConfig, Moments};
pub use gradcheck::{gradcheck, gradcheck_setup, GradcheckOptions, GradcheckReport, GroupReport, MAX_GRADCHECK_PARAMS};
pub use train::{
    accuracy, cross_entropy, loss_and_grads, predict, train, EvalRecord, TrainConfig, TrainHistory, TrainSummary,
};
