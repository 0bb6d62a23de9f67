//! Reverse-mode differentiation over sparse layers, the parameter registry,
//! SGD and finite-difference gradient checking.

mod gradcheck;
mod optim;
mod params;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport, GroupError};
pub use optim::{lr_at, sgd_step, OptimizerConfig};
pub use params::{Gradients, ParamEntry, ParamId, ParameterStore};
pub use tape::{huber, sigmoid, RunningUpdate, Tape, Var, PROB_CLAMP};

#[cfg(test)]
mod tests;
