//! Model merging workbench: a small ViT-style encoder, baseline merge
//! operators, and task-specific representation interventions trained by
//! feature distillation.

pub mod error;
pub mod interventions;
pub mod merging;
pub mod optim;
pub mod params;
pub mod taskgen;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
pub use params::{grad_check, grad_check_with_floor, GradCheck, ParamSet, ParamVars};
pub use tensor::{Tape, Tensor, Var};
