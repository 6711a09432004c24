//! Dense arrays, reverse-mode gradients, Adam, and a finite-difference
//! gradient oracle.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, Objective, GRAD_CHECK_EPS};
pub use graph::{bilinear_sample, bilinear_taps, CustomOp, Fault, GatherTable, Gradients, Graph, Taps, Var};
pub use params::{adam_step, cosine_lr, AdamConfig, Param, ParamStore};
pub use tensor::Tensor;
