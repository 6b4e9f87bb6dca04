//! Dense tensors, a reverse-mode tape, named parameters, and a central
//! difference gradient checker.

mod gradcheck;
mod graph;
mod params;
mod rows;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, Matrix, Tensor, Var};
pub use params::{glorot_uniform, ModelParams, ParamVars, Parameter};
pub use rows::Rows;
