//! Age-structured chemostat: model, equilibrium, ergodic transforms,
//! feedback laws, characteristic solver and Lyapunov audits.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod controllers;
pub mod equilibrium;
pub mod exprfn;
pub mod lyapunov;
pub mod model;
pub mod solver;
pub mod transforms;
