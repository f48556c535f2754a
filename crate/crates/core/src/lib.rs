//! Penalized calibration weighting with sensitivity analysis for omitted
//! auxiliary variables.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibrate;
pub mod cli;
pub mod lowrank;
pub mod root;
pub mod sensitivity;
pub mod simgen;
