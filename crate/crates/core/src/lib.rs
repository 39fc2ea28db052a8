//! Physics-informed deep learning for traffic state estimation on a single
//! road segment.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod autodiff;
pub mod config;
pub mod domain;
pub mod ekf;
pub mod error;
pub mod experiment;
pub mod gan;
pub mod metrics;
pub mod neural;
pub mod physics;
pub mod solvers;
pub mod training;
pub mod trajectory;

pub use error::{Error, Result};
