//! Gaussian belief propagation for bundle adjustment.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod dataset;
pub mod engine;
pub mod experiments;
pub mod graph;
pub mod info_gaussian;
pub mod oracle;

pub use camera::{Intrinsics, Pose};
pub use dataset::ProblemSpec;
pub use engine::{iterate, solve, ScheduleParams, SolveReport};
pub use graph::{FactorGraph, GraphConfig};
pub use info_gaussian::InfoGaussian;
