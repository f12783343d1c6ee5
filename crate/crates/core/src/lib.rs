//! Robust moving horizon estimation for uncertain nonlinear systems using
//! point-wise integral quadratic constraints.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod detect;
pub mod iqc;
pub mod mhe;
pub mod model;
pub mod numkit;
pub mod sdp;
pub mod sim;

pub use model::{BoxSet, Controller, LipschitzEnvelope, Plant, PlantDims, Scenario, Uncertainty};
pub use numkit::{Matrix, SymMatrix, Vector};
