//! Instance optimization for dense deformable image registration.
//!
//! Two displacement fields (`u_mov`, `u_fix`) are optimized directly for a
//! single image pair under a symmetric LNCC similarity and a gradient
//! inverse-consistency regularizer. The similarity and regularity gradients
//! are combined either by plain weighted summation or by random gradient
//! projection whenever they conflict.
//!
//! Axis convention: every 3-vector (dims, spacing, points, displacement
//! components) is ordered by array axis, slowest first. Axis 2 is the
//! contiguous one in memory.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod moo;
pub mod objectives;
pub mod phantom;

pub use error::{Error, Result};
pub use grid::{DisplacementField, JacobianField, Volume};
pub use metrics::{LabelMap, LandmarkSet, MetricsReport};
pub use moo::{GpConfig, Mode, ProjectionVariant, StepLog, Victim};
pub use objectives::{GradientPair, LossBreakdown};
pub use phantom::PhantomPair;
