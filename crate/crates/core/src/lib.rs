//! Flows in planar domains perforated by many small disks.
//!
//! The crate provides the method of reflections, a multipole collocation
//! oracle for the exact perforated problem, the homogenized elliptic problem
//! with effective matrix `I + k M`, vortex-particle transport for both
//! settings, and the error functionals used to measure convergence rates.

// Negated comparisons deliberately reject NaN parameters.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod error;
pub mod euler;
pub mod experiments;
pub mod fft;
pub mod geometry;
pub mod grid;
pub mod homogenized;
pub mod oracle;
pub mod potential;
pub mod reflections;

pub use error::{Error, Result};
pub use grid::{perp, GridSpec, Rect, ScalarGridField, Vec2, VectorGridField};
