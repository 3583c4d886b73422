//! Numerical laboratory for manifold-constrained Sobolev maps.
//!
//! Cubical skeletons, singular projections onto spheres and the torus,
//! energy quadrature, and the uncross-then-shrink pipeline.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod diffeo;
pub mod energy;
pub mod error;
pub mod fields;
pub mod geom;
pub mod grid;
pub mod io;
pub mod project;
pub mod rng;
pub mod scalar;
pub mod sets;
pub mod shrink;
pub mod targets;
pub mod uncross;

pub use error::{Error, Result};
pub use scalar::Real;

/// Points in double precision, the working type of the pipeline layers.
pub type Point = Vec<f64>;
pub type Point32 = Vec<f32>;
