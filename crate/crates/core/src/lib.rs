//! Constructive extension operator for the Sobolev space `L^{2,p}(R^2)`,
//! `1 < p < 2`, on a planar point set with binary fractal structure.
//!
//! Pipeline, bottom-up:
//!
//! * [`fractal_set`]: the point set `E = E1 ∪ E2` in exact coordinates.
//! * [`cz`]: dyadic stopping-rule decomposition of `[-4,4)^2`, neighbor
//!   graph, square types and anchor points.
//! * [`pou`]: C² Whitney bumps and the normalized partition of unity.
//! * [`clustering`]: the binary cluster tree over `E2` with its ball system.
//! * [`tree`]: weighted `l^p` tree seminorm and its exact minimizer.
//! * [`interpolant`]: affine pieces, the patched extension, its seminorm.
//! * [`oracle`]: grid-based minimal extensions and analytic test functions.
//! * [`experiment`]: sweeps, verification suite and CSV/SVG reports.

pub mod clustering;
pub mod cz;
pub mod error;
pub mod experiment;
pub mod fractal_set;
pub mod interpolant;
pub mod lattice;
pub mod oracle;
pub mod pou;
pub mod quadrature;
pub mod svg;
pub mod tree;

pub use error::{Error, Result};

/// A point of the plane in floating point.
pub type Point = [f64; 2];
