//! Global jump filtering and quasi-likelihood analysis for the volatility
//! parameter of a discretely observed jump diffusion.
//!
//! The numerical core is generic over the floating point type ([`Scalar`]);
//! likelihood derivatives are obtained by evaluating the same code in
//! third-order Taylor jets ([`Taylor3`]).

pub mod csvio;
pub mod estimate;
pub mod filter;
pub mod harness;
pub mod likelihood;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod scalar;
pub mod simulate;
pub mod statdist;

pub use scalar::{Real, Scalar, Taylor3};

pub type Path = model::SamplePath<f64>;
pub type Path32 = model::SamplePath<f32>;
