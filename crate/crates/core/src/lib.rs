//! Numerical laboratory for spectral-gap stability of one-dimensional
//! quotient diffusions.

pub mod distances;
pub mod error;
pub mod harness;
pub mod measure;
pub mod model;
pub mod perturb;
pub mod quadrature;
pub mod spectral;
pub mod stein;
pub mod targets;

pub use error::{LabError, Result};
pub use measure::{build_measure, compute_v, QuotientMeasure};
pub use model::{DiffusionSpec, EndpointBehavior};
