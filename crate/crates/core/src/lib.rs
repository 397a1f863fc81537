//! Hyperbolic graph-convolution recommender over heterogeneous collaborative graphs.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod hcg;
pub mod mat;
pub mod model;
pub mod real;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use mat::Mat;
