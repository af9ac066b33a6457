pub mod executor;
pub mod explain;
pub mod failure;
pub mod judge;
pub mod model;
pub mod neighborhood;
pub mod protocol;
pub mod provider;
pub mod scalar;
pub mod seed;
pub mod step_format;
pub mod text;
pub mod whitebox;

pub use scalar::{Rational, Scalar};
