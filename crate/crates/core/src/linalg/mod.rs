//! Dense matrices and seeded random streams.

mod matrix;
mod rng;

pub use matrix::{gaussian_matrix, Matrix};
pub use rng::{tag, RngStream};
