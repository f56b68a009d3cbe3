//! Federated low-rank adaptation of a small frozen vision-language classifier.
//!
//! Everything here is `no_std` + `alloc`; file formats, configuration files
//! and the command line live in the `fedlora` crate.

#![no_std]
// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adapters;
pub mod data;
mod error;
pub mod federation;
pub mod layers;
pub mod linalg;
pub mod metrics;
pub mod model;

pub use error::{Error, Result};
