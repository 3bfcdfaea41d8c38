//! Transformer blocks with a persistent read/write retention memory.
//!
//! Everything in this crate is pure computation over [`Matrix`] values and
//! runs without `std`; file formats and the command-line front end live in
//! the `retention` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attention;
pub mod error;
pub mod gradcheck;
pub mod matrix;
pub mod model;
pub mod numeric;
pub mod reference;
pub mod retention;
pub mod rng;
pub mod tape;
pub mod task;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use rng::Rng;
