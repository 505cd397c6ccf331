//! Stochastic block majorization-minimization (SBMM) over box constraints with
//! Markovian data streams.
//!
//! Parameters are flat `Vec<f64>` vectors. Matrix parameters are stored
//! row-major, CP dictionaries as the concatenation of their loading matrices.

pub mod bench;
pub mod engine;
pub mod error;
pub mod factorize;
pub mod geometry;
pub mod par;
pub mod quadform;
pub mod schedule;
pub mod stream;
pub mod subsolver;

pub use error::{Error, Result};
