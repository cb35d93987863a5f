//! Visual-inertial sliding-window filtering with unobservable-subspace
//! auditing and covariance alignment.

pub mod alignment;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod filter;
pub mod geometry;
pub mod linalg;
pub mod observability;
pub mod propagation;
pub mod simulator;
pub mod state;
pub mod vision;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Result, SwfError};
