//! Sparse variational Gaussian processes for compositional kernels.
//!
//! A pool of interpretable product kernels `k_i` is combined as
//! `k̃ = Σ w_i² k_i`. [`multisvgp`] attaches one inducing group to each
//! kernel, [`horseshoe`] places a Horseshoe shrinkage prior over the weights,
//! and [`trainer`] maximizes the resulting ELBO. [`gp_exact`] provides the
//! dense reference model and [`bound`] checks the KL approximation bound
//! numerically.

pub mod bound;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gp_exact;
pub mod horseshoe;
pub mod kernel;
pub mod linalg;
pub mod multisvgp;
pub mod pipeline;
pub mod quadrature;
pub mod report;
pub mod trainer;

pub use error::{Error, Result};
