//! Causal inference for distribution-valued outcomes under continuous
//! treatments.
//!
//! Each unit's outcome is a probability distribution, stored as its quantile
//! function on a fixed grid. The crate estimates distributional average
//! potential outcomes (the Wasserstein barycenter of the potential outcome
//! distributions at a treatment level) with kernel-smoothed doubly robust,
//! inverse-propensity and double machine learning estimators, cross-fitted
//! neural nuisance models, plug-in bandwidth selection and uniform
//! confidence bands from simulated Gaussian processes.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod cnf;
pub mod dataset;
pub mod distspace;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod io;
pub mod kernels;
pub mod nfr;
pub mod nncore;
pub mod simlab;

pub use error::{Error, Result};
