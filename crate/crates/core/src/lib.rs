//! Structural nested mean models in continuous time.
//!
//! Estimates the effect of the timing of treatment initiation on an end-of-study
//! outcome from irregularly spaced longitudinal data. The estimators combine a
//! time-dependent proportional hazards model for initiation, a working model
//! for the treatment-free outcome mean and inverse probability of censoring
//! weights; the estimating equations stay unbiased when either of the first
//! two models is right.

pub mod cox;
pub mod data;
pub mod discrete;
pub mod error;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod regression;
pub mod rng;
pub mod simgen;
pub mod snmm;

pub use error::{Error, Result};
