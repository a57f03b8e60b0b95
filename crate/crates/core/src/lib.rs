//! Targeted estimation of treatment and interaction effects for categorical
//! treatments, with sieve-plateau variance correction for related samples.

pub mod config;
pub mod data;
pub mod error;
pub mod estimand;
pub mod inference;
pub mod learners;
pub mod linalg;
pub mod pipeline;
pub mod relatedness;
pub mod runner;
pub mod simulation;
pub mod targeting;

pub use error::{Error, Result};
