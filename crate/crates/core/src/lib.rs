//! Marginal regression for crossover designs with repeated measures within
//! each period.
//!
//! The crate fits generalized estimating equations where each subject
//! contributes P periods of L repeated measures, the working correlation can
//! separate between-period and within-period dependence as a Kronecker
//! product Ψ ⊗ R₁, coefficient inference uses the robust sandwich
//! covariance, and competing correlation structures are ranked by QIC. A
//! Monte-Carlo module reproduces structure-selection, coverage, and
//! consistency experiments on simulated crossover data.

pub mod cli;
pub mod correlation;
pub mod design;
pub mod engine;
pub mod error;
pub mod expfam;
pub mod selection;
pub mod simulation;

pub use error::{Error, Result};
