//! Sharpness-aware group distributionally robust optimization.
//!
//! The crate bundles a small differentiable MLP core ([`diffcore`]), adversarial
//! weight perturbations ([`sharpness`]), the ERM / SAM / ASAM / GDRO / ASGDRO
//! steppers behind a name-indexed registry ([`robust_opt`]), a two-parameter
//! toy landscape study ([`landscape`]), synthetic spurious-correlation
//! benchmarks ([`synthdata`]), Hessian spectra ([`spectra`]) and an experiment
//! driver ([`harness`]).

pub mod diffcore;
pub mod error;
pub mod harness;
pub mod landscape;
pub mod robust_opt;
pub mod sharpness;
pub mod spectra;
pub mod synthdata;

pub use error::{Error, Result};
