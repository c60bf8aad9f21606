//! Optimizer steppers for ERM, SAM, ASAM, GDRO and ASGDRO.
//!
//! Every stepper is a pure transition: parameters and group weights in, new
//! parameters and group weights out. The [`registry`] exposes them behind a
//! common [`Algorithm`] trait selected by name.

mod registry;
mod steps;

pub use registry::{Algorithm, AlgorithmRegistry, Sampling, StepOutcome};
pub use steps::{asam_step, asgdro_step, erm_step, gdro_step, sam_step};

use crate::error::{Error, Result};
use crate::sharpness::{Normalizer, PerturbConfig, DEFAULT_XI};
use serde::{Deserialize, Serialize};

/// Hyperparameters shared by every stepper.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DroConfig {
    /// Learning rate.
    pub eta: f64,
    /// Robust step size of the exponentiated group-weight update.
    pub gamma: f64,
    /// Neighborhood radius of the ascent step.
    pub rho: f64,
    pub normalizer: Normalizer,
    pub xi: f64,
    /// Group adjustment coefficient; losses become `L_g + C / sqrt(n_g)`.
    pub adjustment_c: f64,
    /// Training-set size of each group; required when `adjustment_c > 0`.
    pub group_counts: Vec<usize>,
    /// Optional norm clip applied to the descent gradient only.
    pub clip_norm: Option<f64>,
}

impl Default for DroConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            gamma: 0.01,
            rho: 0.05,
            normalizer: Normalizer::Elementwise,
            xi: DEFAULT_XI,
            adjustment_c: 0.0,
            group_counts: Vec::new(),
            clip_norm: None,
        }
    }
}

impl DroConfig {
    pub fn perturb(&self) -> PerturbConfig {
        PerturbConfig {
            rho: self.rho,
            normalizer: self.normalizer,
            xi: self.xi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.adjustment_c >= 0.0) || !self.adjustment_c.is_finite() {
            return Err(Error::Config(format!(
                "adjustment_c must be >= 0, got {}",
                self.adjustment_c
            )));
        }
        if self.adjustment_c > 0.0 && self.group_counts.iter().any(|&n| n == 0) {
            return Err(Error::Config("group_counts must all be >= 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be > 0, got {c}")));
            }
        }
        self.perturb().validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// Group weights on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupWeightState {
    pub lambdas: Vec<f64>,
}

impl GroupWeightState {
    pub fn uniform(groups: usize) -> Self {
        Self {
            lambdas: vec![1.0 / groups as f64; groups],
        }
    }

    pub fn new(lambdas: Vec<f64>) -> Result<Self> {
        let s = Self { lambdas };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() {
            return Err(Error::InvalidArgument("no groups".into()));
        }
        if self.lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::InvalidArgument("group weights must be nonnegative".into()));
        }
        let sum: f64 = self.lambdas.iter().sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidArgument(format!("group weights sum to {sum}")));
        }
        Ok(())
    }
}

/// Per-step intermediates of the group-robust steppers.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    /// Pooled loss at the unperturbed parameters.
    pub erm_loss_at_theta: f64,
    /// Group losses at the shared perturbed point, after the optional adjustment.
    pub per_group_loss_at_perturbed: Vec<f64>,
    /// Group losses at the perturbed point before adjustment.
    pub raw_group_loss_at_perturbed: Vec<f64>,
    /// The single perturbation shared by every group.
    pub epsilon: Vec<f64>,
    pub epsilon_l2_norm: f64,
    pub lambdas_after: Vec<f64>,
    pub worst_group_index: usize,
}

/// Exponentiated-weights update `lambda_g <- lambda_g exp(gamma L_g)`, renormalized.
pub fn update_group_weights(
    state: &GroupWeightState,
    group_losses: &[f64],
    gamma: f64,
) -> Result<GroupWeightState> {
    if group_losses.len() != state.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} group losses for {} group weights",
            group_losses.len(),
            state.len()
        )));
    }
    if group_losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("group losses"));
    }
    // exp is shift invariant after normalization; shift by the max to avoid overflow.
    let shift = group_losses
        .iter()
        .map(|l| gamma * l)
        .fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = state
        .lambdas
        .iter()
        .zip(group_losses)
        .map(|(lam, l)| lam * (gamma * l - shift).exp())
        .collect();
    let total: f64 = unnorm.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::NonFinite("group weight normalization"));
    }
    Ok(GroupWeightState {
        lambdas: unnorm.into_iter().map(|u| u / total).collect(),
    })
}

/// `raw + C / sqrt(n_g)`.
pub fn adjusted_group_loss(raw: f64, n_g: usize, c: f64) -> f64 {
    if c == 0.0 {
        return raw;
    }
    raw + c / (n_g as f64).sqrt()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_losses_or_zero_gamma_leave_weights_unchanged() {
        let s = GroupWeightState::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let a = update_group_weights(&s, &[0.7; 4], 3.0).unwrap();
        let b = update_group_weights(&s, &[0.1, 5.0, 2.0, 0.0], 0.0).unwrap();
        for (x, y) in a.lambdas.iter().zip(&s.lambdas) {
            assert!((x - y).abs() < 1e-15);
        }
        for (x, y) in b.lambdas.iter().zip(&s.lambdas) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn ln2_step_doubles_relative_weight() {
        let s = GroupWeightState::uniform(2);
        let out = update_group_weights(&s, &[1.0, 0.0], std::f64::consts::LN_2).unwrap();
        assert!((out.lambdas[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((out.lambdas[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn huge_losses_do_not_overflow() {
        let s = GroupWeightState::uniform(3);
        let out = update_group_weights(&s, &[1e6, 1e6 - 1.0, 0.0], 10.0).unwrap();
        assert!(out.lambdas.iter().all(|l| l.is_finite()));
        assert!((out.lambdas.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(out.lambdas[0] > 0.99);
    }

    #[test]
    fn update_rejects_bad_inputs() {
        let s = GroupWeightState::uniform(2);
        assert!(update_group_weights(&s, &[1.0], 1.0).is_err());
        assert!(update_group_weights(&s, &[f64::NAN, 1.0], 1.0).is_err());
        assert!(GroupWeightState::new(vec![0.5, 0.6]).is_err());
        assert!(GroupWeightState::new(vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn adjustment_examples() {
        assert_eq!(adjusted_group_loss(0.42, 9, 0.0), 0.42);
        assert!((adjusted_group_loss(1.0, 4, 2.0) - 2.0).abs() < 1e-15);
        assert!((adjusted_group_loss(0.3, 100, 3.0) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_lowest(&[0.5, 0.5]), 0);
    }

    #[test]
    fn config_validation() {
        let mut c = DroConfig::default();
        assert!(c.validate().is_ok());
        c.eta = 0.0;
        assert!(c.validate().is_err());
        let c = DroConfig {
            adjustment_c: 1.0,
            group_counts: vec![3, 0],
            ..DroConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
