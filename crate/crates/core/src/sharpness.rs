//! Adversarial weight perturbations for sharpness-aware training.
//!
//! The plain direction scales the gradient onto the radius-`rho` sphere. The
//! adaptive direction rescales it through the diagonal operator
//! `T = diag(|theta_i| + xi)`, giving `eps = rho * T^2 g / ||T g||`, so the
//! radius is measured in the parameter-relative norm `||T^-1 eps||`.

use crate::diffcore::ParamVector;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Norm threshold below which no ascent direction exists.
pub const ZERO_GRADIENT_THRESHOLD: f64 = 1e-12;

pub const DEFAULT_XI: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Normalizer {
    /// Euclidean ball (SAM).
    None,
    /// Elementwise parameter-magnitude scaling (ASAM).
    #[default]
    Elementwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub rho: f64,
    pub normalizer: Normalizer,
    pub xi: f64,
}

impl PerturbConfig {
    pub fn sam(rho: f64) -> Self {
        Self {
            rho,
            normalizer: Normalizer::None,
            xi: DEFAULT_XI,
        }
    }

    pub fn asam(rho: f64, xi: f64) -> Self {
        Self {
            rho,
            normalizer: Normalizer::Elementwise,
            xi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(Error::InvalidArgument(format!("rho must be >= 0, got {}", self.rho)));
        }
        if !(self.xi >= 0.0) || !self.xi.is_finite() {
            return Err(Error::InvalidArgument(format!("xi must be >= 0, got {}", self.xi)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub epsilon: ParamVector,
    /// Radius in the norm the ball is defined in (`rho`).
    pub ascent_norm: f64,
}

impl Perturbation {
    pub fn zero(like: &ParamVector) -> Self {
        Self {
            epsilon: like.zeros_like(),
            ascent_norm: 0.0,
        }
    }
}

/// `eps = rho * g / ||g||`.
pub fn sam_perturbation(grad: &ParamVector, cfg: &PerturbConfig) -> Result<Perturbation> {
    cfg.validate()?;
    let norm = grad.norm();
    if !(norm >= ZERO_GRADIENT_THRESHOLD) {
        return Err(Error::ZeroGradient(norm));
    }
    Ok(Perturbation {
        epsilon: grad.scaled(cfg.rho / norm),
        ascent_norm: cfg.rho,
    })
}

/// Diagonal of the normalization operator, `|theta_i| + xi`.
pub fn normalization_diagonal(params: &ParamVector, xi: f64) -> Vec<f64> {
    params.values.iter().map(|t| t.abs() + xi).collect()
}

/// `eps = rho * T^2 g / ||T g||` with `T = diag(|theta_i| + xi)`.
pub fn asam_perturbation(
    params: &ParamVector,
    grad: &ParamVector,
    cfg: &PerturbConfig,
) -> Result<Perturbation> {
    cfg.validate()?;
    if params.len() != grad.len() {
        return Err(Error::ShapeMismatch(format!(
            "params have {} entries, gradient {}",
            params.len(),
            grad.len()
        )));
    }
    let t = normalization_diagonal(params, cfg.xi);
    let tg_norm = t
        .iter()
        .zip(&grad.values)
        .map(|(ti, gi)| (ti * gi) * (ti * gi))
        .sum::<f64>()
        .sqrt();
    if !(tg_norm >= ZERO_GRADIENT_THRESHOLD) {
        return Err(Error::ZeroGradient(tg_norm));
    }
    let scale = cfg.rho / tg_norm;
    let values = t
        .iter()
        .zip(&grad.values)
        .map(|(ti, gi)| scale * ti * ti * gi)
        .collect();
    Ok(Perturbation {
        epsilon: ParamVector {
            values,
            layout: grad.layout.clone(),
        },
        ascent_norm: cfg.rho,
    })
}

/// Dispatches on the configured normalizer.
pub fn perturbation(
    params: &ParamVector,
    grad: &ParamVector,
    cfg: &PerturbConfig,
) -> Result<Perturbation> {
    match cfg.normalizer {
        Normalizer::None => sam_perturbation(grad, cfg),
        Normalizer::Elementwise => asam_perturbation(params, grad, cfg),
    }
}

/// Like [`perturbation`] but degrades a vanishing gradient (or `rho = 0`) to a
/// zero perturbation.
pub fn perturbation_or_zero(
    params: &ParamVector,
    grad: &ParamVector,
    cfg: &PerturbConfig,
) -> Result<Perturbation> {
    if cfg.rho == 0.0 {
        cfg.validate()?;
        return Ok(Perturbation::zero(params));
    }
    match perturbation(params, grad, cfg) {
        Err(Error::ZeroGradient(_)) => Ok(Perturbation::zero(params)),
        other => other,
    }
}

/// `||T^-1 eps||_2`, the radius the adaptive perturbation is normalized to.
pub fn normalized_norm(params: &ParamVector, eps: &ParamVector, xi: f64) -> f64 {
    normalization_diagonal(params, xi)
        .iter()
        .zip(&eps.values)
        .map(|(t, e)| (e / t) * (e / t))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_values(v.to_vec())
    }

    #[test]
    fn sam_unit_scaling() {
        let p = sam_perturbation(&pv(&[3.0, 4.0]), &PerturbConfig::sam(1.0)).unwrap();
        assert!((p.epsilon.values[0] - 0.6).abs() < 1e-15);
        assert!((p.epsilon.values[1] - 0.8).abs() < 1e-15);
        assert_eq!(p.ascent_norm, 1.0);

        let p = sam_perturbation(&pv(&[1.0; 4]), &PerturbConfig::sam(0.5)).unwrap();
        assert!(p.epsilon.values.iter().all(|&e| (e - 0.25).abs() < 1e-15));
    }

    #[test]
    fn zero_gradient_is_reported() {
        assert!(matches!(
            sam_perturbation(&pv(&[0.0, 0.0]), &PerturbConfig::sam(1.0)),
            Err(Error::ZeroGradient(_))
        ));
        assert!(matches!(
            asam_perturbation(&pv(&[1.0, 1.0]), &pv(&[0.0, 0.0]), &PerturbConfig::asam(1.0, 0.1)),
            Err(Error::ZeroGradient(_))
        ));
        let z = perturbation_or_zero(&pv(&[1.0, 1.0]), &pv(&[0.0, 0.0]), &PerturbConfig::sam(1.0))
            .unwrap();
        assert_eq!(z.epsilon.values, vec![0.0, 0.0]);
    }

    #[test]
    fn asam_two_coordinate_example() {
        // T = diag(1.1, 0.1); eps = (1.21, 0.01) / sqrt(1.22)
        let p = asam_perturbation(&pv(&[1.0, 0.0]), &pv(&[1.0, 1.0]), &PerturbConfig::asam(1.0, 0.1))
            .unwrap();
        assert!((p.epsilon.values[0] - 1.095_482_527_114_474_2).abs() < 1e-12);
        assert!((p.epsilon.values[1] - 0.009_053_574_604_251_853).abs() < 1e-12);
        let n = normalized_norm(&pv(&[1.0, 0.0]), &p.epsilon, 0.1);
        assert!((n - 1.0).abs() < 1e-10);
    }

    #[test]
    fn asam_reduces_to_scaled_sam_for_constant_magnitudes() {
        let g = pv(&[0.3, -1.2, 2.0, 0.7]);
        let theta = pv(&[2.5, -2.5, 2.5, 2.5]);
        let a = asam_perturbation(&theta, &g, &PerturbConfig::asam(0.4, 0.0)).unwrap();
        let s = sam_perturbation(&g, &PerturbConfig::sam(0.4)).unwrap();
        for (x, y) in a.epsilon.values.iter().zip(&s.epsilon.values) {
            assert!((x - 2.5 * y).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_rho_is_rejected() {
        assert!(sam_perturbation(&pv(&[1.0]), &PerturbConfig::sam(-0.1)).is_err());
        assert!(asam_perturbation(&pv(&[1.0]), &pv(&[1.0]), &PerturbConfig::asam(0.1, -1.0)).is_err());
    }
}
