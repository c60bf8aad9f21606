use super::{
    adjusted_group_loss, argmax_lowest, update_group_weights, DroConfig, GroupWeightState,
    StepDiagnostics,
};
use crate::diffcore::{loss_and_grad, Batch, ModelSpec, ParamVector};
use crate::error::{Error, Result};
use crate::sharpness::{perturbation_or_zero, Normalizer, PerturbConfig};

fn clip(mut grad: ParamVector, threshold: Option<f64>) -> ParamVector {
    if let Some(c) = threshold {
        let n = grad.norm();
        if n > c {
            grad = grad.scaled(c / n);
        }
    }
    grad
}

fn descend(params: &ParamVector, direction: ParamVector, cfg: &DroConfig) -> Result<ParamVector> {
    let next = params.add_scaled(-cfg.eta, &clip(direction, cfg.clip_norm));
    if !next.is_finite() {
        return Err(Error::NonFinite("parameter update"));
    }
    Ok(next)
}

/// Plain gradient step `theta - eta * grad L(theta)`.
pub fn erm_step(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    cfg: &DroConfig,
) -> Result<ParamVector> {
    let (_, grad) = loss_and_grad(spec, params, batch)?;
    descend(params, grad, cfg)
}

fn sharpness_step(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    cfg: &DroConfig,
    perturb: PerturbConfig,
) -> Result<ParamVector> {
    let (_, grad) = loss_and_grad(spec, params, batch)?;
    let eps = perturbation_or_zero(params, &grad, &perturb)?;
    let perturbed = params.add_scaled(1.0, &eps.epsilon);
    let (_, grad_at_perturbed) = loss_and_grad(spec, &perturbed, batch)?;
    descend(params, grad_at_perturbed, cfg)
}

/// SAM: gradient at `theta + rho g / ||g||`, applied at `theta`.
pub fn sam_step(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    cfg: &DroConfig,
) -> Result<ParamVector> {
    let perturb = PerturbConfig {
        normalizer: Normalizer::None,
        ..cfg.perturb()
    };
    sharpness_step(spec, params, batch, cfg, perturb)
}

/// ASAM: like SAM with the elementwise-normalized perturbation.
pub fn asam_step(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    cfg: &DroConfig,
) -> Result<ParamVector> {
    let perturb = PerturbConfig {
        normalizer: Normalizer::Elementwise,
        ..cfg.perturb()
    };
    sharpness_step(spec, params, batch, cfg, perturb)
}

fn pooled(group_batches: &[Batch]) -> Result<std::borrow::Cow<'_, Batch>> {
    match group_batches {
        [] => Err(Error::InvalidArgument("at least one group batch required".into())),
        [only] => Ok(std::borrow::Cow::Borrowed(only)),
        many => Ok(std::borrow::Cow::Owned(Batch::concat(many)?)),
    }
}

fn robust_step(
    spec: &ModelSpec,
    params: &ParamVector,
    group_batches: &[Batch],
    state: &GroupWeightState,
    cfg: &DroConfig,
    with_perturbation: bool,
) -> Result<(ParamVector, GroupWeightState, StepDiagnostics)> {
    cfg.validate()?;
    state.validate()?;
    if group_batches.len() != state.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} group batches for {} group weights",
            group_batches.len(),
            state.len()
        )));
    }
    if cfg.adjustment_c > 0.0 && cfg.group_counts.len() != state.len() {
        return Err(Error::Config(format!(
            "group adjustment needs {} group counts, got {}",
            state.len(),
            cfg.group_counts.len()
        )));
    }

    // (1) pooled loss over the union of the group batches
    let union = pooled(group_batches)?;
    let (erm_loss, pooled_grad) = loss_and_grad(spec, params, &union)?;

    // (2) one perturbation shared by all groups
    let eps = if with_perturbation {
        perturbation_or_zero(params, &pooled_grad, &cfg.perturb())?
    } else {
        crate::sharpness::Perturbation::zero(params)
    };
    let perturbed = params.add_scaled(1.0, &eps.epsilon);

    // (3) group losses and gradients at the shared perturbed point
    let mut raw = Vec::with_capacity(group_batches.len());
    let mut grads = Vec::with_capacity(group_batches.len());
    for b in group_batches {
        let (l, g) = loss_and_grad(spec, &perturbed, b)?;
        raw.push(l);
        grads.push(g);
    }
    let adjusted: Vec<f64> = if cfg.adjustment_c > 0.0 {
        raw.iter()
            .zip(&cfg.group_counts)
            .map(|(&l, &n)| adjusted_group_loss(l, n, cfg.adjustment_c))
            .collect()
    } else {
        raw.clone()
    };

    // (4) exponentiated weight update
    let next_state = update_group_weights(state, &adjusted, cfg.gamma)?;

    // (5) lambda-weighted descent direction, (6) applied at the original point
    let mut direction = params.zeros_like();
    for (lam, g) in next_state.lambdas.iter().zip(&grads) {
        direction.axpy(*lam, g);
    }
    let next = descend(params, direction, cfg)?;

    let diagnostics = StepDiagnostics {
        erm_loss_at_theta: erm_loss,
        worst_group_index: argmax_lowest(&adjusted),
        per_group_loss_at_perturbed: adjusted,
        raw_group_loss_at_perturbed: raw,
        epsilon_l2_norm: eps.epsilon.norm(),
        epsilon: eps.epsilon.values,
        lambdas_after: next_state.lambdas.clone(),
    };
    Ok((next, next_state, diagnostics))
}

/// One iteration of the sharpness-aware group-robust update.
///
/// The ascent direction comes from the pooled loss over all group batches and
/// is shared by every group. Group losses at the perturbed point drive the
/// exponentiated weight update; the weighted group gradients at the perturbed
/// point are then applied at the original parameters.
pub fn asgdro_step(
    spec: &ModelSpec,
    params: &ParamVector,
    group_batches: &[Batch],
    state: &GroupWeightState,
    cfg: &DroConfig,
) -> Result<(ParamVector, GroupWeightState, StepDiagnostics)> {
    robust_step(spec, params, group_batches, state, cfg, true)
}

/// Online group DRO: [`asgdro_step`] with the perturbation fixed to zero.
pub fn gdro_step(
    spec: &ModelSpec,
    params: &ParamVector,
    group_batches: &[Batch],
    state: &GroupWeightState,
    cfg: &DroConfig,
) -> Result<(ParamVector, GroupWeightState, StepDiagnostics)> {
    robust_step(spec, params, group_batches, state, cfg, false)
}
