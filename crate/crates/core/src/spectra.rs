//! Hessian spectra by power iteration on finite-difference Hessian-vector
//! products.

use crate::diffcore::{loss_and_grad, Batch, ModelSpec, ParamVector};
use crate::error::{Error, Result};
use crate::synthdata::GroupedDataset;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// `(g(theta + h v/|v|) - g(theta - h v/|v|)) / 2h * |v|` for an arbitrary gradient map.
pub fn hvp_with<G>(grad: G, params: &ParamVector, v: &ParamVector, h: f64) -> Result<ParamVector>
where
    G: Fn(&ParamVector) -> Result<ParamVector>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let norm = v.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::InvalidArgument("direction must be nonzero".into()));
    }
    let step = h / norm;
    let up = grad(&params.add_scaled(step, v))?;
    let down = grad(&params.add_scaled(-step, v))?;
    let out = up.add_scaled(-1.0, &down).scaled(norm / (2.0 * h));
    if !out.is_finite() {
        return Err(Error::NonFinite("Hessian-vector product"));
    }
    Ok(out)
}

/// Default finite-difference step `1e-4 * (1 + |theta|)`.
pub fn default_hvp_step(params: &ParamVector) -> f64 {
    1e-4 * (1.0 + params.norm())
}

/// Hessian-vector product of the mean cross-entropy on `batch`.
pub fn hvp(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    v: &ParamVector,
    h: f64,
) -> Result<ParamVector> {
    hvp_with(|p| loss_and_grad(spec, p, batch).map(|(_, g)| g), params, v, h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumConfig {
    /// Number of leading eigenvalues, 1 or 2.
    pub k: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Finite-difference step; `None` uses [`default_hvp_step`].
    pub h: Option<f64>,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self {
            k: 2,
            tol: 1e-6,
            max_iter: 1000,
            seed: 0,
            h: None,
        }
    }
}

/// Leading eigenvalues of one Hessian, ordered by magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEntry {
    pub largest_eig: f64,
    pub second_eig: Option<f64>,
    pub iteration_counts: Vec<usize>,
    /// `|H v - lambda v|` for each unit eigenvector estimate.
    pub residuals: Vec<f64>,
    pub converged: bool,
    #[serde(skip)]
    pub vectors: Vec<ParamVector>,
}

impl SpectrumEntry {
    pub fn eigenvalues(&self) -> Vec<f64> {
        std::iter::once(self.largest_eig).chain(self.second_eig).collect()
    }

    /// Turns a flagged non-converged estimate into an error.
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NonConvergence {
                iterations: self.iteration_counts.iter().copied().max().unwrap_or(0),
                estimate: self.largest_eig,
            })
        }
    }
}

fn normalize(v: &ParamVector) -> ParamVector {
    v.scaled(1.0 / v.norm())
}

fn project_out(v: &ParamVector, basis: &[ParamVector]) -> ParamVector {
    let mut out = v.clone();
    for u in basis {
        let c = out.dot(u);
        out.axpy(-c, u);
    }
    out
}

struct Estimate {
    value: f64,
    vector: ParamVector,
    iterations: usize,
    residual: f64,
    converged: bool,
}

fn power_iterate<H>(
    apply: &H,
    start: ParamVector,
    deflate: &[ParamVector],
    tol: f64,
    max_iter: usize,
) -> Result<Estimate>
where
    H: Fn(&ParamVector) -> Result<ParamVector>,
{
    let mut v = normalize(&project_out(&start, deflate));
    let mut hv = project_out(&apply(&v)?, deflate);
    let mut rq = v.dot(&hv);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        let n = hv.norm();
        if !(n > 0.0) {
            // v lies in the null space of the deflated operator
            converged = true;
            break;
        }
        v = normalize(&project_out(&hv, deflate));
        hv = project_out(&apply(&v)?, deflate);
        let next = v.dot(&hv);
        let delta = (next - rq).abs();
        rq = next;
        if delta < tol {
            converged = true;
            break;
        }
    }
    let residual = hv.add_scaled(-rq, &v).norm();
    Ok(Estimate {
        value: rq,
        vector: v,
        iterations,
        residual,
        converged,
    })
}

/// Top-`k` (k = 1 or 2) eigenvalues of a symmetric operator by power
/// iteration; the second comes from iterating with the first direction
/// projected out.
pub fn top_eigs_of<H>(apply: H, dim: usize, cfg: &SpectrumConfig) -> Result<SpectrumEntry>
where
    H: Fn(&ParamVector) -> Result<ParamVector>,
{
    if !(cfg.k == 1 || cfg.k == 2) {
        return Err(Error::InvalidArgument(format!("k must be 1 or 2, got {}", cfg.k)));
    }
    if !(cfg.tol > 0.0) {
        return Err(Error::InvalidArgument("tol must be positive".into()));
    }
    if dim < cfg.k {
        return Err(Error::InvalidArgument(format!(
            "cannot extract {} eigenvalues from dimension {dim}",
            cfg.k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut random_start = || {
        ParamVector::from_values((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
    };
    let first = power_iterate(&apply, random_start(), &[], cfg.tol, cfg.max_iter)?;
    let mut entry = SpectrumEntry {
        largest_eig: first.value,
        second_eig: None,
        iteration_counts: vec![first.iterations],
        residuals: vec![first.residual],
        converged: first.converged,
        vectors: vec![first.vector],
    };
    if cfg.k == 2 {
        let basis = [entry.vectors[0].clone()];
        let second = power_iterate(&apply, random_start(), &basis, cfg.tol, cfg.max_iter)?;
        entry.second_eig = Some(second.value);
        entry.iteration_counts.push(second.iterations);
        entry.residuals.push(second.residual);
        entry.converged &= second.converged;
        entry.vectors.push(second.vector);
    }
    if !entry.converged {
        log::warn!(
            "power iteration stopped after {:?} iterations without converging",
            entry.iteration_counts
        );
    }
    Ok(entry)
}

/// Leading Hessian eigenvalues of the mean cross-entropy on `batch`.
pub fn top_eigs(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    cfg: &SpectrumConfig,
) -> Result<SpectrumEntry> {
    let h = cfg.h.unwrap_or_else(|| default_hvp_step(params));
    let mut entry = top_eigs_of(|v| hvp(spec, params, batch, v, h), params.len(), cfg)?;
    for v in &mut entry.vectors {
        v.layout = params.layout.clone();
    }
    Ok(entry)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpectrum {
    pub group: usize,
    pub name: String,
    pub n_examples: usize,
    #[serde(flatten)]
    pub entry: SpectrumEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub per_group: Vec<GroupSpectrum>,
    pub pooled: SpectrumEntry,
}

impl SpectrumReport {
    /// Largest top eigenvalue over groups, i.e. the sharpest group.
    pub fn worst_group_largest(&self) -> f64 {
        self.per_group
            .iter()
            .map(|g| g.entry.largest_eig)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Spectra of the unweighted training loss of every group and of the whole set.
pub fn per_group_spectrum(
    spec: &ModelSpec,
    params: &ParamVector,
    dataset: &GroupedDataset,
    cfg: &SpectrumConfig,
) -> Result<SpectrumReport> {
    let mut per_group = Vec::with_capacity(dataset.num_groups());
    for g in 0..dataset.num_groups() {
        let batch = dataset.group_batch(g)?;
        let entry = top_eigs(spec, params, &batch, cfg)?;
        per_group.push(GroupSpectrum {
            group: g,
            name: dataset.group_names[g].clone(),
            n_examples: batch.len(),
            entry,
        });
    }
    let pooled = top_eigs(spec, params, &dataset.as_batch()?, cfg)?;
    Ok(SpectrumReport { per_group, pooled })
}
