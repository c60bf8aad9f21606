use super::{
    asam_step, asgdro_step, erm_step, gdro_step, sam_step, DroConfig, GroupWeightState,
    StepDiagnostics,
};
use crate::diffcore::{Batch, ModelSpec, ParamVector};
use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::sync::Arc;

/// How the training loop should draw batches for an algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Shuffled passes over the training set; one pooled batch per step.
    Uniform,
    /// Group-balanced sampling with replacement; one batch per group per step.
    GroupBalanced,
}

pub struct StepOutcome {
    pub params: ParamVector,
    pub state: GroupWeightState,
    pub diagnostics: Option<StepDiagnostics>,
}

/// A training algorithm that advances `(params, group weights)` by one step.
pub trait Algorithm: Send + Sync {
    fn name(&self) -> &'static str;

    fn sampling(&self) -> Sampling;

    /// Whether the algorithm reads `gamma` / `adjustment_c`.
    fn uses_group_weights(&self) -> bool {
        self.sampling() == Sampling::GroupBalanced
    }

    /// Whether the algorithm reads `rho` / `normalizer` / `xi`.
    fn uses_perturbation(&self) -> bool;

    /// `batches` holds one batch per group for group-balanced algorithms and a
    /// single pooled batch otherwise.
    fn step(
        &self,
        spec: &ModelSpec,
        params: &ParamVector,
        batches: &[Batch],
        state: &GroupWeightState,
        cfg: &DroConfig,
    ) -> Result<StepOutcome>;
}

fn single(batches: &[Batch]) -> Result<std::borrow::Cow<'_, Batch>> {
    match batches {
        [] => Err(Error::InvalidArgument("empty batch list".into())),
        [only] => Ok(std::borrow::Cow::Borrowed(only)),
        many => Ok(std::borrow::Cow::Owned(Batch::concat(many)?)),
    }
}

type PooledFn = fn(&ModelSpec, &ParamVector, &Batch, &DroConfig) -> Result<ParamVector>;
type GroupFn = fn(
    &ModelSpec,
    &ParamVector,
    &[Batch],
    &GroupWeightState,
    &DroConfig,
) -> Result<(ParamVector, GroupWeightState, StepDiagnostics)>;

struct Pooled {
    name: &'static str,
    perturbs: bool,
    step: PooledFn,
}

impl Algorithm for Pooled {
    fn name(&self) -> &'static str {
        self.name
    }

    fn sampling(&self) -> Sampling {
        Sampling::Uniform
    }

    fn uses_perturbation(&self) -> bool {
        self.perturbs
    }

    fn step(
        &self,
        spec: &ModelSpec,
        params: &ParamVector,
        batches: &[Batch],
        state: &GroupWeightState,
        cfg: &DroConfig,
    ) -> Result<StepOutcome> {
        let batch = single(batches)?;
        Ok(StepOutcome {
            params: (self.step)(spec, params, &batch, cfg)?,
            state: state.clone(),
            diagnostics: None,
        })
    }
}

struct GroupRobust {
    name: &'static str,
    perturbs: bool,
    step: GroupFn,
}

impl Algorithm for GroupRobust {
    fn name(&self) -> &'static str {
        self.name
    }

    fn sampling(&self) -> Sampling {
        Sampling::GroupBalanced
    }

    fn uses_perturbation(&self) -> bool {
        self.perturbs
    }

    fn step(
        &self,
        spec: &ModelSpec,
        params: &ParamVector,
        batches: &[Batch],
        state: &GroupWeightState,
        cfg: &DroConfig,
    ) -> Result<StepOutcome> {
        let (params, state, diag) = (self.step)(spec, params, batches, state, cfg)?;
        Ok(StepOutcome {
            params,
            state,
            diagnostics: Some(diag),
        })
    }
}

/// Name-indexed set of algorithms.
#[derive(Clone, Default)]
pub struct AlgorithmRegistry {
    entries: BTreeMap<String, Arc<dyn Algorithm>>,
}

impl AlgorithmRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Registry pre-populated with `erm`, `sam`, `asam`, `gdro` and `asgdro`.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(Pooled {
            name: "erm",
            perturbs: false,
            step: erm_step,
        }));
        r.register(Arc::new(Pooled {
            name: "sam",
            perturbs: true,
            step: sam_step,
        }));
        r.register(Arc::new(Pooled {
            name: "asam",
            perturbs: true,
            step: asam_step,
        }));
        r.register(Arc::new(GroupRobust {
            name: "gdro",
            perturbs: false,
            step: gdro_step,
        }));
        r.register(Arc::new(GroupRobust {
            name: "asgdro",
            perturbs: true,
            step: asgdro_step,
        }));
        r
    }

    /// Adds or replaces an algorithm under its own name.
    pub fn register(&mut self, algorithm: Arc<dyn Algorithm>) {
        self.entries.insert(algorithm.name().to_string(), algorithm);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Algorithm>> {
        self.entries
            .get(&name.to_ascii_lowercase())
            .cloned()
            .ok_or_else(|| Error::UnknownAlgorithm(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_names() {
        let r = AlgorithmRegistry::builtin();
        assert_eq!(r.names(), vec!["asam", "asgdro", "erm", "gdro", "sam"]);
        assert_eq!(r.get("ASGDRO").unwrap().sampling(), Sampling::GroupBalanced);
        assert_eq!(r.get("erm").unwrap().sampling(), Sampling::Uniform);
        assert!(!r.get("gdro").unwrap().uses_perturbation());
        assert!(matches!(r.get("lisa"), Err(Error::UnknownAlgorithm(_))));
    }

    #[test]
    fn custom_algorithms_can_be_registered() {
        struct Frozen;
        impl Algorithm for Frozen {
            fn name(&self) -> &'static str {
                "frozen"
            }
            fn sampling(&self) -> Sampling {
                Sampling::Uniform
            }
            fn uses_perturbation(&self) -> bool {
                false
            }
            fn step(
                &self,
                _: &ModelSpec,
                params: &ParamVector,
                _: &[Batch],
                state: &GroupWeightState,
                _: &DroConfig,
            ) -> Result<StepOutcome> {
                Ok(StepOutcome {
                    params: params.clone(),
                    state: state.clone(),
                    diagnostics: None,
                })
            }
        }
        let mut r = AlgorithmRegistry::builtin();
        r.register(Arc::new(Frozen));
        assert!(r.get("frozen").is_ok());
        assert_eq!(r.names().len(), 6);
    }
}
