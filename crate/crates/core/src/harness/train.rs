//! Multi-seed training with worst-group model selection.

use super::config::{DatasetKind, ExperimentConfig};
use crate::diffcore::{init_params, loss, predict, ModelSpec, ParamVector};
use crate::error::{Error, Result};
use crate::robust_opt::{AlgorithmRegistry, DroConfig, GroupWeightState, Sampling};
use crate::synthdata::{
    gen_cmnist_proxy, gen_hcmnist_proxy, reweighted_batches, uniform_epoch, worst_group_accuracy,
    DatasetBundle, GroupAccuracy, GroupedDataset,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Unweighted loss over the full training set.
    pub train_loss: f64,
    pub val: GroupAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestBedMetrics {
    pub name: String,
    pub accuracy: GroupAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub algorithm: String,
    pub seed: u64,
    pub fingerprint: String,
    /// Evaluated epochs only.
    pub epochs: Vec<EpochMetrics>,
    pub selected_epoch: usize,
    pub selected_val: GroupAccuracy,
    pub test: Vec<TestBedMetrics>,
    /// Group weights at the end of every epoch.
    pub lambda_trajectory: Vec<Vec<f64>>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn test_bed(&self, name: &str) -> Option<&GroupAccuracy> {
        self.test.iter().find(|t| t.name == name).map(|t| &t.accuracy)
    }
}

/// Parameters of the selected epoch together with what is needed to reuse them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seed: u64,
    pub epoch: usize,
    pub fingerprint: String,
    pub config: ExperimentConfig,
    pub model: ModelSpec,
    pub params: ParamVector,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingCheckpoint(path.display().to_string()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_worst: Option<f64>,
    /// `(test bed, average accuracy, worst-group accuracy)`.
    #[serde(default)]
    pub test: Vec<(String, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub algorithm: String,
    pub fingerprint: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedSummary>,
}

impl ExperimentSummary {
    pub fn failed_seeds(&self) -> Vec<u64> {
        self.seeds.iter().filter(|s| !s.ok).map(|s| s.seed).collect()
    }
}

/// Result of one seed: the record and checkpoint, or the error that stopped it.
pub type SeedResult = std::result::Result<(RunRecord, Checkpoint), Error>;

pub struct ExperimentOutput {
    pub summary: ExperimentSummary,
    pub runs: Vec<(u64, SeedResult)>,
}

impl ExperimentOutput {
    pub fn records(&self) -> Vec<&RunRecord> {
        self.runs
            .iter()
            .filter_map(|(_, r)| r.as_ref().ok().map(|(rec, _)| rec))
            .collect()
    }
}

/// Generates or loads the data of one seed.
pub fn load_bundle(cfg: &ExperimentConfig, seed: u64) -> Result<DatasetBundle> {
    match cfg.dataset.kind {
        DatasetKind::CmnistProxy => gen_cmnist_proxy(&cfg.dataset.shift_spec(seed)?),
        DatasetKind::HcmnistProxy => gen_hcmnist_proxy(&cfg.dataset.shift_spec(seed)?),
        DatasetKind::File => {
            let dir = cfg
                .dataset
                .path
                .as_ref()
                .ok_or_else(|| Error::Config("dataset.path is required".into()))?;
            DatasetBundle::load(dir)
        }
    }
}

/// Per-purpose seed derived from the run seed.
fn derive_seed(seed: u64, purpose: u64) -> u64 {
    let mut z = seed ^ purpose.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const INIT_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 2;

pub fn evaluate(spec: &ModelSpec, params: &ParamVector, ds: &GroupedDataset) -> Result<GroupAccuracy> {
    let preds = predict(spec, params, &ds.as_batch()?)?;
    worst_group_accuracy(&preds, &ds.labels, &ds.groups, ds.num_groups())
}

pub fn model_spec_for(cfg: &ExperimentConfig, bundle: &DatasetBundle) -> Result<ModelSpec> {
    let classes = bundle
        .train
        .labels
        .iter()
        .chain(&bundle.val.labels)
        .max()
        .map_or(2, |m| (m + 1).max(2));
    cfg.model.model_spec(bundle.train.dim(), classes)
}

/// Trains one seed on an already materialized bundle. No files are written.
pub fn train_on(
    cfg: &ExperimentConfig,
    registry: &AlgorithmRegistry,
    bundle: &DatasetBundle,
    seed: u64,
) -> Result<(RunRecord, Checkpoint)> {
    let started = Instant::now();
    let algorithm = registry.get(&cfg.algorithm)?;
    let train = &bundle.train;
    let spec = model_spec_for(cfg, bundle)?;
    let mut params = init_params(&spec, derive_seed(seed, INIT_STREAM));
    let dro = DroConfig {
        group_counts: train.group_counts(),
        ..cfg.optim.clone()
    };
    dro.validate()?;
    let groups = train.num_groups();
    let mut state = GroupWeightState::uniform(groups);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let batch_seed = derive_seed(seed, BATCH_STREAM);
    let mut uniform_rng = ChaCha8Rng::seed_from_u64(batch_seed);
    let mut balanced = match algorithm.sampling() {
        Sampling::GroupBalanced => Some(reweighted_batches(train, cfg.batch_size, batch_seed)?),
        Sampling::Uniform => None,
    };

    let mut epochs = Vec::new();
    let mut lambda_trajectory = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, GroupAccuracy, ParamVector)> = None;
    for epoch in 1..=cfg.epochs {
        match balanced.as_mut() {
            Some(sampler) => {
                for _ in 0..steps_per_epoch {
                    let batches = sampler
                        .next_indices()
                        .iter()
                        .map(|rows| train.batch(rows))
                        .collect::<Result<Vec<_>>>()?;
                    let out = algorithm.step(&spec, &params, &batches, &state, &dro)?;
                    params = out.params;
                    state = out.state;
                }
            }
            None => {
                for rows in uniform_epoch(train.len(), cfg.batch_size, &mut uniform_rng) {
                    let batch = train.batch(&rows)?;
                    let out = algorithm.step(&spec, &params, &[batch], &state, &dro)?;
                    params = out.params;
                    state = out.state;
                }
            }
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("parameters diverged"));
        }
        lambda_trajectory.push(state.lambdas.clone());
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let val = evaluate(&spec, &params, &bundle.val)?;
            let train_loss = loss(&spec, &params, &train.as_batch()?)?;
            log::debug!(
                "{} seed {seed} epoch {epoch}: loss {train_loss:.4} val worst {:.4}",
                cfg.algorithm,
                val.worst
            );
            if best.as_ref().is_none_or(|(_, b, _)| val.worst > b.worst) {
                best = Some((epoch, val.clone(), params.clone()));
            }
            epochs.push(EpochMetrics {
                epoch,
                train_loss,
                val,
            });
        }
    }
    let (selected_epoch, selected_val, best_params) = best.expect("at least one evaluation");
    let test = bundle
        .tests
        .iter()
        .map(|(name, ds)| {
            Ok(TestBedMetrics {
                name: name.clone(),
                accuracy: evaluate(&spec, &best_params, ds)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let fingerprint = cfg.fingerprint();
    let record = RunRecord {
        algorithm: algorithm.name().to_string(),
        seed,
        fingerprint: fingerprint.clone(),
        epochs,
        selected_epoch,
        selected_val,
        test,
        lambda_trajectory,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    let checkpoint = Checkpoint {
        seed,
        epoch: selected_epoch,
        fingerprint,
        config: cfg.clone(),
        model: spec,
        params: best_params,
    };
    Ok((record, checkpoint))
}

pub fn train_seed(
    cfg: &ExperimentConfig,
    registry: &AlgorithmRegistry,
    seed: u64,
) -> Result<(RunRecord, Checkpoint)> {
    let bundle = load_bundle(cfg, seed)?;
    train_on(cfg, registry, &bundle, seed)
}

/// Long-form metrics rows `seed,epoch,split,group,metric,value`.
pub fn metrics_csv(record: &RunRecord) -> String {
    let mut out = String::from("seed,epoch,split,group,metric,value\n");
    let seed = record.seed;
    let acc_rows = |out: &mut String, epoch: usize, split: &str, acc: &GroupAccuracy| {
        for (g, a) in acc.per_group.iter().enumerate() {
            let _ = writeln!(out, "{seed},{epoch},{split},{g},accuracy,{a}");
        }
        let _ = writeln!(out, "{seed},{epoch},{split},worst,accuracy,{}", acc.worst);
        let _ = writeln!(out, "{seed},{epoch},{split},all,accuracy,{}", acc.average);
    };
    for (i, lambdas) in record.lambda_trajectory.iter().enumerate() {
        for (g, l) in lambdas.iter().enumerate() {
            let _ = writeln!(out, "{seed},{},train,{g},lambda,{l}", i + 1);
        }
    }
    for m in &record.epochs {
        let _ = writeln!(out, "{seed},{},train,all,loss,{}", m.epoch, m.train_loss);
        acc_rows(&mut out, m.epoch, "val", &m.val);
    }
    for t in &record.test {
        acc_rows(&mut out, record.selected_epoch, &t.name, &t.accuracy);
    }
    out
}

fn seed_summary(seed: u64, result: &SeedResult) -> SeedSummary {
    match result {
        Ok((rec, _)) => SeedSummary {
            seed,
            ok: true,
            error: None,
            selected_epoch: Some(rec.selected_epoch),
            val_worst: Some(rec.selected_val.worst),
            test: rec
                .test
                .iter()
                .map(|t| (t.name.clone(), t.accuracy.average, t.accuracy.worst))
                .collect(),
        },
        Err(e) => SeedSummary {
            seed,
            ok: false,
            error: Some(e.to_string()),
            selected_epoch: None,
            val_worst: None,
            test: Vec::new(),
        },
    }
}

fn write_seed(dir: &Path, record: &RunRecord, checkpoint: &Checkpoint) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("record.json"), serde_json::to_string_pretty(record)?)?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(record))?;
    checkpoint.save(&dir.join("checkpoint.json"))
}

pub fn seed_dir(out: &Path, seed: u64) -> std::path::PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Runs every seed of `cfg`. A failing seed is recorded in the summary and
/// does not stop the others. When `out` is given, each seed writes
/// `seed_<n>/{record.json,metrics.csv,checkpoint.json}` and the experiment
/// writes `summary.json`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    registry: &AlgorithmRegistry,
    out: Option<&Path>,
) -> Result<ExperimentOutput> {
    cfg.validate(registry)?;
    let runs: Vec<(u64, SeedResult)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| (seed, train_seed(cfg, registry, seed)))
        .collect();
    let summary = ExperimentSummary {
        algorithm: registry.get(&cfg.algorithm)?.name().to_string(),
        fingerprint: cfg.fingerprint(),
        config: cfg.clone(),
        seeds: runs.iter().map(|(s, r)| seed_summary(*s, r)).collect(),
    };
    for (seed, r) in &runs {
        if let Err(e) = r {
            log::error!("seed {seed} failed: {e}");
        }
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        for (seed, r) in &runs {
            if let Ok((rec, ckpt)) = r {
                write_seed(&seed_dir(dir, *seed), rec, ckpt)?;
            }
        }
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(ExperimentOutput { summary, runs })
}
