//! Experiment configuration.
//!
//! Configs are written either as JSON or as flat `key = value` text with
//! dotted section keys:
//!
//! ```text
//! # comment
//! algorithm = asgdro
//! dataset.kind = hcmnist_proxy
//! dataset.n_train = 4000
//! model.hidden = [32]
//! optim.rho = 0.2
//! seeds = [0, 1, 2]
//! ```
//!
//! Values are parsed as JSON literals when possible and as bare strings
//! otherwise. Both forms deserialize into the same [`ExperimentConfig`].

use crate::diffcore::{Activation, ModelSpec};
use crate::error::{Error, Result};
use crate::robust_opt::{AlgorithmRegistry, DroConfig};
use crate::spectra::SpectrumConfig;
use crate::synthdata::ShiftSpec;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::path::{Path, PathBuf};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "ASGDRO_OUTPUT_ROOT";

pub fn default_output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    CmnistProxy,
    HcmnistProxy,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory holding `train.csv`, `val.csv` and test CSVs (kind `file`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Overrides applied on top of the generator defaults.
    #[serde(flatten)]
    pub overrides: Map<String, Value>,
}

impl DatasetConfig {
    pub fn generated(kind: DatasetKind) -> Self {
        Self {
            kind,
            path: None,
            overrides: Map::new(),
        }
    }

    /// Generator spec with overrides applied; the seed is set per run.
    pub fn shift_spec(&self, seed: u64) -> Result<ShiftSpec> {
        let base = match self.kind {
            DatasetKind::CmnistProxy => ShiftSpec::cmnist(),
            DatasetKind::HcmnistProxy | DatasetKind::File => ShiftSpec::hcmnist(),
        };
        let mut value = serde_json::to_value(base)?;
        let obj = value.as_object_mut().expect("struct serializes to object");
        for (k, v) in &self.overrides {
            if !obj.contains_key(k) {
                return Err(Error::Config(format!("unknown dataset key `{k}`")));
            }
            obj.insert(k.clone(), v.clone());
        }
        let mut spec: ShiftSpec = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("dataset: {e}")))?;
        spec.seed = seed;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    pub fn model_spec(&self, input_dim: usize, classes: usize) -> Result<ModelSpec> {
        let mut widths = vec![input_dim];
        widths.extend(&self.hidden);
        widths.push(classes);
        ModelSpec::new(widths, self.activation)
    }
}

/// Hyperparameter axes for `sweep`; an empty axis keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub rho: Vec<f64>,
    pub adjustment_c: Vec<f64>,
    pub eta: Vec<f64>,
}

impl SweepGrid {
    pub fn is_empty(&self) -> bool {
        self.rho.is_empty() && self.adjustment_c.is_empty() && self.eta.is_empty()
    }
}

fn default_eval_every() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: String,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: DroConfig,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "SweepGrid::is_empty")]
    pub sweep: SweepGrid,
    #[serde(default)]
    pub spectrum: SpectrumConfig,
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        Ok(cfg)
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let value = parse_kv(text)?;
        serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    /// Reads `.json` files as JSON and anything else as key-value text.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_kv_str(&text)
        }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn to_kv_string(&self) -> String {
        to_kv(&self.to_value())
    }

    /// Canonical JSON: sorted keys, floats with 17 significant digits.
    pub fn canonical_json(&self) -> String {
        canonical_json(&self.to_value())
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.canonical_json())
    }

    pub fn validate(&self, registry: &AlgorithmRegistry) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if self.model.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        let algorithm = registry.get(&self.algorithm).map_err(|_| {
            Error::Config(format!(
                "unknown algorithm `{}` (known: {})",
                self.algorithm,
                registry.names().join(", ")
            ))
        })?;
        self.optim.validate()?;
        if !self.optim.group_counts.is_empty() {
            return Err(Error::Config(
                "optim.group_counts is derived from the training data".into(),
            ));
        }
        match self.dataset.kind {
            DatasetKind::File => {
                if self.dataset.path.is_none() {
                    return Err(Error::Config("dataset.path is required for kind `file`".into()));
                }
            }
            _ => self.dataset.shift_spec(0)?.validate()?,
        }
        if !algorithm.uses_group_weights()
            && (self.optim.adjustment_c != 0.0 || !self.sweep.adjustment_c.is_empty())
        {
            log::warn!("{} ignores the group adjustment", algorithm.name());
        }
        if !algorithm.uses_perturbation() && !self.sweep.rho.is_empty() {
            log::warn!("{} ignores rho; the rho axis is collapsed", algorithm.name());
        }
        Ok(())
    }

    pub fn output_root(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(default_output_root)
    }
}

/// Parses flat `dotted.key = value` text into a nested JSON object.
pub fn parse_kv(text: &str) -> Result<Value> {
    let mut root = Map::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        let parsed = serde_json::from_str::<Value>(value)
            .unwrap_or_else(|_| Value::String(value.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        let mut cursor = &mut root;
        for part in &parts[..parts.len() - 1] {
            let entry = cursor
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
            cursor = entry.as_object_mut().ok_or_else(|| {
                Error::Config(format!("line {}: `{part}` is not a section", lineno + 1))
            })?;
        }
        let leaf = parts[parts.len() - 1];
        if cursor.insert(leaf.to_string(), parsed).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
        }
    }
    Ok(Value::Object(root))
}

/// Inverse of [`parse_kv`] for objects without nested arrays of objects.
pub fn to_kv(value: &Value) -> String {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&key, child, out);
                }
            }
            Value::Null => {}
            other => out.push(format!("{prefix} = {other}")),
        }
    }
    let mut lines = Vec::new();
    walk("", value, &mut lines);
    lines.join("\n") + "\n"
}

fn write_canonical(v: &Value, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                out.push_str(&format!("{:.16e}", n.as_f64().unwrap_or(f64::NAN)));
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_canonical(&map[k], out);
            }
            out.push('}');
        }
    }
}

pub fn canonical_json(v: &Value) -> String {
    let mut out = String::new();
    write_canonical(v, &mut out);
    out
}

/// First 16 hex digits of the SHA-256 of `text`.
pub fn fingerprint(text: &str) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string()
}
