//! Multilayer perceptrons with exact reverse-mode gradients.
//!
//! Parameters are stored flat; layer `l` occupies a `fan_in x fan_out`
//! row-major weight block followed by `fan_out` biases. Logits are computed as
//! `z = a W + b`, hidden layers apply the configured activation and the output
//! head is a fused softmax cross-entropy.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

/// Architecture of a fully connected classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Input dim, hidden dims..., output dim (number of classes).
    pub widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = Self { widths, activation };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least input and output widths, got {:?}",
                self.widths
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidSpec(format!(
                "widths must be positive, got {:?}",
                self.widths
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated spec")
    }

    /// `(fan_in, fan_out)` for each layer.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        self.widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|&(i, o)| i * o + o).sum()
    }
}

/// Flat parameter state with its per-layer layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    /// `(fan_in, fan_out)` per layer; empty for layout-free vectors.
    #[serde(default)]
    pub layout: Vec<(usize, usize)>,
}

impl ParamVector {
    /// A vector with no layer structure, e.g. for analytic test objectives.
    pub fn from_values(values: Vec<f64>) -> Self {
        Self {
            values,
            layout: Vec::new(),
        }
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            values: vec![0.0; spec.num_params()],
            layout: spec.layers(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            layout: self.layout.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self + alpha * other`.
    pub fn add_scaled(&self, alpha: f64, other: &ParamVector) -> ParamVector {
        ParamVector {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + alpha * b)
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// In-place `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    pub fn scaled(&self, alpha: f64) -> ParamVector {
        ParamVector {
            values: self.values.iter().map(|v| alpha * v).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        let expected = spec.num_params();
        if self.values.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "parameter vector has {} entries, spec expects {expected}",
                self.values.len()
            )));
        }
        Ok(())
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Labeled examples with optional nonnegative sample weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub weights: Option<Vec<f64>>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        Self::with_weights(inputs, labels, None)
    }

    pub fn with_weights(
        inputs: Matrix,
        labels: Vec<usize>,
        weights: Option<Vec<f64>>,
    ) -> Result<Self> {
        if inputs.rows == 0 {
            return Err(Error::InvalidArgument("batch must be nonempty".into()));
        }
        if labels.len() != inputs.rows {
            return Err(Error::ShapeMismatch(format!(
                "{} input rows but {} labels",
                inputs.rows,
                labels.len()
            )));
        }
        if let Some(w) = &weights {
            if w.len() != inputs.rows {
                return Err(Error::ShapeMismatch(format!(
                    "{} input rows but {} weights",
                    inputs.rows,
                    w.len()
                )));
            }
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidArgument(
                    "sample weights must be finite and nonnegative".into(),
                ));
            }
            if w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::InvalidArgument(
                    "sample weights sum to zero".into(),
                ));
            }
        }
        Ok(Self {
            inputs,
            labels,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    /// Concatenates batches, keeping each example's own weight.
    pub fn concat(batches: &[Batch]) -> Result<Batch> {
        let first = batches
            .first()
            .ok_or_else(|| Error::InvalidArgument("no batches to concatenate".into()))?;
        let cols = first.inputs.cols;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut weights = Vec::new();
        let any_weighted = batches.iter().any(|b| b.weights.is_some());
        for b in batches {
            if b.inputs.cols != cols {
                return Err(Error::ShapeMismatch(
                    "batches have different input widths".into(),
                ));
            }
            data.extend_from_slice(&b.inputs.data);
            labels.extend_from_slice(&b.labels);
            weights.extend((0..b.len()).map(|i| b.weight(i)));
        }
        let rows = labels.len();
        Batch::with_weights(
            Matrix::new(rows, cols, data)?,
            labels,
            any_weighted.then_some(weights),
        )
    }

    fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.inputs.cols != spec.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "batch has {} features, model expects {}",
                self.inputs.cols,
                spec.input_dim()
            )));
        }
        let k = spec.output_dim();
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= k) {
            return Err(Error::ShapeMismatch(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        Ok(())
    }
}

/// Deterministic initialization: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(spec.num_params());
    for (fan_in, fan_out) in spec.layers() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)));
        values.extend(std::iter::repeat(0.0).take(fan_out));
    }
    ParamVector {
        values,
        layout: spec.layers(),
    }
}

struct Trace {
    /// Pre-activations per layer (n x fan_out).
    pre: Vec<Vec<f64>>,
    /// Layer inputs; `acts[0]` is the batch input.
    acts: Vec<Vec<f64>>,
}

fn run_forward(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Trace {
    let n = batch.len();
    let layers = spec.layers();
    let mut acts = vec![batch.inputs.data.clone()];
    let mut pre = Vec::with_capacity(layers.len());
    let mut offset = 0;
    for (l, &(fan_in, fan_out)) in layers.iter().enumerate() {
        let w = &params.values[offset..offset + fan_in * fan_out];
        let b = &params.values[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        let input = acts.last().unwrap();
        let mut z = vec![0.0; n * fan_out];
        for r in 0..n {
            let zr = &mut z[r * fan_out..(r + 1) * fan_out];
            zr.copy_from_slice(b);
            for (i, &x) in input[r * fan_in..(r + 1) * fan_in].iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let wrow = &w[i * fan_out..(i + 1) * fan_out];
                for (zj, &wij) in zr.iter_mut().zip(wrow) {
                    *zj += x * wij;
                }
            }
        }
        if l + 1 < layers.len() {
            let a = z.iter().map(|&v| spec.activation.apply(v)).collect();
            pre.push(z);
            acts.push(a);
        } else {
            pre.push(z);
        }
    }
    Trace { pre, acts }
}

/// Logits for every row of `batch`.
pub fn forward(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<Matrix> {
    spec.validate()?;
    params.check_spec(spec)?;
    batch.check(spec)?;
    let trace = run_forward(spec, params, batch);
    Matrix::new(
        batch.len(),
        spec.output_dim(),
        trace.pre.into_iter().last().unwrap(),
    )
}

/// Predicted class per row (ties resolve to the lowest class index).
pub fn predict(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<Vec<usize>> {
    let logits = forward(spec, params, batch)?;
    Ok((0..logits.rows)
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Per-example cross-entropy `logsumexp(z) - z_y`.
fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Weighted mean cross-entropy only.
pub fn loss(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<f64> {
    let logits = forward(spec, params, batch)?;
    let k = logits.cols;
    let total_w: f64 = (0..batch.len()).map(|i| batch.weight(i)).sum();
    let mut acc = 0.0;
    for i in 0..batch.len() {
        acc += batch.weight(i) * cross_entropy(&logits.data[i * k..(i + 1) * k], batch.labels[i]);
    }
    let value = acc / total_w;
    if !value.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok(value)
}

/// Weighted mean cross-entropy and its exact gradient.
///
/// Weights are renormalized so the loss is `sum(w_i l_i) / sum(w_i)`.
pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
) -> Result<(f64, ParamVector)> {
    spec.validate()?;
    params.check_spec(spec)?;
    batch.check(spec)?;
    let n = batch.len();
    let layers = spec.layers();
    let trace = run_forward(spec, params, batch);
    let k = spec.output_dim();
    let total_w: f64 = (0..n).map(|i| batch.weight(i)).sum();

    // dL/dz for the output layer.
    let logits = trace.pre.last().unwrap();
    let mut delta = vec![0.0; n * k];
    let mut acc = 0.0;
    for i in 0..n {
        let z = &logits[i * k..(i + 1) * k];
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        let scale = batch.weight(i) / total_w;
        acc += batch.weight(i) * (lse - z[batch.labels[i]]);
        for j in 0..k {
            delta[i * k + j] = scale * (z[j] - lse).exp();
        }
        delta[i * k + batch.labels[i]] -= scale;
    }
    let loss = acc / total_w;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }

    let mut grad = vec![0.0; params.len()];
    let offsets: Vec<usize> = layers
        .iter()
        .scan(0, |off, &(i, o)| {
            let start = *off;
            *off += i * o + o;
            Some(start)
        })
        .collect();

    for l in (0..layers.len()).rev() {
        let (fan_in, fan_out) = layers[l];
        let off = offsets[l];
        let input = &trace.acts[l];
        {
            let (gw, gb) = grad[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            for r in 0..n {
                let d = &delta[r * fan_out..(r + 1) * fan_out];
                for (gbj, &dj) in gb.iter_mut().zip(d) {
                    *gbj += dj;
                }
                for (i, &x) in input[r * fan_in..(r + 1) * fan_in].iter().enumerate() {
                    if x == 0.0 {
                        continue;
                    }
                    for (g, &dj) in gw[i * fan_out..(i + 1) * fan_out].iter_mut().zip(d) {
                        *g += x * dj;
                    }
                }
            }
        }
        if l == 0 {
            break;
        }
        // Propagate to the previous layer's pre-activations.
        let w = &params.values[off..off + fan_in * fan_out];
        let z_prev = &trace.pre[l - 1];
        let mut next = vec![0.0; n * fan_in];
        for r in 0..n {
            let d = &delta[r * fan_out..(r + 1) * fan_out];
            for i in 0..fan_in {
                let s: f64 = w[i * fan_out..(i + 1) * fan_out]
                    .iter()
                    .zip(d)
                    .map(|(a, b)| a * b)
                    .sum();
                let idx = r * fan_in + i;
                next[idx] = s * spec.activation.derivative(z_prev[idx], input[idx]);
            }
        }
        delta = next;
    }

    let grad = ParamVector {
        values: grad,
        layout: layers,
    };
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    Ok((loss, grad))
}

/// Central-difference gradient of an arbitrary scalar function.
pub fn finite_diff<F>(f: F, at: &ParamVector, h: f64) -> Result<ParamVector>
where
    F: Fn(&ParamVector) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut out = at.zeros_like();
    let mut probe = at.clone();
    for i in 0..at.len() {
        let orig = at.values[i];
        probe.values[i] = orig + h;
        let up = f(&probe)?;
        probe.values[i] = orig - h;
        let down = f(&probe)?;
        probe.values[i] = orig;
        out.values[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// Central-difference estimate of the loss gradient.
pub fn finite_diff_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    h: f64,
) -> Result<ParamVector> {
    finite_diff(|p| loss(spec, p, batch), params, h)
}
