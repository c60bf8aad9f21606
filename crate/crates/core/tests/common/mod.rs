//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use asgdro::diffcore::{init_params, loss_and_grad, Activation, Batch, Matrix, ModelSpec, ParamVector};
use asgdro::robust_opt::{erm_step, DroConfig};
use asgdro::sharpness::Normalizer;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_batch(rows: usize, cols: usize, classes: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(Matrix::new(rows, cols, data).unwrap(), labels).unwrap()
}

/// Dense Hessian from central differences of the reverse-mode gradient, symmetrized.
pub fn dense_hessian(spec: &ModelSpec, params: &ParamVector, batch: &Batch, h: f64) -> DMatrix<f64> {
    let n = params.len();
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut up = params.clone();
        up.values[j] += h;
        let mut down = params.clone();
        down.values[j] -= h;
        let gu = loss_and_grad(spec, &up, batch).unwrap().1;
        let gd = loss_and_grad(spec, &down, batch).unwrap().1;
        for i in 0..n {
            m[(i, j)] = (gu.values[i] - gd.values[i]) / (2.0 * h);
        }
    }
    (&m + m.transpose()) * 0.5
}

/// Eigenvalues sorted by decreasing magnitude.
pub fn eigs_by_magnitude(m: &DMatrix<f64>) -> Vec<f64> {
    let mut e: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    e.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
    e
}

pub fn matvec(m: &DMatrix<f64>, v: &ParamVector) -> ParamVector {
    let x = nalgebra::DVector::from_column_slice(&v.values);
    ParamVector::from_values((m * x).iter().copied().collect())
}

/// `Q diag(lambda) Q^T` with a random orthogonal `Q` and a clear gap between
/// the two leading eigenvalues and the rest.
pub fn random_quadratic(dim: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    let q = a.qr().q();
    let mut lambda = vec![rng.random_range(8.0..12.0), rng.random_range(4.0..6.0)];
    lambda.extend((2..dim).map(|_| rng.random_range(-2.0..2.0)));
    let m = &q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(lambda.clone())) * q.transpose();
    (m, lambda)
}

/// Small tanh net trained with a few hundred plain gradient steps.
pub fn tiny_trained_net(seed: u64) -> (ModelSpec, ParamVector, Batch) {
    let spec = ModelSpec::new(vec![3, 4, 2], Activation::Tanh).unwrap();
    let batch = random_batch(40, 3, 2, seed);
    let cfg = DroConfig {
        eta: 0.5,
        ..DroConfig::default()
    };
    let mut params = init_params(&spec, seed);
    for _ in 0..300 {
        params = erm_step(&spec, &params, &batch, &cfg).unwrap();
    }
    (spec, params, batch)
}

/// Linear softmax classifier `z = x W + b`, written out by hand.
pub struct LinearSoftmax {
    pub d: usize,
    pub k: usize,
}

impl LinearSoftmax {
    /// Mean cross-entropy and its gradient over `rows`.
    pub fn loss_grad(&self, theta: &[f64], rows: &[(Vec<f64>, usize)]) -> (f64, Vec<f64>) {
        let (d, k) = (self.d, self.k);
        let mut grad = vec![0.0; d * k + k];
        let mut total = 0.0;
        for (x, y) in rows {
            let z: Vec<f64> = (0..k)
                .map(|c| theta[d * k + c] + (0..d).map(|j| x[j] * theta[j * k + c]).sum::<f64>())
                .collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
            total += m + s.ln() - z[*y];
            for c in 0..k {
                let r = (z[c] - m).exp() / s - if c == *y { 1.0 } else { 0.0 };
                for j in 0..d {
                    grad[j * k + c] += r * x[j];
                }
                grad[d * k + c] += r;
            }
        }
        let n = rows.len() as f64;
        (total / n, grad.into_iter().map(|g| g / n).collect())
    }
}

pub fn rows_of(batch: &Batch) -> Vec<(Vec<f64>, usize)> {
    (0..batch.len())
        .map(|i| (batch.inputs.row(i).to_vec(), batch.labels[i]))
        .collect()
}

/// One straight-line sharpness-aware group-robust step for [`LinearSoftmax`].
/// Returns the new parameters and group weights.
pub fn reference_step(
    model: &LinearSoftmax,
    theta: &[f64],
    groups: &[Vec<(Vec<f64>, usize)>],
    lambdas: &[f64],
    cfg: &DroConfig,
) -> (Vec<f64>, Vec<f64>) {
    let union: Vec<(Vec<f64>, usize)> = groups.iter().flatten().cloned().collect();
    let (_, g) = model.loss_grad(theta, &union);

    let t: Vec<f64> = match cfg.normalizer {
        Normalizer::Elementwise => theta.iter().map(|v| v.abs() + cfg.xi).collect(),
        Normalizer::None => vec![1.0; theta.len()],
    };
    let tg_norm = t.iter().zip(&g).map(|(a, b)| (a * b).powi(2)).sum::<f64>().sqrt();
    let eps: Vec<f64> = if cfg.rho == 0.0 || tg_norm < 1e-12 {
        vec![0.0; theta.len()]
    } else {
        t.iter().zip(&g).map(|(a, b)| cfg.rho * a * a * b / tg_norm).collect()
    };
    let shifted: Vec<f64> = theta.iter().zip(&eps).map(|(a, b)| a + b).collect();

    let mut losses = Vec::new();
    let mut grads = Vec::new();
    for (i, rows) in groups.iter().enumerate() {
        let (l, gr) = model.loss_grad(&shifted, rows);
        let l = if cfg.adjustment_c > 0.0 {
            l + cfg.adjustment_c / (cfg.group_counts[i] as f64).sqrt()
        } else {
            l
        };
        losses.push(l);
        grads.push(gr);
    }

    let unnorm: Vec<f64> = lambdas
        .iter()
        .zip(&losses)
        .map(|(lam, l)| lam * (cfg.gamma * l).exp())
        .collect();
    let z: f64 = unnorm.iter().sum();
    let next_lambdas: Vec<f64> = unnorm.iter().map(|u| u / z).collect();

    let mut dir = vec![0.0; theta.len()];
    for (lam, gr) in next_lambdas.iter().zip(&grads) {
        for (d, v) in dir.iter_mut().zip(gr) {
            *d += lam * v;
        }
    }
    if let Some(c) = cfg.clip_norm {
        let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > c {
            dir.iter_mut().for_each(|v| *v *= c / n);
        }
    }
    let next = theta.iter().zip(&dir).map(|(a, b)| a - cfg.eta * b).collect();
    (next, next_lambdas)
}

/// A random two-group instance for the step oracle: model, parameters,
/// group batches and a config.
pub fn step_instance(seed: u64) -> (ModelSpec, ParamVector, Vec<Batch>, Vec<f64>, DroConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(2..6);
    let k = rng.random_range(2..4);
    let spec = ModelSpec::new(vec![d, k], Activation::Identity).unwrap();
    let mut params = init_params(&spec, seed);
    for v in params.values.iter_mut() {
        *v += rng.random_range(-0.5..0.5);
    }
    let sizes = [rng.random_range(1..12), rng.random_range(1..12)];
    let batches: Vec<Batch> = sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| random_batch(n, d, k, seed * 7 + i as u64))
        .collect();
    let a: f64 = rng.random_range(0.05..0.95);
    let lambdas = vec![a, 1.0 - a];
    let adjust = rng.random_bool(0.5);
    let cfg = DroConfig {
        eta: rng.random_range(0.01..0.5),
        gamma: rng.random_range(0.01..2.0),
        rho: rng.random_range(0.0..1.0),
        normalizer: if rng.random_bool(0.5) {
            Normalizer::Elementwise
        } else {
            Normalizer::None
        },
        xi: rng.random_range(0.001..0.2),
        adjustment_c: if adjust { rng.random_range(0.1..2.0) } else { 0.0 },
        group_counts: if adjust {
            vec![rng.random_range(10..500), rng.random_range(10..500)]
        } else {
            Vec::new()
        },
        clip_norm: rng.random_bool(0.3).then(|| rng.random_range(0.05..1.0)),
    };
    (spec, params, batches, lambdas, cfg)
}

fn max_gap(a: &ParamVector, b: &ParamVector) -> f64 {
    a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Largest per-coordinate gap between the trajectories of
/// ASGDRO(rho=0) vs GDRO, single-group ASGDRO vs ASAM and SAM(rho=0) vs ERM.
pub fn reduction_gaps(steps: usize, seed: u64) -> [f64; 3] {
    use asgdro::robust_opt::{asam_step, asgdro_step, gdro_step, sam_step};
    use asgdro::robust_opt::GroupWeightState;
    use asgdro::synthdata::{gen_hcmnist_proxy, reweighted_batches, ShiftSpec};

    let data = gen_hcmnist_proxy(&ShiftSpec {
        n_train: 2000,
        n_val: 400,
        n_test: 400,
        seed,
        ..ShiftSpec::hcmnist()
    })
    .unwrap();
    let spec = ModelSpec::new(vec![data.train.dim(), 8, 2], Activation::Relu).unwrap();
    let start = init_params(&spec, seed);
    let batches: Vec<Vec<Batch>> = reweighted_batches(&data.train, 32, seed)
        .unwrap()
        .take(steps)
        .collect();
    let cfg = DroConfig::default();
    let zero = DroConfig {
        rho: 0.0,
        ..cfg.clone()
    };

    let mut gaps = [0.0f64; 3];
    let (mut a, mut b) = (start.clone(), start.clone());
    let (mut sa, mut sb) = (GroupWeightState::uniform(4), GroupWeightState::uniform(4));
    for groups in &batches {
        let (na, nsa, _) = asgdro_step(&spec, &a, groups, &sa, &zero).unwrap();
        let (nb, nsb, _) = gdro_step(&spec, &b, groups, &sb, &cfg).unwrap();
        (a, sa, b, sb) = (na, nsa, nb, nsb);
        gaps[0] = gaps[0].max(max_gap(&a, &b));
    }

    let (mut a, mut b) = (start.clone(), start.clone());
    let single = GroupWeightState::uniform(1);
    for groups in &batches {
        let pooled = Batch::concat(groups).unwrap();
        a = asgdro_step(&spec, &a, std::slice::from_ref(&pooled), &single, &cfg)
            .unwrap()
            .0;
        b = asam_step(&spec, &b, &pooled, &cfg).unwrap();
        gaps[1] = gaps[1].max(max_gap(&a, &b));
    }

    let (mut a, mut b) = (start.clone(), start);
    for groups in &batches {
        let pooled = Batch::concat(groups).unwrap();
        a = sam_step(&spec, &a, &pooled, &zero).unwrap();
        b = erm_step(&spec, &b, &pooled, &cfg).unwrap();
        gaps[2] = gaps[2].max(max_gap(&a, &b));
    }
    gaps
}

/// Largest gap between `asgdro_step` and [`reference_step`] over parameters
/// and group weights for instance `seed`.
pub fn step_oracle_gap(seed: u64) -> f64 {
    use asgdro::robust_opt::{asgdro_step, GroupWeightState};
    let (spec, params, batches, lambdas, cfg) = step_instance(seed);
    let model = LinearSoftmax {
        d: spec.widths[0],
        k: spec.widths[1],
    };
    let groups: Vec<_> = batches.iter().map(rows_of).collect();
    let (want, want_lambdas) = reference_step(&model, &params.values, &groups, &lambdas, &cfg);
    let state = GroupWeightState::new(lambdas).unwrap();
    let (got, got_state, _) = asgdro_step(&spec, &params, &batches, &state, &cfg).unwrap();
    got.values
        .iter()
        .zip(&want)
        .chain(got_state.lambdas.iter().zip(&want_lambdas))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

pub fn central_differences(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Vec<f64> {
    let h = 1e-5;
    (0..params.len())
        .map(|i| {
            let mut up = params.clone();
            up.values[i] += h;
            let mut down = params.clone();
            down.values[i] -= h;
            let f = |p: &ParamVector| asgdro::diffcore::loss(spec, p, batch).unwrap();
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

/// Random net of at most 200 parameters and a batch of at most 32 rows.
pub fn gradient_instance(seed: u64) -> (ModelSpec, ParamVector, Batch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let acts = [Activation::Tanh, Activation::Identity, Activation::Relu];
    loop {
        let mut widths = vec![rng.random_range(1..6)];
        for _ in 0..rng.random_range(0..3) {
            widths.push(rng.random_range(1..7));
        }
        widths.push(rng.random_range(2..4));
        let spec = ModelSpec::new(widths, acts[rng.random_range(0..3)]).unwrap();
        if spec.num_params() > 200 {
            continue;
        }
        // nonzero biases keep ReLU pre-activations off their kink
        let mut params = init_params(&spec, rng.random());
        for v in params.values.iter_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        let rows = rng.random_range(1..33);
        let batch = random_batch(rows, spec.input_dim(), spec.output_dim(), rng.random());
        return (spec, params, batch);
    }
}

pub fn gradient_error(seed: u64) -> f64 {
    let (spec, params, batch) = gradient_instance(seed);
    let (_, grad) = loss_and_grad(&spec, &params, &batch).unwrap();
    max_relative_error(&grad.values, &central_differences(&spec, &params, &batch))
}

fn relative_eig_error(got: &[f64], want: &[f64]) -> f64 {
    got.iter()
        .zip(want)
        .map(|(g, w)| (g - w).abs() / w.abs())
        .fold(0.0, f64::max)
}

pub fn tight_spectrum() -> asgdro::spectra::SpectrumConfig {
    asgdro::spectra::SpectrumConfig {
        k: 2,
        tol: 1e-13,
        max_iter: 20_000,
        seed: 11,
        h: None,
    }
}

/// Relative error of the power-iteration top-2 against nalgebra on a random quadratic.
pub fn quadratic_eig_error(seed: u64) -> f64 {
    let dim = 4 + (seed as usize % 12);
    let (m, _) = random_quadratic(dim, seed);
    let entry =
        asgdro::spectra::top_eigs_of(|v| Ok(matvec(&m, v)), dim, &tight_spectrum()).unwrap();
    relative_eig_error(&entry.eigenvalues(), &eigs_by_magnitude(&m)[..2])
}

/// Same comparison on the loss Hessian of a small trained net.
pub fn trained_net_eig_error(seed: u64) -> f64 {
    let (spec, params, batch) = tiny_trained_net(seed);
    let dense = dense_hessian(&spec, &params, &batch, 1e-5);
    let entry = asgdro::spectra::top_eigs(&spec, &params, &batch, &tight_spectrum()).unwrap();
    relative_eig_error(&entry.eigenvalues(), &eigs_by_magnitude(&dense)[..2])
}
