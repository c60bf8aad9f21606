use asgdro::diffcore::{init_params, loss, Activation, ModelSpec, ParamVector};
use asgdro::spectra::{hvp, per_group_spectrum, SpectrumConfig};
use asgdro::synthdata::{gen_hcmnist_proxy, ShiftSpec};
use nalgebra::DMatrix;

mod common;
use common::{matvec, quadratic_eig_error, random_batch, trained_net_eig_error};

/// Hessian from second differences of the loss alone.
fn loss_only_hessian(spec: &ModelSpec, params: &ParamVector, batch: &asgdro::diffcore::Batch) -> DMatrix<f64> {
    let n = params.len();
    let h = 1e-4;
    let f = |di: (usize, f64), dj: (usize, f64)| {
        let mut p = params.clone();
        p.values[di.0] += di.1;
        p.values[dj.0] += dj.1;
        loss(spec, &p, batch).unwrap()
    };
    DMatrix::from_fn(n, n, |i, j| {
        (f((i, h), (j, h)) - f((i, h), (j, -h)) - f((i, -h), (j, h)) + f((i, -h), (j, -h)))
            / (4.0 * h * h)
    })
}

#[test]
fn hvp_matches_dense_hessian() {
    let spec = ModelSpec::new(vec![3, 3, 2], Activation::Tanh).unwrap();
    for seed in 0..3 {
        let params = init_params(&spec, seed);
        let batch = random_batch(16, 3, 2, seed + 100);
        let dense = loss_only_hessian(&spec, &params, &batch);
        for k in 0..3 {
            let v = ParamVector::from_values(
                (0..params.len()).map(|i| ((i * 7 + k * 3) % 5) as f64 - 2.0).collect(),
            );
            let got = hvp(&spec, &params, &batch, &v, 1e-5).unwrap();
            let want = matvec(&dense, &v);
            for (a, b) in got.values.iter().zip(&want.values) {
                assert!((a - b).abs() < 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }
}

#[test]
fn power_iteration_on_random_quadratics() {
    for seed in 0..20 {
        let err = quadratic_eig_error(seed);
        assert!(err <= 1e-3, "quadratic {seed}: relative error {err}");
    }
}

#[test]
fn power_iteration_on_trained_nets() {
    for seed in 0..5 {
        let err = trained_net_eig_error(seed);
        assert!(err <= 1e-3, "net {seed}: relative error {err}");
    }
}

#[test]
fn per_group_report_is_deterministic_and_complete() {
    let data = gen_hcmnist_proxy(&ShiftSpec {
        n_train: 400,
        n_val: 40,
        n_test: 40,
        ..ShiftSpec::hcmnist()
    })
    .unwrap();
    let spec = ModelSpec::new(vec![data.train.dim(), 4, 2], Activation::Tanh).unwrap();
    let params = init_params(&spec, 1);
    let cfg = SpectrumConfig {
        max_iter: 200,
        ..SpectrumConfig::default()
    };
    let a = per_group_spectrum(&spec, &params, &data.train, &cfg).unwrap();
    let b = per_group_spectrum(&spec, &params, &data.train, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.per_group.len(), 4);
    let max = a.per_group.iter().map(|g| g.entry.largest_eig).fold(f64::MIN, f64::max);
    assert_eq!(a.worst_group_largest(), max);
    for g in &a.per_group {
        assert_eq!(g.entry.eigenvalues().len(), 2);
    }
}
