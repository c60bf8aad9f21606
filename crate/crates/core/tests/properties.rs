use asgdro::diffcore::ParamVector;
use asgdro::robust_opt::{update_group_weights, GroupWeightState};
use asgdro::sharpness::{
    asam_perturbation, normalized_norm, sam_perturbation, PerturbConfig,
};
use proptest::prelude::*;

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn nonzero_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, n)
        .prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
}

proptest! {
    #[test]
    fn weights_stay_on_simplex(
        (lam, losses) in (1usize..8).prop_flat_map(|n| (simplex(n), prop::collection::vec(0.0f64..20.0, n))),
        gamma in 0.0f64..5.0,
    ) {
        let next = update_group_weights(&GroupWeightState::new(lam).unwrap(), &losses, gamma).unwrap();
        prop_assert!(next.lambdas.iter().all(|&l| l >= 0.0));
        prop_assert!((next.lambdas.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn weights_ignore_a_common_loss_shift(
        (lam, losses) in (1usize..8).prop_flat_map(|n| (simplex(n), prop::collection::vec(0.0f64..20.0, n))),
        gamma in 0.0f64..2.0,
        shift in -10.0f64..10.0,
    ) {
        let state = GroupWeightState::new(lam).unwrap();
        let a = update_group_weights(&state, &losses, gamma).unwrap();
        let shifted: Vec<f64> = losses.iter().map(|l| l + shift).collect();
        let b = update_group_weights(&state, &shifted, gamma).unwrap();
        for (x, y) in a.lambdas.iter().zip(&b.lambdas) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn sam_radius_is_rho(g in (1usize..30).prop_flat_map(nonzero_vec), rho in 0.001f64..3.0) {
        let eps = sam_perturbation(&ParamVector::from_values(g), &PerturbConfig::sam(rho)).unwrap();
        prop_assert!((eps.epsilon.norm() - rho).abs() <= 1e-12 * (1.0 + rho));
    }

    #[test]
    fn asam_normalized_radius_is_rho(
        (theta, g) in (1usize..30).prop_flat_map(|n| (prop::collection::vec(-5.0f64..5.0, n), nonzero_vec(n))),
        rho in 0.001f64..3.0,
        xi in 0.001f64..1.0,
    ) {
        let theta = ParamVector::from_values(theta);
        let eps = asam_perturbation(&theta, &ParamVector::from_values(g), &PerturbConfig::asam(rho, xi)).unwrap();
        prop_assert!((normalized_norm(&theta, &eps.epsilon, xi) - rho).abs() <= 1e-12 * (1.0 + rho));
    }

    #[test]
    fn constant_normalizer_scales_sam(
        (signs, g) in (1usize..30).prop_flat_map(|n| (prop::collection::vec(any::<bool>(), n), nonzero_vec(n))),
        a in 0.0f64..4.0,
        xi in 0.001f64..1.0,
        rho in 0.001f64..3.0,
    ) {
        // |theta_i| + xi = c for every coordinate
        let theta = ParamVector::from_values(signs.iter().map(|&s| if s { a } else { -a }).collect());
        let c = a + xi;
        let g = ParamVector::from_values(g);
        let asam = asam_perturbation(&theta, &g, &PerturbConfig::asam(rho, xi)).unwrap();
        let sam = sam_perturbation(&g, &PerturbConfig::sam(rho)).unwrap();
        for (x, y) in asam.epsilon.values.iter().zip(&sam.epsilon.values) {
            prop_assert!((x - c * y).abs() <= 1e-12 * (1.0 + c * y.abs()));
        }
    }
}
