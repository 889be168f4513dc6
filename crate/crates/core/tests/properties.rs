use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use prognosticator::basis::{BasisFamily, TimeBasisConfig};
use prognosticator::batch_eval::{self, StateTable};
use prognosticator::diagnostics::{tabular_policy, TabularMdp};
use prognosticator::estimators::{forecast_weights, pdis_estimate, pdis_estimates, ForecastModel};
use prognosticator::gradients;
use prognosticator::policy::{MlpSoftmaxPolicy, Policy};

fn family() -> impl Strategy<Value = BasisFamily> {
    prop_oneof![
        Just(BasisFamily::Polynomial),
        Just(BasisFamily::FourierCosine),
    ]
}

fn theta() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(-2.0..2.0f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_sum_to_one(family in family(), d in 1usize..7, extra in 0usize..40, delta in 1usize..6) {
        let k = d + extra;
        let basis = TimeBasisConfig::new(family, d, 1).unwrap();
        let zeta = forecast_weights(k, delta, &basis).unwrap();
        prop_assert_eq!(zeta.len(), k);
        prop_assert!((zeta.iter().sum::<f64>() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn too_short_history_is_rejected(family in family(), d in 2usize..7, delta in 1usize..4) {
        let basis = TimeBasisConfig::new(family, d, 1).unwrap();
        prop_assert!(forecast_weights(d - 1, delta, &basis).is_err());
    }

    #[test]
    fn ols_forecast_is_weighted_sum(ys in prop::collection::vec(-10.0..10.0f64, 5..30), delta in 1usize..4) {
        let basis = TimeBasisConfig::new(BasisFamily::FourierCosine, 3, 1).unwrap();
        let zeta = forecast_weights(ys.len(), delta, &basis).unwrap();
        let model = ForecastModel::fit_ols(&ys, delta, &basis).unwrap();
        let direct: f64 = zeta.iter().zip(&ys).map(|(w, y)| w * y).sum();
        prop_assert!((model.mean_forecast() - direct).abs() < 1e-8 * (1.0 + direct.abs()));
    }

    #[test]
    fn linear_trend_is_extrapolated_exactly(a in -3.0..3.0f64, b in -3.0..3.0f64, k in 2usize..40, delta in 1usize..5) {
        let ys: Vec<f64> = (1..=k).map(|i| a * i as f64 + b).collect();
        let model = ForecastModel::fit_ols(&ys, delta, &TimeBasisConfig::identity()).unwrap();
        let expected = a * (k as f64 + (delta as f64 + 1.0) / 2.0) + b;
        prop_assert!((model.mean_forecast() - expected).abs() < 1e-8 * (1.0 + expected.abs()));
    }

    #[test]
    fn uniform_row_weights_match_ols(ys in prop::collection::vec(-5.0..5.0f64, 4..20), scale in 0.1..10.0f64) {
        let basis = TimeBasisConfig::identity();
        let ols = ForecastModel::fit_ols(&ys, 2, &basis).unwrap();
        let w = vec![scale; ys.len()];
        let wls = ForecastModel::fit_wls(&ys, &w, 2, &basis).unwrap();
        prop_assert!((ols.mean_forecast() - wls.mean_forecast()).abs() < 1e-9);
    }

    #[test]
    fn on_policy_pdis_is_the_return(seed in any::<u64>(), th in theta()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = TabularMdp::random(&mut rng);
        let policy = tabular_policy(th);
        let traj = mdp.sample(&policy, 1, &mut rng);
        let est = pdis_estimate(&traj, &policy, mdp.gamma, None).unwrap();
        prop_assert!((est - traj.discounted_return(mdp.gamma)).abs() < 1e-12);
    }

    #[test]
    fn clipping_never_increases_ratios(seed in any::<u64>(), t in theta(), b in theta(), clip in 0.5..5.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = TabularMdp::random(&mut rng);
        let (target, behavior) = (tabular_policy(t), tabular_policy(b));
        let buf = mdp.sample_buffer(&behavior, 4, &mut rng);
        for traj in buf.iter() {
            let clipped = prognosticator::estimators::trajectory_ratio(traj, &target, Some(clip)).unwrap();
            let raw = prognosticator::estimators::trajectory_ratio(traj, &target, None).unwrap();
            prop_assert!(clipped <= clip + 1e-12);
            prop_assert!(clipped <= raw + 1e-12);
        }
    }

    #[test]
    fn fast_wls_gradient_matches_reference(
        seed in any::<u64>(),
        t in theta(),
        b in theta(),
        clip in prop::option::of(1.0..4.0f64),
        stop in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = TabularMdp::random(&mut rng);
        let (target, behavior) = (tabular_policy(t), tabular_policy(b));
        let buf = mdp.sample_buffer(&behavior, 8, &mut rng);
        let basis = TimeBasisConfig::identity();
        let slow = gradients::pro_wls_gradient(&buf, &target, mdp.gamma, clip, &basis, 1, 0.01, stop).unwrap();
        let table = StateTable::from_buffer(&buf);
        let fast = batch_eval::pro_wls_gradient(&buf, &table, &target, mdp.gamma, clip, &basis, 1, 0.01, stop).unwrap();
        prop_assert!((slow.objective_value - fast.objective_value).abs() < 1e-10);
        for (a, b) in slow.gradient.iter().zip(&fast.gradient) {
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()), "{} vs {}", a, b);
        }
    }

    #[test]
    fn constant_basis_ols_gradient_is_ftrl(seed in any::<u64>(), t in theta(), b in theta(), k in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = TabularMdp::random(&mut rng);
        let (target, behavior) = (tabular_policy(t), tabular_policy(b));
        let buf = mdp.sample_buffer(&behavior, k, &mut rng);
        let ols = gradients::pro_ols_gradient(&buf, &target, mdp.gamma, None, &TimeBasisConfig::constant(), 1, 0.0).unwrap();
        let ftrl = gradients::ftrl_gradient(&buf, &target, mdp.gamma, None, 1, 0.0).unwrap();
        let mean = pdis_estimates(&buf, &target, mdp.gamma, None).unwrap().iter().sum::<f64>() / k as f64;
        prop_assert!((ols.objective_value - mean).abs() < 1e-10);
        for (a, b) in ols.gradient.iter().zip(&ftrl.gradient) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn mlp_probabilities_form_a_distribution(seed in any::<u64>(), x in prop::array::uniform2(-5.0..5.0f64)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = MlpSoftmaxPolicy::init(2, 8, 3, &mut rng).unwrap();
        let p = policy.action_probabilities(&x);
        prop_assert_eq!(p.len(), 3);
        prop_assert!(p.iter().all(|&v| v > 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
