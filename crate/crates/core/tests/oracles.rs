//! Frozen values computed independently with numpy (pseudo-inverse fits,
//! brute-force enumeration of the reference MDP) and compared here.

use prognosticator::basis::{BasisFamily, TimeBasisConfig};
use prognosticator::diagnostics::{
    estimator_policies, exact_wis_mean_two_episodes, tabular_policy, TabularMdp,
};
use prognosticator::estimators::{forecast_weights, pdis_estimate, ForecastModel};
use prognosticator::policy::SoftmaxLinearPolicy;
use prognosticator::trajectory::Trajectory;

fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
    assert_eq!(actual.len(), expected.len());
    for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
        assert!((a - e).abs() < tol, "index {i}: {a} vs {e}");
    }
}

#[test]
fn identity_weights_k5() {
    let zeta = forecast_weights(5, 1, &TimeBasisConfig::identity()).unwrap();
    assert_close(&zeta, &[-0.4, -0.1, 0.2, 0.5, 0.8], 1e-12);
}

#[test]
fn fourier_weights_d3_k6_delta2() {
    let basis = TimeBasisConfig::new(BasisFamily::FourierCosine, 3, 1).unwrap();
    let zeta = forecast_weights(6, 2, &basis).unwrap();
    let expected = [
        0.39879576130844246,
        -0.10858972015622001,
        -0.505203412426932,
        -0.41398407628047185,
        0.28235428783116756,
        1.3466271597240143,
    ];
    assert_close(&zeta, &expected, 1e-10);
}

#[test]
fn fourier_weights_d5_k10() {
    let basis = TimeBasisConfig::new(BasisFamily::FourierCosine, 5, 1).unwrap();
    let zeta = forecast_weights(10, 1, &basis).unwrap();
    let expected = [
        0.12431226549870394,
        -0.11284534352148405,
        -0.14734751856662387,
        0.05639232181646087,
        0.20528214108992385,
        0.04922489838786617,
        -0.254509369962174,
        -0.2538576893585646,
        0.28654819622588545,
        1.0468000983900079,
    ];
    assert_close(&zeta, &expected, 1e-9);
}

#[test]
fn polynomial_weights_d3_k7_delta3() {
    let basis = TimeBasisConfig::new(BasisFamily::Polynomial, 3, 1).unwrap();
    let zeta = forecast_weights(7, 3, &basis).unwrap();
    let expected = [
        0.8968253968253949,
        -0.21428571428571447,
        -0.8095238095238088,
        -0.8888888888888877,
        -0.45238095238095144,
        0.5000000000000006,
        1.9682539682539675,
    ];
    assert_close(&zeta, &expected, 1e-10);
}

#[test]
fn ols_and_wls_forecasts() {
    let y = [1.0, 2.0, 4.0, 3.0];
    let ols = ForecastModel::fit_ols(&y, 1, &TimeBasisConfig::identity()).unwrap();
    assert!((ols.mean_forecast() - 4.5).abs() < 1e-12);
    let w = [1.0, 2.0, 0.5, 1.0];
    let wls = ForecastModel::fit_wls(&y, &w, 1, &TimeBasisConfig::identity()).unwrap();
    assert!((wls.mean_forecast() - 4.177777777777778).abs() < 1e-12);
    let wls2 = ForecastModel::fit_wls(&y, &w, 2, &TimeBasisConfig::identity()).unwrap();
    assert!((wls2.mean_forecast() - 4.544444444444444).abs() < 1e-12);
}

#[test]
fn reference_mdp_exact_returns() {
    let mdp = TabularMdp::reference();
    let (target, behavior) = estimator_policies();
    assert!((mdp.exact_return(&target) - 2.889834035162938).abs() < 1e-12);
    assert!((mdp.exact_return(&behavior) - 0.4385945479181509).abs() < 1e-12);
    assert!((mdp.exact_return(&tabular_policy([0.0; 4])) - 1.665828125).abs() < 1e-12);
}

#[test]
fn two_episode_wis_expectation() {
    let (mean, truth) = exact_wis_mean_two_episodes();
    assert!((mean - 0.9462175919528245).abs() < 1e-12);
    assert!((truth - 2.889834035162938).abs() < 1e-12);
}

fn hand_trajectory() -> (Trajectory, SoftmaxLinearPolicy) {
    let policy =
        SoftmaxLinearPolicy::with_params(3, 2, vec![0.1, -0.3, 0.2, 0.4, -0.1, 0.0]).unwrap();
    let mut traj = Trajectory::new(1);
    traj.push(vec![1.0, 0.5], 0, 0.4, 1.0);
    traj.push(vec![0.0, 1.0], 1, 0.7, -0.5);
    traj.push(vec![1.0, 1.0], 2, 0.2, 2.0);
    (traj, policy)
}

#[test]
fn pdis_on_hand_trajectory() {
    let (traj, policy) = hand_trajectory();
    let plain = pdis_estimate(&traj, &policy, 0.9, None).unwrap();
    assert!((plain - 1.4675792847999818).abs() < 1e-12);
    // Every cumulative ratio stays below 0.8, so this clip is inactive.
    let loose = pdis_estimate(&traj, &policy, 0.9, Some(0.8)).unwrap();
    assert!((loose - plain).abs() < 1e-15);
    let tight = pdis_estimate(&traj, &policy, 0.9, Some(0.3)).unwrap();
    assert!((tight - 0.651).abs() < 1e-12);
}
