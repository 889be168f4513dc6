//! Counter-factual performance estimates and forecasts of future
//! performance.
//!
//! Past performance of a target policy is estimated from each logged
//! episode with per-decision importance sampling (PDIS). A least-squares fit
//! of those estimates against time features then extrapolates to the next
//! `δ` episodes:
//!
//! * **NIS** regresses the PDIS estimates with ordinary least squares.
//! * **NWIS** regresses plain discounted returns with weighted least
//!   squares, weighting each episode by its full-trajectory importance ratio.
//!   With a constant basis this is exactly weighted importance sampling.
//!
//! Importance ratios are clipped at a configurable ceiling. Clipping acts on
//! the cumulative product `ρ(0, t)`, never on the individual per-step ratios.

use crate::basis::TimeBasisConfig;
use crate::error::{Error, Result};
use crate::linalg::{dot, LeastSquares, Matrix};
use crate::policy::{Policy, MAX_ACTIONS};
use crate::trajectory::{ReplayBuffer, Trajectory};

/// Cumulative importance ratios of one trajectory under a target policy.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioTrace {
    /// `ρ(0, t)` before clipping.
    pub raw: Vec<f64>,
    /// `min(ρ(0, t), clip)`.
    pub clipped: Vec<f64>,
    /// Whether the ceiling was active at step `t`.
    pub active: Vec<bool>,
}

impl RatioTrace {
    pub fn compute<P: Policy + ?Sized>(
        traj: &Trajectory,
        policy: &P,
        clip: Option<f64>,
    ) -> Result<Self> {
        let n = traj.len();
        let mut trace = RatioTrace {
            raw: Vec::with_capacity(n),
            clipped: Vec::with_capacity(n),
            active: Vec::with_capacity(n),
        };
        let mut probs = [0.0; MAX_ACTIONS];
        let probs = &mut probs[..policy.num_actions()];
        let mut rho = 1.0;
        for (t, step) in traj.steps.iter().enumerate() {
            if !(step.behavior_prob > 0.0) {
                return Err(Error::DataCorruption(format!(
                    "episode {} step {t}: behavior probability {}",
                    traj.episode_index, step.behavior_prob
                )));
            }
            if step.action >= probs.len() {
                return Err(Error::Domain(format!(
                    "episode {} step {t}: action {} out of range",
                    traj.episode_index, step.action
                )));
            }
            policy.probabilities_into(&step.state, probs);
            rho *= probs[step.action] / step.behavior_prob;
            let (value, hit) = match clip {
                Some(c) if rho > c => (c, true),
                _ => (rho, false),
            };
            trace.raw.push(rho);
            trace.clipped.push(value);
            trace.active.push(hit);
        }
        Ok(trace)
    }

    /// Clipped importance ratio of the whole trajectory (1 for an empty one).
    pub fn full(&self) -> f64 {
        self.clipped.last().copied().unwrap_or(1.0)
    }

    pub fn full_is_clipped(&self) -> bool {
        self.active.last().copied().unwrap_or(false)
    }
}

/// `Σ_t min(ρ(0,t), clip) γ^t r_t`.
pub fn pdis_estimate<P: Policy + ?Sized>(
    traj: &Trajectory,
    policy: &P,
    gamma: f64,
    clip: Option<f64>,
) -> Result<f64> {
    let trace = RatioTrace::compute(traj, policy, clip)?;
    let mut discount = 1.0;
    let mut total = 0.0;
    for (w, step) in trace.clipped.iter().zip(&traj.steps) {
        total += w * discount * step.reward;
        discount *= gamma;
    }
    Ok(total)
}

/// Clipped importance ratio of the entire trajectory.
pub fn trajectory_ratio<P: Policy + ?Sized>(
    traj: &Trajectory,
    policy: &P,
    clip: Option<f64>,
) -> Result<f64> {
    Ok(RatioTrace::compute(traj, policy, clip)?.full())
}

/// The basis normalized for a fit over `k` episodes forecasting `delta`
/// episodes ahead.
pub fn fit_basis(basis: &TimeBasisConfig, k: usize, delta: usize) -> Result<TimeBasisConfig> {
    basis.with_horizon(k + delta)
}

/// Mean feature row `φ̄ = (1/δ) Σ_{Δ=1..δ} φ(k+Δ)` over the forecast horizon.
pub fn target_row(basis: &TimeBasisConfig, k: usize, delta: usize) -> Result<Vec<f64>> {
    if delta == 0 {
        return Err(Error::Domain(
            "forecast horizon must be at least one episode".into(),
        ));
    }
    let mut mean = vec![0.0; basis.dimension()];
    for step in 1..=delta {
        for (m, v) in mean.iter_mut().zip(basis.encode_time(k + step)?) {
            *m += v / delta as f64;
        }
    }
    Ok(mean)
}

fn check_history(k: usize, basis: &TimeBasisConfig) -> Result<()> {
    if k < basis.dimension() {
        return Err(Error::Domain(format!(
            "need at least {} episodes for a {}-dimensional basis, have {k}",
            basis.dimension(),
            basis.dimension()
        )));
    }
    Ok(())
}

/// `ζ̄ᵢ = (1/δ) Σ_Δ [φ(k+Δ)(ΦᵀΦ)⁻¹Φᵀ]ᵢ`: how much the mean forecast over the
/// next `δ` episodes moves per unit change of episode `i`'s estimate.
///
/// Only the family and dimension of `basis` are used; the normalization
/// horizon is set to `k + delta`.
pub fn forecast_weights(k: usize, delta: usize, basis: &TimeBasisConfig) -> Result<Vec<f64>> {
    Ok(OlsForecaster::new(k, delta, basis)?.weights)
}

/// Everything about an OLS forecast that does not depend on the targets.
#[derive(Debug, Clone)]
pub struct OlsForecaster {
    pub basis: TimeBasisConfig,
    pub design: Matrix,
    pub target: Vec<f64>,
    pub weights: Vec<f64>,
    pub gram_inverse: Matrix,
}

impl OlsForecaster {
    pub fn new(k: usize, delta: usize, basis: &TimeBasisConfig) -> Result<Self> {
        check_history(k, basis)?;
        let basis = fit_basis(basis, k, delta)?;
        let design = basis.history_matrix(k)?;
        let target = target_row(&basis, k, delta)?;
        let ls = LeastSquares::new(&design, None)?;
        let projected = ls.solve_gram(&target);
        let weights = (0..k).map(|i| dot(design.row(i), &projected)).collect();
        Ok(Self {
            basis,
            design,
            target,
            weights,
            gram_inverse: ls.gram_inverse(),
        })
    }
}

/// A fitted forecaster: coefficients plus the per-episode weights that map
/// the regression targets onto the `δ`-mean forecast.
#[derive(Debug, Clone)]
pub struct ForecastModel {
    pub basis: TimeBasisConfig,
    pub coefficients: Vec<f64>,
    /// `ζ̄` for NIS; `ζ̄ᵢ · Λᵢᵢ` for NWIS. Either way the forecast is
    /// `Σᵢ forecast_weights[i] · targets[i]`.
    pub forecast_weights: Vec<f64>,
    pub weighted: bool,
    pub gram_inverse: Matrix,
    pub targets: Vec<f64>,
    k: usize,
    delta: usize,
}

impl ForecastModel {
    /// Ordinary least squares fit of `targets` (one per episode `1..=k`).
    pub fn fit_ols(targets: &[f64], delta: usize, basis: &TimeBasisConfig) -> Result<Self> {
        let k = targets.len();
        let f = OlsForecaster::new(k, delta, basis)?;
        let coefficients =
            LeastSquares::new(&f.design, None)?.coefficients(&f.design, targets, None)?;
        Ok(Self {
            basis: f.basis,
            coefficients,
            forecast_weights: f.weights,
            weighted: false,
            gram_inverse: f.gram_inverse,
            targets: targets.to_vec(),
            k,
            delta,
        })
    }

    /// Weighted least squares fit with row weights `Λ`.
    pub fn fit_wls(
        targets: &[f64],
        row_weights: &[f64],
        delta: usize,
        basis: &TimeBasisConfig,
    ) -> Result<Self> {
        let k = targets.len();
        check_history(k, basis)?;
        if row_weights.len() != k {
            return Err(Error::Dimension(format!(
                "{} weights for {k} targets",
                row_weights.len()
            )));
        }
        let basis = fit_basis(basis, k, delta)?;
        let design = basis.history_matrix(k)?;
        let target = target_row(&basis, k, delta)?;
        let ls = LeastSquares::new(&design, Some(row_weights))?;
        let coefficients = ls.coefficients(&design, targets, Some(row_weights))?;
        let projected = ls.solve_gram(&target);
        let forecast_weights = (0..k)
            .map(|i| dot(design.row(i), &projected) * row_weights[i])
            .collect();
        Ok(Self {
            basis,
            coefficients,
            forecast_weights,
            weighted: true,
            gram_inverse: ls.gram_inverse(),
            targets: targets.to_vec(),
            k,
            delta,
        })
    }

    /// `φ(k+Δ)·w` for `Δ = 1..=δ`.
    pub fn forecasts(&self) -> Result<Vec<f64>> {
        (1..=self.delta)
            .map(|step| {
                Ok(dot(
                    &self.basis.encode_time(self.k + step)?,
                    &self.coefficients,
                ))
            })
            .collect()
    }

    /// Mean forecast over the horizon.
    pub fn mean_forecast(&self) -> f64 {
        dot(&self.forecast_weights, &self.targets)
    }
}

/// PDIS estimate of every episode in the buffer under `policy`.
pub fn pdis_estimates<P: Policy + ?Sized>(
    buffer: &ReplayBuffer,
    policy: &P,
    gamma: f64,
    clip: Option<f64>,
) -> Result<Vec<f64>> {
    buffer
        .iter()
        .map(|t| pdis_estimate(t, policy, gamma, clip))
        .collect()
}

/// NIS forecasts of the next `δ` episodes.
pub fn nis_forecast<P: Policy + ?Sized>(
    buffer: &ReplayBuffer,
    policy: &P,
    gamma: f64,
    clip: Option<f64>,
    basis: &TimeBasisConfig,
    delta: usize,
) -> Result<Vec<f64>> {
    nis_model(buffer, policy, gamma, clip, basis, delta)?.forecasts()
}

pub fn nis_model<P: Policy + ?Sized>(
    buffer: &ReplayBuffer,
    policy: &P,
    gamma: f64,
    clip: Option<f64>,
    basis: &TimeBasisConfig,
    delta: usize,
) -> Result<ForecastModel> {
    check_history(buffer.len(), basis)?;
    let targets = pdis_estimates(buffer, policy, gamma, clip)?;
    ForecastModel::fit_ols(&targets, delta, basis)
}

/// NWIS forecasts of the next `δ` episodes.
pub fn nwis_forecast<P: Policy + ?Sized>(
    buffer: &ReplayBuffer,
    policy: &P,
    gamma: f64,
    clip: Option<f64>,
    basis: &TimeBasisConfig,
    delta: usize,
) -> Result<Vec<f64>> {
    nwis_model(buffer, policy, gamma, clip, basis, delta)?.forecasts()
}

pub fn nwis_model<P: Policy + ?Sized>(
    buffer: &ReplayBuffer,
    policy: &P,
    gamma: f64,
    clip: Option<f64>,
    basis: &TimeBasisConfig,
    delta: usize,
) -> Result<ForecastModel> {
    check_history(buffer.len(), basis)?;
    let returns: Vec<f64> = buffer.iter().map(|t| t.discounted_return(gamma)).collect();
    let ratios = buffer
        .iter()
        .map(|t| trajectory_ratio(t, policy, clip))
        .collect::<Result<Vec<_>>>()?;
    ForecastModel::fit_wls(&returns, &ratios, delta, basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisFamily;
    use crate::policy::SoftmaxLinearPolicy;
    use proptest::prelude::*;

    /// Two-action bandit policy with `π(0) = p0`.
    fn bandit_policy(p0: f64) -> SoftmaxLinearPolicy {
        SoftmaxLinearPolicy::with_params(2, 1, vec![(p0 / (1.0 - p0)).ln(), 0.0]).unwrap()
    }

    fn one_step(index: usize, action: usize, beta: f64, reward: f64) -> Trajectory {
        let mut t = Trajectory::new(index);
        t.push(vec![1.0], action, beta, reward);
        t
    }

    #[test]
    fn on_policy_pdis_is_the_return() {
        let pi = bandit_policy(0.3);
        let mut t = Trajectory::new(1);
        t.push(vec![1.0], 0, 0.3, 1.0);
        t.push(vec![1.0], 1, 0.7, 2.0);
        t.push(vec![1.0], 1, 0.7, -1.0);
        let est = pdis_estimate(&t, &pi, 0.9, None).unwrap();
        assert!((est - t.discounted_return(0.9)).abs() < 1e-12);
    }

    #[test]
    fn one_step_ratio_two() {
        let pi = bandit_policy(0.5);
        let t = one_step(1, 0, 0.25, 2.0);
        assert!((pdis_estimate(&t, &pi, 0.99, None).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn two_step_hand_expansion() {
        // Step ratios (2, 0.5): π(0)=0.5 against β=0.25, then π(1)=0.5 against β=1.
        let pi = bandit_policy(0.5);
        let mut t = Trajectory::new(1);
        t.push(vec![1.0], 0, 0.25, 1.0);
        t.push(vec![1.0], 1, 1.0, 4.0);
        assert!((pdis_estimate(&t, &pi, 0.5, None).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn full_trajectory_ratios() {
        let pi = bandit_policy(0.5);
        let t = one_step(1, 0, 0.5, 1.0);
        assert_eq!(trajectory_ratio(&t, &pi, Some(10.0)).unwrap(), 1.0);

        // Ratios (4, 5) multiply to 20 and are clipped at 10.
        let pi = bandit_policy(0.8);
        let mut t = Trajectory::new(1);
        t.push(vec![1.0], 0, 0.2, 0.0);
        t.push(vec![1.0], 0, 0.16, 0.0);
        let trace = RatioTrace::compute(&t, &pi, Some(10.0)).unwrap();
        assert!((trace.raw[1] - 20.0).abs() < 1e-12);
        assert_eq!(trace.full(), 10.0);
        assert!(trace.full_is_clipped() && !trace.active[0]);

        let pi = bandit_policy(0.5);
        let mut t = Trajectory::new(1);
        t.push(vec![1.0], 0, 1.0, 0.0);
        t.push(vec![1.0], 1, 1.0, 0.0);
        assert!((trajectory_ratio(&t, &pi, None).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_behavior_probability_is_corruption() {
        let pi = bandit_policy(0.5);
        let t = one_step(1, 0, 0.0, 1.0);
        assert!(matches!(
            pdis_estimate(&t, &pi, 1.0, None),
            Err(Error::DataCorruption(_))
        ));
    }

    #[test]
    fn identity_weights_by_hand() {
        let z = forecast_weights(3, 1, &TimeBasisConfig::identity()).unwrap();
        let expected = [-2.0 / 3.0, 1.0 / 3.0, 4.0 / 3.0];
        for (a, b) in z.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{z:?}");
        }
    }

    #[test]
    fn constant_weights_are_uniform() {
        for k in [1, 4, 17] {
            for delta in [1, 3, 5] {
                let z = forecast_weights(k, delta, &TimeBasisConfig::constant()).unwrap();
                assert!(z.iter().all(|w| (w - 1.0 / k as f64).abs() < 1e-15));
            }
        }
    }

    #[test]
    fn too_little_history_is_a_domain_error() {
        let b = TimeBasisConfig::new(BasisFamily::FourierCosine, 5, 1).unwrap();
        assert!(matches!(forecast_weights(4, 1, &b), Err(Error::Domain(_))));
    }

    #[test]
    fn linear_forecast_extrapolates() {
        let m = ForecastModel::fit_ols(&[2.0, 4.0, 6.0], 1, &TimeBasisConfig::identity()).unwrap();
        assert!((m.forecasts().unwrap()[0] - 8.0).abs() < 1e-10);
        assert!((m.mean_forecast() - 8.0).abs() < 1e-10);
    }

    #[test]
    fn hand_wis() {
        let m = ForecastModel::fit_wls(&[2.0, 6.0], &[1.0, 3.0], 1, &TimeBasisConfig::constant())
            .unwrap();
        assert!((m.forecasts().unwrap()[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn all_zero_ratios_are_degenerate() {
        let r = ForecastModel::fit_wls(&[1.0, 2.0], &[0.0, 0.0], 1, &TimeBasisConfig::constant());
        assert!(matches!(r, Err(Error::DegenerateWeights)));
    }

    #[test]
    fn on_policy_nwis_matches_nis() {
        let pi = bandit_policy(0.4);
        let mut buf = ReplayBuffer::new();
        for i in 1..=8 {
            let a = i % 2;
            let beta = if a == 0 { 0.4 } else { 0.6 };
            buf.insert(one_step(i, a, beta, (i as f64).sin())).unwrap();
        }
        let basis = TimeBasisConfig::new(BasisFamily::FourierCosine, 3, 1).unwrap();
        let a = nis_forecast(&buf, &pi, 0.99, Some(10.0), &basis, 3).unwrap();
        let b = nwis_forecast(&buf, &pi, 0.99, Some(10.0), &basis, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn constant_targets_forecast_constant(
            c in -5.0f64..5.0,
            extra in 0usize..30,
            delta in 1usize..6,
            d in 3usize..8,
            family in prop::sample::select(vec![BasisFamily::FourierCosine, BasisFamily::Polynomial]),
        ) {
            let basis = TimeBasisConfig::new(family, d, 1).unwrap();
            let k = d + extra;
            let m = ForecastModel::fit_ols(&vec![c; k], delta, &basis).unwrap();
            for f in m.forecasts().unwrap() {
                prop_assert!((f - c).abs() < 1e-6);
            }
        }

        #[test]
        fn nwis_constant_basis_is_wis(
            data in proptest::collection::vec((-3.0f64..3.0, 0.01f64..10.0), 1..40),
        ) {
            let (g, rho): (Vec<f64>, Vec<f64>) = data.into_iter().unzip();
            let m = ForecastModel::fit_wls(&g, &rho, 1, &TimeBasisConfig::constant()).unwrap();
            let wis = g.iter().zip(&rho).map(|(g, r)| g * r).sum::<f64>() / rho.iter().sum::<f64>();
            prop_assert!((m.forecasts().unwrap()[0] - wis).abs() < 1e-12);
        }
    }
}
