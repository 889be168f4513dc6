//! Exact parameter gradients of the forecast objectives.
//!
//! The gradient of an OLS forecast is a weighted sum of per-episode PDIS
//! gradients, the weights being the forecast weights `ζ̄`. The PDIS gradient
//! itself is computed in the "column sum" form
//!
//! ```text
//! ∇Ĵᵢ = Σ_t ∂log π(Aᵗ|Sᵗ)/∂θ · Σ_{l≥t} ρ(0,l) γˡ Rˡ
//! ```
//!
//! which needs one backward pass per step instead of one per `(t, l)` pair.
//!
//! For the WLS forecast only `Λᵢᵢ = ρ‡ᵢ(θ)` depends on the parameters. With
//! `M = ΦᵀΛΦ` and `w‡ = M⁻¹ΦᵀΛG`,
//!
//! ```text
//! ∂(φ̄ w‡)/∂Λᵢᵢ = φ̄ M⁻¹ φᵢᵀ (Gᵢ − φᵢ w‡)
//! ```
//!
//! and `∂ρ‡ᵢ/∂θ = ρ‡ᵢ Σ_t ∂log π(Aᵢᵗ|Sᵢᵗ)/∂θ`.
//!
//! Wherever a cumulative ratio sits at the clip ceiling its derivative is
//! taken to be zero.

use crate::basis::TimeBasisConfig;
use crate::error::{Error, Result};
use crate::estimators::{fit_basis, target_row, OlsForecaster, RatioTrace};
use crate::linalg::{dot, LeastSquares};
use crate::policy::{entropy_and_gradient, Policy};
use crate::trajectory::{ReplayBuffer, Trajectory};

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub gradient: Vec<f64>,
    pub objective_value: f64,
    /// Each episode's share of the forecast term of the objective.
    pub per_episode_contributions: Option<Vec<f64>>,
}

/// Accumulates `scale · ∇Ĵ(traj)` into `grad` and returns `Ĵ(traj)`.
pub fn accumulate_pdis_gradient<P: Policy + ?Sized>(
    traj: &Trajectory,
    policy: &P,
    gamma: f64,
    clip: Option<f64>,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let trace = RatioTrace::compute(traj, policy, clip)?;
    let n = traj.len();
    let mut terms = Vec::with_capacity(n);
    let mut discount = 1.0;
    let mut estimate = 0.0;
    for (t, step) in traj.steps.iter().enumerate() {
        estimate += trace.clipped[t] * discount * step.reward;
        // A clipped ratio is constant in θ.
        terms.push(if trace.active[t] {
            0.0
        } else {
            trace.raw[t] * discount * step.reward
        });
        discount *= gamma;
    }
    if scale != 0.0 {
        let mut tail = 0.0;
        for t in (0..n).rev() {
            tail += terms[t];
            if tail != 0.0 {
                let step = &traj.steps[t];
                policy.accumulate_score(&step.state, step.action, scale * tail, grad);
            }
        }
    }
    Ok(estimate)
}

/// `∇Ĵ(traj)` for the PDIS estimate of one trajectory.
pub fn pdis_gradient<P: Policy + ?Sized>(
    traj: &Trajectory,
    policy: &P,
    gamma: f64,
    clip: Option<f64>,
) -> Result<Vec<f64>> {
    let mut g = vec![0.0; policy.num_params()];
    accumulate_pdis_gradient(traj, policy, gamma, clip, 1.0, &mut g)?;
    Ok(g)
}

/// States visited by a batch of trajectories; the entropy bonus averages
/// over these.
pub fn batch_states(trajs: &[Trajectory]) -> Vec<&[f64]> {
    trajs
        .iter()
        .flat_map(|t| t.steps.iter().map(|s| s.state.as_slice()))
        .collect()
}

fn add_entropy<P: Policy + ?Sized>(
    policy: &P,
    lambda: f64,
    entropy_batch: &[Trajectory],
    report: &mut GradientReport,
) -> Result<()> {
    if lambda == 0.0 {
        return Ok(());
    }
    let states = batch_states(entropy_batch);
    let (h, g) = entropy_and_gradient(policy, &states)?;
    report.objective_value += lambda * h;
    for (a, b) in report.gradient.iter_mut().zip(g) {
        *a += lambda * b;
    }
    Ok(())
}

/// Gradient of `Σᵢ weights[i]·Ĵᵢ(θ) + λ·H(θ)`, with `H` averaged over the
/// states of `entropy_batch`.
///
/// Episodes are reduced in order, so the result is bitwise reproducible.
pub fn weighted_pdis_gradient<P: Policy + ?Sized>(
    trajs: &[Trajectory],
    weights: &[f64],
    policy: &P,
    gamma: f64,
    clip: Option<f64>,
    lambda: f64,
    entropy_batch: &[Trajectory],
) -> Result<GradientReport> {
    if trajs.len() != weights.len() {
        return Err(Error::Dimension(format!(
            "{} weights for {} trajectories",
            weights.len(),
            trajs.len()
        )));
    }
    let mut gradient = vec![0.0; policy.num_params()];
    let mut contributions = Vec::with_capacity(trajs.len());
    for (traj, &w) in trajs.iter().zip(weights) {
        let est = accumulate_pdis_gradient(traj, policy, gamma, clip, w, &mut gradient)?;
        contributions.push(w * est);
    }
    let mut report = GradientReport {
        gradient,
        objective_value: contributions.iter().sum(),
        per_episode_contributions: Some(contributions),
    };
    add_entropy(policy, lambda, entropy_batch, &mut report)?;
    Ok(report)
}

/// Gradient of the mean NIS forecast over the next `δ` episodes plus the
/// entropy bonus over the latest `δ` episodes.
pub fn pro_ols_gradient<P: Policy + ?Sized>(
    buffer: &ReplayBuffer,
    policy: &P,
    gamma: f64,
    clip: Option<f64>,
    basis: &TimeBasisConfig,
    delta: usize,
    lambda: f64,
) -> Result<GradientReport> {
    let forecaster = OlsForecaster::new(buffer.len(), delta, basis)?;
    pro_ols_gradient_with(
        buffer,
        &forecaster.weights,
        policy,
        gamma,
        clip,
        delta,
        lambda,
    )
}

/// [`pro_ols_gradient`] with precomputed forecast weights.
pub fn pro_ols_gradient_with<P: Policy + ?Sized>(
    buffer: &ReplayBuffer,
    weights: &[f64],
    policy: &P,
    gamma: f64,
    clip: Option<f64>,
    delta: usize,
    lambda: f64,
) -> Result<GradientReport> {
    weighted_pdis_gradient(
        buffer.trajectories(),
        weights,
        policy,
        gamma,
        clip,
        lambda,
        buffer.recent(delta),
    )
}

/// Gradient of the uniform average of every past PDIS estimate plus the
/// entropy bonus: the follow-the-leader objective.
pub fn ftrl_gradient<P: Policy + ?Sized>(
    buffer: &ReplayBuffer,
    policy: &P,
    gamma: f64,
    clip: Option<f64>,
    delta: usize,
    lambda: f64,
) -> Result<GradientReport> {
    if buffer.is_empty() {
        return Err(Error::Domain("empty buffer".into()));
    }
    let w = vec![1.0 / buffer.len() as f64; buffer.len()];
    weighted_pdis_gradient(
        buffer.trajectories(),
        &w,
        policy,
        gamma,
        clip,
        lambda,
        buffer.recent(delta),
    )
}

/// Gradient of the mean PDIS estimate over one batch (on-policy it is the
/// REINFORCE estimator) plus the entropy bonus over the same batch.
pub fn batch_gradient<P: Policy + ?Sized>(
    batch: &[Trajectory],
    policy: &P,
    gamma: f64,
    clip: Option<f64>,
    lambda: f64,
) -> Result<GradientReport> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let w = vec![1.0 / batch.len() as f64; batch.len()];
    weighted_pdis_gradient(batch, &w, policy, gamma, clip, lambda, batch)
}

/// Gradient of the mean NWIS forecast over the next `δ` episodes plus the
/// entropy bonus.
///
/// With `stop_gradient_weights` the importance weights `Λ` are treated as
/// constants. Since the regression targets are plain returns, the forecast
/// term then contributes nothing and only the entropy gradient remains.
#[allow(clippy::too_many_arguments)]
pub fn pro_wls_gradient<P: Policy + ?Sized>(
    buffer: &ReplayBuffer,
    policy: &P,
    gamma: f64,
    clip: Option<f64>,
    basis: &TimeBasisConfig,
    delta: usize,
    lambda: f64,
    stop_gradient_weights: bool,
) -> Result<GradientReport> {
    let k = buffer.len();
    if k < basis.dimension() {
        return Err(Error::Domain(format!(
            "need at least {} episodes for a {}-dimensional basis, have {k}",
            basis.dimension(),
            basis.dimension()
        )));
    }
    let basis = fit_basis(basis, k, delta)?;
    let design = basis.history_matrix(k)?;
    let target = target_row(&basis, k, delta)?;

    let traces = buffer
        .iter()
        .map(|t| RatioTrace::compute(t, policy, clip))
        .collect::<Result<Vec<_>>>()?;
    let ratios: Vec<f64> = traces.iter().map(RatioTrace::full).collect();
    let returns: Vec<f64> = buffer.iter().map(|t| t.discounted_return(gamma)).collect();

    let ls = LeastSquares::new(&design, Some(&ratios))?;
    let coefficients = ls.coefficients(&design, &returns, Some(&ratios))?;
    let projected = ls.solve_gram(&target);
    let forecast = dot(&target, &coefficients);

    let mut gradient = vec![0.0; policy.num_params()];
    let mut contributions = Vec::with_capacity(k);
    for (i, traj) in buffer.iter().enumerate() {
        let row = design.row(i);
        let leverage = dot(row, &projected);
        contributions.push(leverage * ratios[i] * returns[i]);
        if stop_gradient_weights || traces[i].full_is_clipped() {
            continue;
        }
        let residual = returns[i] - dot(row, &coefficients);
        let scale = leverage * residual * ratios[i];
        if scale == 0.0 {
            continue;
        }
        for step in &traj.steps {
            policy.accumulate_score(&step.state, step.action, scale, &mut gradient);
        }
    }
    let mut report = GradientReport {
        gradient,
        objective_value: forecast,
        per_episode_contributions: Some(contributions),
    };
    add_entropy(policy, lambda, buffer.recent(delta), &mut report)?;
    Ok(report)
}

/// FNV-1a hash of which cumulative ratios sit at the clip ceiling. Two
/// parameter vectors with equal signatures lie in the same smooth piece of
/// a clipped objective.
pub fn clip_signature<P: Policy + ?Sized>(
    trajs: &[Trajectory],
    policy: &P,
    clip: Option<f64>,
) -> Result<u64> {
    let mut h: u64 = 0xcbf29ce484222325;
    for t in trajs {
        for active in RatioTrace::compute(t, policy, clip)?.active {
            h ^= active as u64 + 1;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    Ok(h)
}

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    /// `max_j |analytic_j − fd_j| / (|fd_j| + 1e-8)` over compared coordinates.
    pub max_relative_error: f64,
    pub compared: usize,
    /// Coordinates whose perturbation changed the clip regime.
    pub skipped: usize,
}

/// Max relative error between `analytic` and central differences of
/// `objective` at `theta`.
pub fn finite_difference_check<F>(
    mut objective: F,
    theta: &[f64],
    analytic: &[f64],
    epsilon: f64,
) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    finite_difference_check_regimes(|x| (objective(x), 0), theta, analytic, epsilon)
        .max_relative_error
}

/// Like [`finite_difference_check`] for piecewise-smooth objectives:
/// `objective` also returns a regime key, and coordinates where a
/// perturbation changes the key are left out of the comparison.
pub fn finite_difference_check_regimes<F>(
    mut objective: F,
    theta: &[f64],
    analytic: &[f64],
    epsilon: f64,
) -> FdReport
where
    F: FnMut(&[f64]) -> (f64, u64),
{
    assert_eq!(
        theta.len(),
        analytic.len(),
        "gradient and parameters differ in length"
    );
    let (_, base) = objective(theta);
    let mut x = theta.to_vec();
    let mut report = FdReport {
        max_relative_error: 0.0,
        compared: 0,
        skipped: 0,
    };
    for j in 0..theta.len() {
        x[j] = theta[j] + epsilon;
        let (hi, key_hi) = objective(&x);
        x[j] = theta[j] - epsilon;
        let (lo, key_lo) = objective(&x);
        x[j] = theta[j];
        if key_hi != base || key_lo != base {
            report.skipped += 1;
            continue;
        }
        let fd = (hi - lo) / (2.0 * epsilon);
        let err = (analytic[j] - fd).abs() / (fd.abs() + 1e-8);
        report.max_relative_error = report.max_relative_error.max(err);
        report.compared += 1;
    }
    report
}
