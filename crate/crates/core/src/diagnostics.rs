//! Self-checks: finite-difference verification of every gradient and Monte
//! Carlo checks of the forecasters' statistical properties.
//!
//! Both run on a small stationary MDP whose expected return is computed
//! exactly by enumerating every trajectory, so estimator errors can be
//! measured against ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::basis::{BasisFamily, TimeBasisConfig};
use crate::error::Result;
use crate::estimators::{nis_model, nwis_model, pdis_estimate, trajectory_ratio};
use crate::gradients::{
    clip_signature, finite_difference_check_regimes, pdis_gradient, pro_ols_gradient,
    pro_wls_gradient,
};
use crate::harness::mean_and_se;
use crate::policy::{
    entropy_and_gradient, MlpSoftmaxPolicy, Policy, PolicyModel, SoftmaxLinearPolicy,
};
use crate::trajectory::{ReplayBuffer, Trajectory};

/// Finite episodic MDP with one-hot state observations.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub start: Vec<f64>,
    /// `transition[s][a][s']`.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `reward[s][a]`.
    pub reward: Vec<Vec<f64>>,
    pub horizon: usize,
    pub gamma: f64,
}

impl TabularMdp {
    /// Two states, two actions, three steps.
    pub fn reference() -> Self {
        Self {
            start: vec![0.7, 0.3],
            transition: vec![
                vec![vec![0.8, 0.2], vec![0.3, 0.7]],
                vec![vec![0.5, 0.5], vec![0.1, 0.9]],
            ],
            reward: vec![vec![1.0, 0.0], vec![-0.5, 2.0]],
            horizon: 3,
            gamma: 0.9,
        }
    }

    /// Random two-state, two-action, three-step MDP.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let dist = |rng: &mut R| {
            let p: f64 = rng.random_range(0.1..0.9);
            vec![p, 1.0 - p]
        };
        let start = dist(rng);
        let transition = (0..2)
            .map(|_| (0..2).map(|_| dist(rng)).collect())
            .collect();
        let reward = (0..2)
            .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        Self {
            start,
            transition,
            reward,
            horizon: 3,
            gamma: 0.95,
        }
    }

    pub fn num_states(&self) -> usize {
        self.start.len()
    }

    pub fn num_actions(&self) -> usize {
        self.reward[0].len()
    }

    pub fn observation(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.num_states()];
        v[s] = 1.0;
        v
    }

    fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }

    /// One episode under `policy`, recording its action probabilities.
    pub fn sample<P: Policy + ?Sized, R: Rng + ?Sized>(
        &self,
        policy: &P,
        episode_index: usize,
        rng: &mut R,
    ) -> Trajectory {
        let mut traj = Trajectory::new(episode_index);
        let mut s = Self::draw(&self.start, rng);
        for _ in 0..self.horizon {
            let obs = self.observation(s);
            let (a, p) = policy.sample_action(&obs, rng);
            traj.push(obs, a, p, self.reward[s][a]);
            s = Self::draw(&self.transition[s][a], rng);
        }
        traj
    }

    pub fn sample_buffer<P: Policy + ?Sized, R: Rng + ?Sized>(
        &self,
        policy: &P,
        k: usize,
        rng: &mut R,
    ) -> ReplayBuffer {
        let mut buf = ReplayBuffer::new();
        for i in 1..=k {
            buf.insert(self.sample(policy, i, rng))
                .expect("sequential indices");
        }
        buf
    }

    /// Every possible episode with its probability under `policy`.
    pub fn enumerate<P: Policy + ?Sized>(&self, policy: &P) -> Vec<(f64, Trajectory)> {
        let mut out = Vec::new();
        for s0 in 0..self.num_states() {
            let traj = Trajectory::new(1);
            self.extend(policy, s0, self.start[s0], traj, &mut out);
        }
        out
    }

    fn extend<P: Policy + ?Sized>(
        &self,
        policy: &P,
        s: usize,
        prob: f64,
        traj: Trajectory,
        out: &mut Vec<(f64, Trajectory)>,
    ) {
        if prob == 0.0 {
            return;
        }
        let obs = self.observation(s);
        let pi = policy.action_probabilities(&obs);
        for (a, &pa) in pi.iter().enumerate() {
            let mut t = traj.clone();
            t.push(obs.clone(), a, pa, self.reward[s][a]);
            if t.len() == self.horizon {
                out.push((prob * pa, t));
                continue;
            }
            for (s2, &ps) in self.transition[s][a].iter().enumerate() {
                self.extend(policy, s2, prob * pa * ps, t.clone(), out);
            }
        }
    }

    /// `J(π)` by summing over every episode.
    pub fn exact_return<P: Policy + ?Sized>(&self, policy: &P) -> f64 {
        self.enumerate(policy)
            .iter()
            .map(|(p, t)| p * t.discounted_return(self.gamma))
            .sum()
    }
}

/// Softmax-linear policy over one-hot states with the given logits.
pub fn tabular_policy(theta: [f64; 4]) -> SoftmaxLinearPolicy {
    SoftmaxLinearPolicy::with_params(2, 2, theta.to_vec()).expect("2 actions × 2 features")
}

/// Result of one finite-difference suite.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub name: &'static str,
    pub instances: usize,
    pub max_relative_error: f64,
    pub compared: usize,
    /// Coordinates left out because a perturbation changed the clip regime.
    pub skipped: usize,
}

impl GradientCheck {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            instances: 0,
            max_relative_error: 0.0,
            compared: 0,
            skipped: 0,
        }
    }
}

/// A random policy over one-hot states of the 2-state MDP: linear or a
/// small tanh network, with parameters of moderate size.
fn random_policy<R: Rng + ?Sized>(rng: &mut R, instance: usize) -> PolicyModel {
    if instance % 2 == 0 {
        let theta = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        PolicyModel::Linear(SoftmaxLinearPolicy::with_params(2, 2, theta).expect("shape"))
    } else {
        let n = MlpSoftmaxPolicy::param_count(2, 4, 2);
        let theta = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        PolicyModel::Mlp(MlpSoftmaxPolicy::with_params(2, 4, 2, theta).expect("shape"))
    }
}

fn with_params(policy: &PolicyModel, theta: &[f64]) -> PolicyModel {
    let mut p = policy.clone();
    p.params_mut().copy_from_slice(theta);
    p
}

/// Finite-difference checks of the PDIS, Pro-OLS, Pro-WLS and entropy
/// gradients on `instances` random problems each. Objectives are evaluated
/// through the estimators, independently of the gradient code.
pub fn gradient_checks(seed: u64, instances: usize, epsilon: f64) -> Result<Vec<GradientCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pdis = GradientCheck::new("pdis_gradient");
    let mut ols = GradientCheck::new("pro_ols_gradient");
    let mut wls = GradientCheck::new("pro_wls_gradient");
    let mut entropy = GradientCheck::new("entropy_gradient");
    let bases = [
        TimeBasisConfig::new(BasisFamily::FourierCosine, 3, 1)?,
        TimeBasisConfig::new(BasisFamily::Polynomial, 3, 1)?,
        TimeBasisConfig::identity(),
        TimeBasisConfig::constant(),
    ];
    let fold = |check: &mut GradientCheck, r: crate::gradients::FdReport| {
        check.instances += 1;
        check.max_relative_error = check.max_relative_error.max(r.max_relative_error);
        check.compared += r.compared;
        check.skipped += r.skipped;
    };

    for i in 0..instances {
        let mdp = TabularMdp::random(&mut rng);
        let target = random_policy(&mut rng, i);
        // Half of the instances log data with the target policy itself.
        let behavior = if i % 4 == 1 {
            target.clone()
        } else {
            random_policy(&mut rng, i)
        };
        let k = rng.random_range(6..=12);
        let buffer = mdp.sample_buffer(&behavior, k, &mut rng);
        let clip = if i % 3 == 0 {
            Some(rng.random_range(1.5..4.0))
        } else {
            None
        };
        let delta = [1, 3, 5][i % 3];
        let lambda = rng.random_range(0.0..0.05);
        let basis = &bases[i % bases.len()];
        let gamma = mdp.gamma;
        let theta = target.params().to_vec();
        let trajs = buffer.trajectories();

        let traj = &trajs[i % k];
        let g = pdis_gradient(traj, &target, gamma, clip)?;
        fold(
            &mut pdis,
            finite_difference_check_regimes(
                |x| {
                    let p = with_params(&target, x);
                    let v = pdis_estimate(traj, &p, gamma, clip).expect("valid data");
                    (
                        v,
                        clip_signature(std::slice::from_ref(traj), &p, clip).expect("valid data"),
                    )
                },
                &theta,
                &g,
                epsilon,
            ),
        );

        let recent = buffer.recent(delta);
        let entropy_term = |p: &PolicyModel| -> f64 {
            if lambda == 0.0 {
                return 0.0;
            }
            let states = crate::gradients::batch_states(recent);
            lambda * entropy_and_gradient(p, &states).expect("nonempty").0
        };

        let g = pro_ols_gradient(&buffer, &target, gamma, clip, basis, delta, lambda)?;
        fold(
            &mut ols,
            finite_difference_check_regimes(
                |x| {
                    let p = with_params(&target, x);
                    let model = nis_model(&buffer, &p, gamma, clip, basis, delta).expect("fit");
                    (
                        model.mean_forecast() + entropy_term(&p),
                        clip_signature(trajs, &p, clip).expect("valid"),
                    )
                },
                &theta,
                &g.gradient,
                epsilon,
            ),
        );

        let g = pro_wls_gradient(&buffer, &target, gamma, clip, basis, delta, lambda, false)?;
        fold(
            &mut wls,
            finite_difference_check_regimes(
                |x| {
                    let p = with_params(&target, x);
                    let model = nwis_model(&buffer, &p, gamma, clip, basis, delta).expect("fit");
                    (
                        model.mean_forecast() + entropy_term(&p),
                        clip_signature(trajs, &p, clip).expect("valid"),
                    )
                },
                &theta,
                &g.gradient,
                epsilon,
            ),
        );

        let states = crate::gradients::batch_states(trajs);
        let (_, g) = entropy_and_gradient(&target, &states)?;
        fold(
            &mut entropy,
            finite_difference_check_regimes(
                |x| {
                    let p = with_params(&target, x);
                    (entropy_and_gradient(&p, &states).expect("nonempty").0, 0)
                },
                &theta,
                &g,
                epsilon,
            ),
        );
    }
    Ok(vec![pdis, ols, wls, entropy])
}

/// Monte Carlo estimate of an estimator's mean next to the exact value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloSummary {
    pub truth: f64,
    pub mean: f64,
    pub standard_error: f64,
    pub repetitions: usize,
}

impl MonteCarloSummary {
    fn from_values(truth: f64, values: &[f64]) -> Self {
        let (mean, standard_error) = mean_and_se(values);
        Self {
            truth,
            mean,
            standard_error,
            repetitions: values.len(),
        }
    }

    /// `|mean − truth|` in standard errors.
    pub fn z_score(&self) -> f64 {
        (self.mean - self.truth).abs() / self.standard_error
    }
}

/// Target and behavior policies of the statistical checks. The behavior
/// policy favors the action the target avoids.
pub fn estimator_policies() -> (SoftmaxLinearPolicy, SoftmaxLinearPolicy) {
    (
        tabular_policy([1.0, -0.5, -0.8, 0.6]),
        tabular_policy([-0.8, 0.5, 0.6, -0.6]),
    )
}

/// Repeated NIS forecasts from `k` behavior episodes of the stationary
/// reference MDP, each compared to the exact `J(π)`.
pub fn nis_unbiasedness(
    seed: u64,
    repetitions: usize,
    k: usize,
    delta: usize,
    basis: &TimeBasisConfig,
) -> Result<MonteCarloSummary> {
    let mdp = TabularMdp::reference();
    let (target, behavior) = estimator_policies();
    let truth = mdp.exact_return(&target);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..repetitions)
        .map(|_| {
            let buf = mdp.sample_buffer(&behavior, k, &mut rng);
            nis_model(&buf, &target, mdp.gamma, None, basis, delta).map(|m| m.mean_forecast())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MonteCarloSummary::from_values(truth, &values))
}

/// Same as [`nis_unbiasedness`] for the NWIS forecaster.
pub fn nwis_monte_carlo(
    seed: u64,
    repetitions: usize,
    k: usize,
    delta: usize,
    basis: &TimeBasisConfig,
) -> Result<MonteCarloSummary> {
    let mdp = TabularMdp::reference();
    let (target, behavior) = estimator_policies();
    let truth = mdp.exact_return(&target);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..repetitions)
        .map(|_| {
            let buf = mdp.sample_buffer(&behavior, k, &mut rng);
            nwis_model(&buf, &target, mdp.gamma, None, basis, delta).map(|m| m.mean_forecast())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MonteCarloSummary::from_values(truth, &values))
}

/// Exact expectation of the two-episode WIS estimate `Σρ‡G/Σρ‡` under the
/// behavior policy, by enumerating every ordered pair of episodes. Pairs
/// with zero total weight contribute nothing.
pub fn exact_wis_mean_two_episodes() -> (f64, f64) {
    let mdp = TabularMdp::reference();
    let (target, behavior) = estimator_policies();
    let episodes: Vec<(f64, f64, f64)> = mdp
        .enumerate(&behavior)
        .into_iter()
        .map(|(p, t)| {
            let rho = trajectory_ratio(&t, &target, None).expect("positive probabilities");
            (p, rho, t.discounted_return(mdp.gamma))
        })
        .collect();
    let mut mean = 0.0;
    for &(p1, r1, g1) in &episodes {
        for &(p2, r2, g2) in &episodes {
            let w = r1 + r2;
            if w > 0.0 {
                mean += p1 * p2 * (r1 * g1 + r2 * g2) / w;
            }
        }
    }
    (mean, mdp.exact_return(&target))
}

/// Mean absolute forecast error of NIS and NWIS after `n` episodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyPoint {
    pub episodes: usize,
    pub nis_error: f64,
    pub nwis_error: f64,
}

/// Mean absolute error of both forecasters over `repetitions` independent
/// buffers for each episode count.
pub fn consistency(
    seed: u64,
    repetitions: usize,
    counts: &[usize],
    basis: &TimeBasisConfig,
) -> Result<Vec<ConsistencyPoint>> {
    let mdp = TabularMdp::reference();
    let (target, behavior) = estimator_policies();
    let truth = mdp.exact_return(&target);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    counts
        .iter()
        .map(|&n| {
            let (mut nis, mut nwis) = (0.0, 0.0);
            for _ in 0..repetitions {
                let buf = mdp.sample_buffer(&behavior, n, &mut rng);
                nis += (nis_model(&buf, &target, mdp.gamma, None, basis, 1)?.mean_forecast()
                    - truth)
                    .abs();
                nwis += (nwis_model(&buf, &target, mdp.gamma, None, basis, 1)?.mean_forecast()
                    - truth)
                    .abs();
            }
            Ok(ConsistencyPoint {
                episodes: n,
                nis_error: nis / repetitions as f64,
                nwis_error: nwis / repetitions as f64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_probabilities_sum_to_one() {
        let mdp = TabularMdp::reference();
        let (target, _) = estimator_policies();
        let total: f64 = mdp.enumerate(&target).iter().map(|(p, _)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(mdp.enumerate(&target).len(), 2 * 4 * 4 * 2);
    }

    #[test]
    fn exact_return_by_backward_recursion() {
        // Independent oracle: V_t(s) = Σ_a π(a|s)(r(s,a) + γ Σ_s' P(s'|s,a) V_{t+1}(s')).
        let mdp = TabularMdp::reference();
        let (target, _) = estimator_policies();
        let mut v = [0.0; 2];
        for _ in 0..mdp.horizon {
            let mut next = [0.0; 2];
            for (s, slot) in next.iter_mut().enumerate() {
                let pi = target.action_probabilities(&mdp.observation(s));
                for a in 0..2 {
                    let cont: f64 = (0..2).map(|s2| mdp.transition[s][a][s2] * v[s2]).sum();
                    *slot += pi[a] * (mdp.reward[s][a] + mdp.gamma * cont);
                }
            }
            v = next;
        }
        let j = mdp.start[0] * v[0] + mdp.start[1] * v[1];
        assert!((mdp.exact_return(&target) - j).abs() < 1e-12);
    }

    #[test]
    fn sampled_returns_match_exact_value() {
        let mdp = TabularMdp::reference();
        let (target, _) = estimator_policies();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 40_000;
        let values: Vec<f64> = (0..n)
            .map(|i| {
                mdp.sample(&target, i + 1, &mut rng)
                    .discounted_return(mdp.gamma)
            })
            .collect();
        let (m, se) = mean_and_se(&values);
        assert!((m - mdp.exact_return(&target)).abs() < 4.0 * se);
    }

    #[test]
    fn small_gradient_suite_passes() {
        for check in gradient_checks(1, 8, 1e-5).unwrap() {
            assert_eq!(check.instances, 8);
            assert!(check.compared > 0, "{}", check.name);
            assert!(
                check.max_relative_error < 1e-4,
                "{}: {}",
                check.name,
                check.max_relative_error
            );
        }
    }

    #[test]
    fn two_episode_wis_is_biased() {
        let (mean, truth) = exact_wis_mean_two_episodes();
        assert!((mean - truth).abs() > 1e-3, "{mean} vs {truth}");
    }
}
