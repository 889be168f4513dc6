//! Gradient evaluation over a whole buffer with shared per-state work.
//!
//! Both environments revisit a small set of states (the recommender has one,
//! the goal reacher a lattice of positions), while the optimizer evaluates
//! the policy at every logged step on every inner iteration. Interning the
//! states lets one iteration evaluate the policy once per distinct state,
//! sum the logit-space gradient of every step that visited it, and
//! backpropagate once per state. The arithmetic is the same as in
//! [`crate::gradients`]; only the order of summation differs.

use std::collections::HashMap;

use crate::basis::TimeBasisConfig;
use crate::error::{Error, Result};
use crate::estimators::{fit_basis, target_row};
use crate::gradients::GradientReport;
use crate::linalg::{dot, LeastSquares, Matrix};
use crate::policy::Policy;
use crate::trajectory::{ReplayBuffer, Trajectory};

/// Deduplicated states of a buffer plus, per trajectory, the id of each
/// step's state.
#[derive(Debug, Clone, Default)]
pub struct StateTable {
    states: Vec<Vec<f64>>,
    lookup: HashMap<Vec<u64>, usize>,
    ids: Vec<Vec<usize>>,
    steps: Vec<Vec<CompactStep>>,
}

/// The fields of a logged step that the inner loops read, packed together.
#[derive(Debug, Clone, Copy)]
struct CompactStep {
    state: usize,
    action: usize,
    behavior_prob: f64,
    reward: f64,
}

impl StateTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_buffer(buffer: &ReplayBuffer) -> Self {
        let mut table = Self::new();
        for t in buffer {
            table.push(t);
        }
        table
    }

    /// Registers the states of the next trajectory in the buffer.
    pub fn push(&mut self, traj: &Trajectory) {
        let ids = traj
            .steps
            .iter()
            .map(|step| {
                let key: Vec<u64> = step.state.iter().map(|v| v.to_bits()).collect();
                let next = self.states.len();
                *self.lookup.entry(key).or_insert_with(|| {
                    self.states.push(step.state.clone());
                    next
                })
            })
            .collect::<Vec<usize>>();
        self.steps.push(
            traj.steps
                .iter()
                .zip(&ids)
                .map(|(step, &state)| CompactStep {
                    state,
                    action: step.action,
                    behavior_prob: step.behavior_prob,
                    reward: step.reward,
                })
                .collect(),
        );
        self.ids.push(ids);
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn num_trajectories(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self, trajectory: usize) -> &[usize] {
        &self.ids[trajectory]
    }
}

/// Policy outputs at every interned state for one parameter vector, plus an
/// accumulator for `∂objective/∂logits` at those states.
///
/// Score-function terms `scale·(e_a − π(·|s))` are summed lazily: only the
/// scalar `scale` is added to slot `(s, a)` of `action_weights`, and the
/// `−π·Σ` part is applied once per state when the gradient is read out.
pub struct Evaluation<'a, P: Policy + ?Sized> {
    policy: &'a P,
    table: &'a StateTable,
    num_actions: usize,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
    dlogits: Vec<f64>,
    action_weights: Vec<f64>,
}

impl<'a, P: Policy + ?Sized> Evaluation<'a, P> {
    pub fn new(policy: &'a P, table: &'a StateTable) -> Self {
        let a = policy.num_actions();
        let n = table.num_states();
        let mut probs = vec![0.0; n * a];
        let mut log_probs = vec![0.0; n * a];
        for (s, state) in table.states.iter().enumerate() {
            let p = &mut probs[s * a..(s + 1) * a];
            policy.logits(state, p);
            let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_norm = max + p.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            for (l, z) in log_probs[s * a..(s + 1) * a].iter_mut().zip(p.iter_mut()) {
                *l = *z - log_norm;
                *z = l.exp();
            }
        }
        Self {
            policy,
            table,
            num_actions: a,
            probs,
            log_probs,
            dlogits: vec![0.0; n * a],
            action_weights: vec![0.0; n * a],
        }
    }

    fn prob(&self, state: usize, action: usize) -> f64 {
        self.probs[state * self.num_actions + action]
    }

    /// Adds `scale · (e_action − π(·|state))` to the logit gradient.
    fn add_score(&mut self, state: usize, action: usize, scale: f64) {
        self.action_weights[state * self.num_actions + action] += scale;
    }

    /// Clipped cumulative ratios of trajectory `i`: `(raw, clipped, clip active)`.
    fn ratios(
        &self,
        i: usize,
        traj: &Trajectory,
        clip: Option<f64>,
        out: &mut Vec<(f64, f64, bool)>,
    ) -> Result<()> {
        out.clear();
        let mut rho = 1.0;
        for (t, step) in self.table.steps[i].iter().enumerate() {
            if !(step.behavior_prob > 0.0) {
                return Err(Error::DataCorruption(format!(
                    "episode {} step {t}: behavior probability {}",
                    traj.episode_index, step.behavior_prob
                )));
            }
            rho *= self.prob(step.state, step.action) / step.behavior_prob;
            match clip {
                Some(c) if rho > c => out.push((rho, c, true)),
                _ => out.push((rho, rho, false)),
            }
        }
        Ok(())
    }

    /// Adds `Σᵢ weights[i]·∇Ĵᵢ` for the trajectories `first..first+len` of
    /// the buffer and returns `Σᵢ weights[i]·Ĵᵢ`.
    pub fn add_weighted_pdis(
        &mut self,
        buffer: &ReplayBuffer,
        first: usize,
        weights: &[f64],
        gamma: f64,
        clip: Option<f64>,
        contributions: Option<&mut Vec<f64>>,
    ) -> Result<f64> {
        let mut tails = Vec::new();
        let mut total = 0.0;
        let mut contributions = contributions;
        let a = self.num_actions;
        for (offset, &w) in weights.iter().enumerate() {
            let i = first + offset;
            let steps = &self.table.steps[i];
            let mut rho = 1.0;
            let mut discount = 1.0;
            let mut estimate = 0.0;
            tails.clear();
            for (t, step) in steps.iter().enumerate() {
                if !(step.behavior_prob > 0.0) {
                    return Err(Error::DataCorruption(format!(
                        "episode {} step {t}: behavior probability {}",
                        buffer.trajectories()[i].episode_index,
                        step.behavior_prob
                    )));
                }
                rho *= self.probs[step.state * a + step.action] / step.behavior_prob;
                let term = discount * step.reward;
                match clip {
                    Some(c) if rho > c => {
                        estimate += c * term;
                        tails.push(0.0);
                    }
                    _ => {
                        estimate += rho * term;
                        tails.push(rho * term);
                    }
                }
                discount *= gamma;
            }
            total += w * estimate;
            if let Some(c) = contributions.as_deref_mut() {
                c.push(w * estimate);
            }
            if w == 0.0 {
                continue;
            }
            let mut tail = 0.0;
            for t in (0..steps.len()).rev() {
                tail += tails[t];
                if tail != 0.0 {
                    let CompactStep { state, action, .. } = steps[t];
                    self.add_score(state, action, w * tail);
                }
            }
        }
        Ok(total)
    }

    /// Adds `λ·∇H` for the mean entropy over the states of trajectories
    /// `first..first+len` and returns `λ·H`.
    pub fn add_entropy(&mut self, first: usize, len: usize, lambda: f64) -> Result<f64> {
        if lambda == 0.0 {
            return Ok(0.0);
        }
        let count: usize = (first..first + len).map(|i| self.table.ids(i).len()).sum();
        if count == 0 {
            return Err(Error::Domain("entropy needs at least one state".into()));
        }
        let scale = lambda / count as f64;
        let a = self.num_actions;
        let mut total = 0.0;
        for i in first..first + len {
            for &s in self.table.ids(i) {
                let p = &self.probs[s * a..(s + 1) * a];
                let l = &self.log_probs[s * a..(s + 1) * a];
                let h: f64 = -p.iter().zip(l).map(|(p, l)| p * l).sum::<f64>();
                total += h;
                let d = &mut self.dlogits[s * a..(s + 1) * a];
                for ((d, &p), &l) in d.iter_mut().zip(p).zip(l) {
                    *d -= scale * p * (l + h);
                }
            }
        }
        Ok(scale * total)
    }

    /// Pulls the accumulated logit gradients back onto the parameters.
    pub fn parameter_gradient(&self) -> Vec<f64> {
        let a = self.num_actions;
        let mut grad = vec![0.0; self.policy.num_params()];
        let mut d = vec![0.0; a];
        for (s, state) in self.table.states.iter().enumerate() {
            let range = s * a..(s + 1) * a;
            let c = &self.action_weights[range.clone()];
            let total: f64 = c.iter().sum();
            for (((d, &c), &p), &e) in d
                .iter_mut()
                .zip(c)
                .zip(&self.probs[range.clone()])
                .zip(&self.dlogits[range])
            {
                *d = e + c - p * total;
            }
            if d.iter().all(|&v| v == 0.0) {
                continue;
            }
            self.policy
                .backprop(state, &mut grad, |_, _, out| out.copy_from_slice(&d));
        }
        grad
    }
}

fn check_table(buffer: &ReplayBuffer, table: &StateTable) -> Result<()> {
    if buffer.len() != table.num_trajectories() {
        return Err(Error::Dimension(format!(
            "state table covers {} trajectories, buffer has {}",
            table.num_trajectories(),
            buffer.len()
        )));
    }
    Ok(())
}

/// `Σᵢ weights[i]·Ĵᵢ + λ·H` over the trajectories starting at `first`, with
/// the entropy averaged over the last `entropy_len` trajectories.
#[allow(clippy::too_many_arguments)]
pub fn weighted_pdis_gradient<P: Policy + ?Sized>(
    buffer: &ReplayBuffer,
    table: &StateTable,
    first: usize,
    weights: &[f64],
    policy: &P,
    gamma: f64,
    clip: Option<f64>,
    lambda: f64,
    entropy_len: usize,
) -> Result<GradientReport> {
    check_table(buffer, table)?;
    if first + weights.len() > buffer.len() || entropy_len > buffer.len() {
        return Err(Error::Dimension(
            "trajectory range exceeds the buffer".into(),
        ));
    }
    let mut eval = Evaluation::new(policy, table);
    let mut contributions = Vec::with_capacity(weights.len());
    let mut value = eval.add_weighted_pdis(
        buffer,
        first,
        weights,
        gamma,
        clip,
        Some(&mut contributions),
    )?;
    value += eval.add_entropy(buffer.len() - entropy_len, entropy_len, lambda)?;
    Ok(GradientReport {
        gradient: eval.parameter_gradient(),
        objective_value: value,
        per_episode_contributions: Some(contributions),
    })
}

/// Time-basis design of a WLS forecast over a buffer of `k` episodes:
/// the history matrix and the δ-mean target row.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastDesign {
    pub design: Matrix,
    pub target: Vec<f64>,
}

impl ForecastDesign {
    pub fn new(basis: &TimeBasisConfig, k: usize, delta: usize) -> Result<Self> {
        if k < basis.dimension() {
            return Err(Error::Domain(format!(
                "need at least {} episodes for a {}-dimensional basis, have {k}",
                basis.dimension(),
                basis.dimension()
            )));
        }
        let basis = fit_basis(basis, k, delta)?;
        Ok(Self {
            design: basis.history_matrix(k)?,
            target: target_row(&basis, k, delta)?,
        })
    }
}

/// Same objective as [`crate::gradients::pro_wls_gradient`].
#[allow(clippy::too_many_arguments)]
pub fn pro_wls_gradient<P: Policy + ?Sized>(
    buffer: &ReplayBuffer,
    table: &StateTable,
    policy: &P,
    gamma: f64,
    clip: Option<f64>,
    basis: &TimeBasisConfig,
    delta: usize,
    lambda: f64,
    stop_gradient_weights: bool,
) -> Result<GradientReport> {
    let fd = ForecastDesign::new(basis, buffer.len(), delta)?;
    pro_wls_gradient_with(
        buffer,
        table,
        policy,
        gamma,
        clip,
        &fd,
        delta,
        lambda,
        stop_gradient_weights,
    )
}

/// [`pro_wls_gradient`] with a precomputed design.
#[allow(clippy::too_many_arguments)]
pub fn pro_wls_gradient_with<P: Policy + ?Sized>(
    buffer: &ReplayBuffer,
    table: &StateTable,
    policy: &P,
    gamma: f64,
    clip: Option<f64>,
    forecast: &ForecastDesign,
    delta: usize,
    lambda: f64,
    stop_gradient_weights: bool,
) -> Result<GradientReport> {
    check_table(buffer, table)?;
    let k = buffer.len();
    if forecast.design.rows() != k {
        return Err(Error::Dimension(format!(
            "design has {} rows for {k} episodes",
            forecast.design.rows()
        )));
    }
    let (design, target) = (&forecast.design, &forecast.target);

    let mut eval = Evaluation::new(policy, table);
    let mut scratch = Vec::new();
    let mut ratios = Vec::with_capacity(k);
    let mut clipped = Vec::with_capacity(k);
    for (i, traj) in buffer.iter().enumerate() {
        eval.ratios(i, traj, clip, &mut scratch)?;
        let (_, full, active) = scratch.last().copied().unwrap_or((1.0, 1.0, false));
        ratios.push(full);
        clipped.push(active);
    }
    let returns: Vec<f64> = buffer.iter().map(|t| t.discounted_return(gamma)).collect();

    let ls = LeastSquares::new(design, Some(&ratios))?;
    let coefficients = ls.coefficients(design, &returns, Some(&ratios))?;
    let projected = ls.solve_gram(target);
    let mut value = dot(target, &coefficients);

    let mut contributions = Vec::with_capacity(k);
    for i in 0..k {
        let row = design.row(i);
        let leverage = dot(row, &projected);
        contributions.push(leverage * ratios[i] * returns[i]);
        if stop_gradient_weights || clipped[i] {
            continue;
        }
        let scale = leverage * (returns[i] - dot(row, &coefficients)) * ratios[i];
        if scale == 0.0 {
            continue;
        }
        for step in &table.steps[i] {
            eval.add_score(step.state, step.action, scale);
        }
    }
    let recent = delta.min(k);
    value += eval.add_entropy(k - recent, recent, lambda)?;
    Ok(GradientReport {
        gradient: eval.parameter_gradient(),
        objective_value: value,
        per_episode_contributions: Some(contributions),
    })
}
