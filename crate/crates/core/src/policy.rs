//! Differentiable softmax policies over a finite action set.
//!
//! A policy only has to say how it maps a state to logits and how to pull a
//! logit-space gradient back onto its parameters. Probabilities, score
//! functions, entropy and sampling are built on top of those two primitives.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

pub const MAX_ACTIONS: usize = 64;
pub const MAX_HIDDEN: usize = 512;

/// Zeroed scratch space that lives on the stack for the usual small sizes.
/// Zeroing a full `MAX_HIDDEN` array on every call would cost more than the
/// arithmetic it supports.
enum Scratch {
    Stack([f64; 64], usize),
    Heap(Vec<f64>),
}

impl Scratch {
    fn new(len: usize) -> Self {
        if len <= 64 {
            Scratch::Stack([0.0; 64], len)
        } else {
            Scratch::Heap(vec![0.0; len])
        }
    }
}

impl std::ops::Deref for Scratch {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        match self {
            Scratch::Stack(a, n) => &a[..*n],
            Scratch::Heap(v) => v,
        }
    }
}

impl std::ops::DerefMut for Scratch {
    fn deref_mut(&mut self) -> &mut [f64] {
        match self {
            Scratch::Stack(a, n) => &mut a[..*n],
            Scratch::Heap(v) => v,
        }
    }
}

pub trait Policy {
    fn num_actions(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    fn num_params(&self) -> usize {
        self.params().len()
    }

    /// Writes the action logits for `state` into `out`.
    fn logits(&self, state: &[f64], out: &mut [f64]);

    /// Evaluates the logits, lets `upstream` turn the resulting action
    /// probabilities into `∂objective/∂logits`, and accumulates the
    /// corresponding parameter gradient into `grad`.
    fn backprop<F>(&self, state: &[f64], grad: &mut [f64], upstream: F)
    where
        F: FnOnce(&[f64], &[f64], &mut [f64]);

    /// `π(·|state)`.
    fn probabilities_into(&self, state: &[f64], out: &mut [f64]) {
        self.logits(state, out);
        softmax_in_place(out);
    }

    fn action_probabilities(&self, state: &[f64]) -> Vec<f64> {
        let mut p = vec![0.0; self.num_actions()];
        self.probabilities_into(state, &mut p);
        p
    }

    fn action_probability(&self, state: &[f64], action: usize) -> f64 {
        let mut buf = [0.0; MAX_ACTIONS];
        let p = &mut buf[..self.num_actions()];
        self.probabilities_into(state, p);
        p[action]
    }

    /// `grad += scale · ∂ log π(action|state) / ∂θ`.
    fn accumulate_score(&self, state: &[f64], action: usize, scale: f64, grad: &mut [f64]) {
        self.backprop(state, grad, |probs, _logp, dlogits| {
            for (a, (d, &p)) in dlogits.iter_mut().zip(probs).enumerate() {
                let indicator = if a == action { 1.0 } else { 0.0 };
                *d = scale * (indicator - p);
            }
        });
    }

    /// `∂ log π(action|state) / ∂θ`.
    fn log_prob_gradient(&self, state: &[f64], action: usize) -> Vec<f64> {
        let mut g = vec![0.0; self.num_params()];
        self.accumulate_score(state, action, 1.0, &mut g);
        g
    }

    /// Accumulates `scale · ∂H(π(·|state))/∂θ` and returns the entropy.
    fn accumulate_entropy(&self, state: &[f64], scale: f64, grad: &mut [f64]) -> f64 {
        let mut entropy = 0.0;
        self.backprop(state, grad, |probs, logp, dlogits| {
            entropy = -probs.iter().zip(logp).map(|(p, l)| p * l).sum::<f64>();
            for ((d, &p), &l) in dlogits.iter_mut().zip(probs).zip(logp) {
                *d = -scale * p * (l + entropy);
            }
        });
        entropy
    }

    /// Draws an action and returns it with the exact probability it had.
    fn sample_action<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> (usize, f64) {
        let mut buf = [0.0; MAX_ACTIONS];
        let probs = &mut buf[..self.num_actions()];
        self.probabilities_into(state, probs);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return (a, p);
            }
        }
        // Rounding left `acc` just below one; take the last positive action.
        let a = probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        (a, probs[a])
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Writes `probs` and `log_probs` from logits.
fn softmax_with_logs(logits: &[f64], probs: &mut [f64], log_probs: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let log_norm = max + sum.ln();
    for ((p, l), &z) in probs.iter_mut().zip(log_probs.iter_mut()).zip(logits) {
        *l = z - log_norm;
        *p = l.exp();
    }
}

/// Mean entropy of the policy over `states` and its parameter gradient.
pub fn entropy_and_gradient<P: Policy + ?Sized>(
    policy: &P,
    states: &[&[f64]],
) -> Result<(f64, Vec<f64>)> {
    if states.is_empty() {
        return Err(Error::Domain("entropy needs at least one state".into()));
    }
    let mut grad = vec![0.0; policy.num_params()];
    let scale = 1.0 / states.len() as f64;
    let mut total = 0.0;
    for s in states {
        total += policy.accumulate_entropy(s, scale, &mut grad);
    }
    Ok((total * scale, grad))
}

/// Softmax over linear logits `z_a = w_a · s`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxLinearPolicy {
    num_actions: usize,
    feature_dim: usize,
    theta: Vec<f64>,
}

impl SoftmaxLinearPolicy {
    /// Zero-initialized (uniform) policy.
    pub fn new(num_actions: usize, feature_dim: usize) -> Result<Self> {
        check_actions(num_actions)?;
        if feature_dim == 0 {
            return Err(Error::Domain("feature dimension must be positive".into()));
        }
        Ok(Self {
            num_actions,
            feature_dim,
            theta: vec![0.0; num_actions * feature_dim],
        })
    }

    pub fn with_params(num_actions: usize, feature_dim: usize, theta: Vec<f64>) -> Result<Self> {
        let mut p = Self::new(num_actions, feature_dim)?;
        if theta.len() != p.theta.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                p.theta.len(),
                theta.len()
            )));
        }
        p.theta = theta;
        Ok(p)
    }
}

impl Policy for SoftmaxLinearPolicy {
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn state_dim(&self) -> usize {
        self.feature_dim
    }

    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn logits(&self, state: &[f64], out: &mut [f64]) {
        debug_assert_eq!(state.len(), self.feature_dim);
        for (a, z) in out.iter_mut().enumerate() {
            let w = &self.theta[a * self.feature_dim..(a + 1) * self.feature_dim];
            *z = w.iter().zip(state).map(|(w, s)| w * s).sum();
        }
    }

    fn backprop<F>(&self, state: &[f64], grad: &mut [f64], upstream: F)
    where
        F: FnOnce(&[f64], &[f64], &mut [f64]),
    {
        let n = self.num_actions;
        let mut z = [0.0; MAX_ACTIONS];
        let mut p = [0.0; MAX_ACTIONS];
        let mut l = [0.0; MAX_ACTIONS];
        let mut dz = [0.0; MAX_ACTIONS];
        self.logits(state, &mut z[..n]);
        softmax_with_logs(&z[..n], &mut p[..n], &mut l[..n]);
        upstream(&p[..n], &l[..n], &mut dz[..n]);
        for (a, &d) in dz[..n].iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let g = &mut grad[a * self.feature_dim..(a + 1) * self.feature_dim];
            for (g, s) in g.iter_mut().zip(state) {
                *g += d * s;
            }
        }
    }
}

/// Two-layer network: `tanh` hidden layer followed by linear logits.
///
/// Parameters are laid out as `W1 (hidden × input)`, `b1`, `W2 (actions ×
/// hidden)`, `b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSoftmaxPolicy {
    input_dim: usize,
    hidden_dim: usize,
    num_actions: usize,
    theta: Vec<f64>,
}

impl MlpSoftmaxPolicy {
    pub fn param_count(input_dim: usize, hidden_dim: usize, num_actions: usize) -> usize {
        hidden_dim * (input_dim + 1) + num_actions * (hidden_dim + 1)
    }

    /// All-zero parameters; the policy is uniform.
    pub fn zeros(input_dim: usize, hidden_dim: usize, num_actions: usize) -> Result<Self> {
        check_actions(num_actions)?;
        if input_dim == 0 || hidden_dim == 0 || hidden_dim > MAX_HIDDEN {
            return Err(Error::Domain(format!(
                "invalid network shape {input_dim}->{hidden_dim}->{num_actions}"
            )));
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            num_actions,
            theta: vec![0.0; Self::param_count(input_dim, hidden_dim, num_actions)],
        })
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_dim: usize,
        num_actions: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(input_dim, hidden_dim, num_actions)?;
        let (w1, _, w2, _) = p.split_mut();
        let b1 = 1.0 / (input_dim as f64).sqrt();
        for w in w1.iter_mut() {
            *w = rng.random_range(-b1..b1);
        }
        let b2 = 1.0 / (hidden_dim as f64).sqrt();
        for w in w2.iter_mut() {
            *w = rng.random_range(-b2..b2);
        }
        Ok(p)
    }

    pub fn with_params(
        input_dim: usize,
        hidden_dim: usize,
        num_actions: usize,
        theta: Vec<f64>,
    ) -> Result<Self> {
        let mut p = Self::zeros(input_dim, hidden_dim, num_actions)?;
        if theta.len() != p.theta.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                p.theta.len(),
                theta.len()
            )));
        }
        p.theta = theta;
        Ok(p)
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let w1 = self.hidden_dim * self.input_dim;
        let b1 = w1 + self.hidden_dim;
        let w2 = b1 + self.num_actions * self.hidden_dim;
        (w1, b1, w2)
    }

    fn split_mut(&mut self) -> (&mut [f64], &mut [f64], &mut [f64], &mut [f64]) {
        let (o1, o2, o3) = self.offsets();
        let (w1, rest) = self.theta.split_at_mut(o1);
        let (b1, rest) = rest.split_at_mut(o2 - o1);
        let (w2, b2) = rest.split_at_mut(o3 - o2);
        (w1, b1, w2, b2)
    }

    fn hidden(&self, state: &[f64], h: &mut [f64]) {
        debug_assert_eq!(state.len(), self.input_dim);
        let (o1, _, _) = self.offsets();
        let w1 = &self.theta[..o1];
        let b1 = &self.theta[o1..o1 + self.hidden_dim];
        for (j, hj) in h.iter_mut().enumerate() {
            let row = &w1[j * self.input_dim..(j + 1) * self.input_dim];
            let pre: f64 = row.iter().zip(state).map(|(w, s)| w * s).sum::<f64>() + b1[j];
            *hj = pre.tanh();
        }
    }

    fn output(&self, h: &[f64], out: &mut [f64]) {
        let (_, o2, o3) = self.offsets();
        let w2 = &self.theta[o2..o3];
        let b2 = &self.theta[o3..];
        for (a, z) in out.iter_mut().enumerate() {
            let row = &w2[a * self.hidden_dim..(a + 1) * self.hidden_dim];
            *z = row.iter().zip(h).map(|(w, h)| w * h).sum::<f64>() + b2[a];
        }
    }
}

impl Policy for MlpSoftmaxPolicy {
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn state_dim(&self) -> usize {
        self.input_dim
    }

    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn logits(&self, state: &[f64], out: &mut [f64]) {
        let mut h = Scratch::new(self.hidden_dim);
        self.hidden(state, &mut h);
        self.output(&h, out);
    }

    fn backprop<F>(&self, state: &[f64], grad: &mut [f64], upstream: F)
    where
        F: FnOnce(&[f64], &[f64], &mut [f64]),
    {
        let (n, hd, id) = (self.num_actions, self.hidden_dim, self.input_dim);
        let mut h = Scratch::new(hd);
        let mut z = Scratch::new(n);
        let mut p = Scratch::new(n);
        let mut l = Scratch::new(n);
        let mut dz = Scratch::new(n);
        self.hidden(state, &mut h);
        self.output(&h, &mut z);
        softmax_with_logs(&z, &mut p, &mut l);
        upstream(&p, &l, &mut dz);
        let dz = &dz[..];

        let (o1, o2, o3) = self.offsets();
        let w2 = &self.theta[o2..o3];
        let mut dpre = Scratch::new(hd);
        {
            let (_, g_rest) = grad.split_at_mut(o2);
            let (g_w2, g_b2) = g_rest.split_at_mut(o3 - o2);
            for (a, &d) in dz.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g_b2[a] += d;
                let g_row = &mut g_w2[a * hd..(a + 1) * hd];
                let w_row = &w2[a * hd..(a + 1) * hd];
                for j in 0..hd {
                    g_row[j] += d * h[j];
                    dpre[j] += d * w_row[j];
                }
            }
        }
        let (g_w1, g_rest) = grad.split_at_mut(o1);
        let g_b1 = &mut g_rest[..hd];
        for j in 0..hd {
            let da = dpre[j] * (1.0 - h[j] * h[j]);
            if da == 0.0 {
                continue;
            }
            g_b1[j] += da;
            for (g, s) in g_w1[j * id..(j + 1) * id].iter_mut().zip(state) {
                *g += da * s;
            }
        }
    }
}

fn check_actions(num_actions: usize) -> Result<()> {
    if num_actions < 1 || num_actions > MAX_ACTIONS {
        return Err(Error::Domain(format!(
            "number of actions must be in 1..={MAX_ACTIONS}, got {num_actions}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyFamily {
    SoftmaxLinear,
    Mlp,
}

impl fmt::Display for PolicyFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyFamily::SoftmaxLinear => "linear",
            PolicyFamily::Mlp => "mlp",
        })
    }
}

impl FromStr for PolicyFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" | "softmax" | "softmax_linear" => Ok(Self::SoftmaxLinear),
            "mlp" | "nn" => Ok(Self::Mlp),
            other => Err(Error::Config(format!("unknown policy family `{other}`"))),
        }
    }
}

/// Either policy family, selected at runtime.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyModel {
    Linear(SoftmaxLinearPolicy),
    Mlp(MlpSoftmaxPolicy),
}

impl PolicyModel {
    /// Builds the initial policy for a family: zeros for the linear model,
    /// fan-in scaled random weights for the network.
    pub fn initial<R: Rng + ?Sized>(
        family: PolicyFamily,
        state_dim: usize,
        hidden_dim: usize,
        num_actions: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match family {
            PolicyFamily::SoftmaxLinear => {
                Self::Linear(SoftmaxLinearPolicy::new(num_actions, state_dim)?)
            }
            PolicyFamily::Mlp => Self::Mlp(MlpSoftmaxPolicy::init(
                state_dim,
                hidden_dim,
                num_actions,
                rng,
            )?),
        })
    }
}

macro_rules! delegate {
    ($self:ident, $p:ident => $e:expr) => {
        match $self {
            PolicyModel::Linear($p) => $e,
            PolicyModel::Mlp($p) => $e,
        }
    };
}

impl Policy for PolicyModel {
    fn num_actions(&self) -> usize {
        delegate!(self, p => p.num_actions())
    }

    fn state_dim(&self) -> usize {
        delegate!(self, p => p.state_dim())
    }

    fn params(&self) -> &[f64] {
        delegate!(self, p => p.params())
    }

    fn params_mut(&mut self) -> &mut [f64] {
        delegate!(self, p => p.params_mut())
    }

    fn logits(&self, state: &[f64], out: &mut [f64]) {
        delegate!(self, p => p.logits(state, out))
    }

    fn backprop<F>(&self, state: &[f64], grad: &mut [f64], upstream: F)
    where
        F: FnOnce(&[f64], &[f64], &mut [f64]),
    {
        delegate!(self, p => p.backprop(state, grad, upstream))
    }
}
