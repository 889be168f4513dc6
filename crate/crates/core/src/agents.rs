//! The four learning agents and the interaction loop they share.
//!
//! Every agent alternates between collecting `δ` episodes with the current
//! policy and improving the policy by gradient ascent. They differ only in
//! which objective they ascend and on which trajectories:
//!
//! | agent    | objective                                   | data read        | steps per batch |
//! |----------|---------------------------------------------|------------------|-----------------|
//! | Pro-OLS  | mean NIS forecast of the next `δ` episodes  | whole buffer     | `inner_iterations` |
//! | Pro-WLS  | mean NWIS forecast of the next `δ` episodes | whole buffer     | `inner_iterations` |
//! | FTRL-PG  | mean PDIS estimate over all past episodes   | whole buffer     | `inner_iterations` |
//! | ONPG     | mean PDIS estimate over the newest batch    | newest `δ` only  | 1               |
//!
//! All four add `λ` times the mean policy entropy over the states of the
//! newest batch.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::basis::{BasisFamily, TimeBasisConfig};
use crate::batch_eval::{self, ForecastDesign, StateTable};
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::estimators::forecast_weights;
use crate::gradients::GradientReport;
use crate::policy::{Policy, MAX_ACTIONS};
use crate::trajectory::{ReplayBuffer, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AgentKind {
    ProOls,
    ProWls,
    Onpg,
    FtrlPg,
}

impl AgentKind {
    pub const ALL: [AgentKind; 4] = [
        AgentKind::ProOls,
        AgentKind::ProWls,
        AgentKind::Onpg,
        AgentKind::FtrlPg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::ProOls => "pro_ols",
            AgentKind::ProWls => "pro_wls",
            AgentKind::Onpg => "onpg",
            AgentKind::FtrlPg => "ftrl_pg",
        }
    }

    /// Whether the agent regresses on a time basis.
    pub fn uses_basis(self) -> bool {
        matches!(self, AgentKind::ProOls | AgentKind::ProWls)
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "pro_ols" | "prools" => Ok(Self::ProOls),
            "pro_wls" | "prowls" => Ok(Self::ProWls),
            "onpg" => Ok(Self::Onpg),
            "ftrl_pg" | "ftrlpg" | "ftrl" => Ok(Self::FtrlPg),
            other => Err(Error::Config(format!("unknown agent `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub kind: AgentKind,
    /// Learning rate `η`.
    pub eta: f64,
    /// Entropy coefficient `λ`.
    pub lambda: f64,
    /// Episodes per batch, which is also the forecast horizon.
    pub delta: usize,
    pub inner_iterations: usize,
    /// Ceiling on cumulative importance ratios.
    pub clip: Option<f64>,
    pub basis: Option<TimeBasisConfig>,
    pub gamma: f64,
    /// Pro-WLS only: treat the importance weights as constants.
    pub stop_gradient_weights: bool,
}

impl AgentConfig {
    /// The acceptance defaults: `η = 0.01`, `λ = 0.003`, `δ = 3`, 30 inner
    /// steps, clip 10, 5-dimensional Fourier basis, `γ = 0.99`.
    pub fn defaults(kind: AgentKind) -> Self {
        let basis = kind.uses_basis().then(|| {
            TimeBasisConfig::new(BasisFamily::FourierCosine, 5, 1).expect("valid default basis")
        });
        Self {
            kind,
            eta: 0.01,
            lambda: 0.003,
            delta: 3,
            inner_iterations: 30,
            clip: Some(10.0),
            basis,
            gamma: 0.99,
            stop_gradient_weights: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if self.delta == 0 || self.inner_iterations == 0 {
            return bad("delta and inner_iterations must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return bad(format!("clip must be positive, got {c}"));
            }
        }
        if self.kind.uses_basis() != self.basis.is_some() {
            return bad(format!(
                "{} {} a time basis",
                self.kind,
                if self.kind.uses_basis() {
                    "requires"
                } else {
                    "does not take"
                }
            ));
        }
        Ok(())
    }

    /// Gradient steps taken after each batch.
    pub fn steps_per_batch(&self) -> usize {
        match self.kind {
            AgentKind::Onpg => 1,
            _ => self.inner_iterations,
        }
    }
}

/// What happened in one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode_index: usize,
    /// Discounted return actually obtained.
    pub observed_return: f64,
    /// `J_k(π_k)` when the environment can compute it.
    pub expected_return: Option<f64>,
    /// Mean policy entropy over the states visited.
    pub entropy: f64,
    /// Smallest action probability at any visited state.
    pub min_action_prob: f64,
}

/// Counters describing the updates an agent performed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UpdateStats {
    pub batches: usize,
    pub gradient_steps: usize,
    /// Batches after which no update was possible (too few episodes to fit
    /// the basis).
    pub skipped_updates: usize,
    /// Per performed update: `(buffer length, trajectories read)`.
    pub reads: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub records: Vec<EpisodeRecord>,
    pub stats: UpdateStats,
}

impl EpisodeLog {
    pub fn returns(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.observed_return).collect()
    }

    /// Expected returns, or `None` if any episode lacks one.
    pub fn expected_returns(&self) -> Option<Vec<f64>> {
        self.records.iter().map(|r| r.expected_return).collect()
    }
}

/// Plays one episode with `policy`, logging behavior probabilities.
pub fn collect_episode<E, P, R1, R2>(
    env: &E,
    policy: &P,
    episode_index: usize,
    gamma: f64,
    env_rng: &mut R1,
    agent_rng: &mut R2,
) -> Result<(Trajectory, EpisodeRecord)>
where
    E: Environment + ?Sized,
    P: Policy + ?Sized,
    R1: Rng + ?Sized,
    R2: Rng + ?Sized,
{
    let mut traj = Trajectory::new(episode_index);
    let mut state = env.reset(episode_index, env_rng);
    let mut entropy = 0.0;
    let mut min_prob = f64::INFINITY;
    let mut probs = [0.0; MAX_ACTIONS];
    let probs = &mut probs[..policy.num_actions()];
    for _ in 0..env.horizon() {
        policy.probabilities_into(&state, probs);
        entropy -= probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>();
        min_prob = probs.iter().copied().fold(min_prob, f64::min);
        let (action, prob) = policy.sample_action(&state, agent_rng);
        let tr = env.step(&state, action, episode_index, env_rng)?;
        traj.push(
            std::mem::replace(&mut state, tr.next_state),
            action,
            prob,
            tr.reward,
        );
        if tr.done {
            break;
        }
    }
    let record = EpisodeRecord {
        episode_index,
        observed_return: traj.discounted_return(gamma),
        expected_return: env.expected_return(policy, episode_index),
        entropy: entropy / traj.len().max(1) as f64,
        min_action_prob: min_prob,
    };
    Ok((traj, record))
}

enum BatchPlan {
    Weights(Vec<f64>),
    Wls(ForecastDesign),
}

/// An agent between batches: its configuration, the policy being optimized
/// and every trajectory seen so far.
#[derive(Debug, Clone)]
pub struct Learner<P: Policy> {
    config: AgentConfig,
    policy: P,
    buffer: ReplayBuffer,
    table: StateTable,
    stats: UpdateStats,
}

impl<P: Policy> Learner<P> {
    pub fn new(config: AgentConfig, policy: P) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            policy,
            buffer: ReplayBuffer::new(),
            table: StateTable::new(),
            stats: UpdateStats::default(),
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn policy(&self) -> &P {
        &self.policy
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn stats(&self) -> &UpdateStats {
        &self.stats
    }

    pub fn into_parts(self) -> (P, ReplayBuffer, UpdateStats) {
        (self.policy, self.buffer, self.stats)
    }

    /// Appends a trajectory to the buffer.
    pub fn record(&mut self, traj: Trajectory) -> Result<()> {
        traj.validate()?;
        if traj.episode_index != self.buffer.len() + 1 {
            return Err(Error::Sequencing {
                expected: self.buffer.len() + 1,
                got: traj.episode_index,
            });
        }
        self.table.push(&traj);
        self.buffer.insert(traj)
    }

    /// Index of the first trajectory the agent's objective reads.
    fn first_read(&self) -> usize {
        match self.config.kind {
            AgentKind::Onpg => self.buffer.len().saturating_sub(self.config.delta),
            _ => 0,
        }
    }

    /// Per-trajectory weights of the PDIS-based objectives, starting at
    /// [`Self::first_read`]. `None` when the buffer is still too short to
    /// fit the basis.
    fn pdis_weights(&self) -> Result<Option<Vec<f64>>> {
        let k = self.buffer.len();
        let cfg = &self.config;
        Ok(match cfg.kind {
            AgentKind::ProOls => {
                let basis = cfg.basis.as_ref().expect("validated");
                if k < basis.dimension() {
                    None
                } else {
                    Some(forecast_weights(k, cfg.delta, basis)?)
                }
            }
            AgentKind::FtrlPg => Some(vec![1.0 / k as f64; k]),
            AgentKind::Onpg => {
                let n = k - self.first_read();
                Some(vec![1.0 / n as f64; n])
            }
            AgentKind::ProWls => None,
        })
    }

    /// What stays fixed across the inner iterations of one update.
    fn batch_plan(&self) -> Result<BatchPlan> {
        Ok(match self.config.kind {
            AgentKind::ProWls => BatchPlan::Wls(ForecastDesign::new(
                self.config.basis.as_ref().expect("validated"),
                self.buffer.len(),
                self.config.delta,
            )?),
            _ => BatchPlan::Weights(self.pdis_weights()?.expect("buffer is ready")),
        })
    }

    /// The objective and its gradient at `policy`.
    fn objective_gradient(&self, policy: &P, plan: &BatchPlan) -> Result<GradientReport> {
        let cfg = &self.config;
        let entropy_len = cfg.delta.min(self.buffer.len());
        match plan {
            BatchPlan::Wls(design) => batch_eval::pro_wls_gradient_with(
                &self.buffer,
                &self.table,
                policy,
                cfg.gamma,
                cfg.clip,
                design,
                cfg.delta,
                cfg.lambda,
                cfg.stop_gradient_weights,
            ),
            BatchPlan::Weights(weights) => batch_eval::weighted_pdis_gradient(
                &self.buffer,
                &self.table,
                self.first_read(),
                weights,
                policy,
                cfg.gamma,
                cfg.clip,
                cfg.lambda,
                entropy_len,
            ),
        }
    }

    /// Gradient of the agent's objective at the current policy, or `None`
    /// while the buffer is too short to fit the basis.
    pub fn gradient(&self) -> Result<Option<GradientReport>> {
        if !self.ready() {
            return Ok(None);
        }
        let plan = self.batch_plan()?;
        self.objective_gradient(&self.policy, &plan).map(Some)
    }

    fn ready(&self) -> bool {
        let k = self.buffer.len();
        k > 0
            && self
                .config
                .basis
                .as_ref()
                .is_none_or(|b| k >= b.dimension())
    }

    /// Runs the post-batch optimization: `inner_iterations` ascent steps
    /// (one for ONPG). Returns the number of steps taken.
    pub fn update(&mut self) -> Result<usize> {
        self.stats.batches += 1;
        if !self.ready() {
            self.stats.skipped_updates += 1;
            return Ok(0);
        }
        let plan = self.batch_plan()?;
        let steps = self.config.steps_per_batch();
        for _ in 0..steps {
            let report = self.objective_gradient(&self.policy, &plan)?;
            let eta = self.config.eta;
            for (theta, g) in self.policy.params_mut().iter_mut().zip(&report.gradient) {
                *theta += eta * g;
            }
            if let Some(j) = self.policy.params().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "{}: parameter {j} became {} after episode {}",
                    self.config.kind,
                    self.policy.params()[j],
                    self.buffer.len()
                )));
            }
        }
        self.stats.gradient_steps += steps;
        let k = self.buffer.len();
        self.stats.reads.push((k, k - self.first_read()));
        Ok(steps)
    }
}

/// Runs an agent for `num_episodes` episodes: batches of `δ` episodes, each
/// followed by an update. A budget that is not a multiple of `δ` ends with
/// a shorter batch and no final update.
///
/// Environment noise draws come from `env_rng` and action draws from
/// `agent_rng`, so agents given clones of the same `env_rng` face the same
/// environment noise sequence.
pub fn run_agent<E, P, R1, R2>(
    env: &E,
    config: &AgentConfig,
    policy: P,
    num_episodes: usize,
    env_rng: &mut R1,
    agent_rng: &mut R2,
) -> Result<(EpisodeLog, P)>
where
    E: Environment + ?Sized,
    P: Policy,
    R1: Rng + ?Sized,
    R2: Rng + ?Sized,
{
    if policy.num_actions() != env.num_actions() || policy.state_dim() != env.state_dim() {
        return Err(Error::Dimension(format!(
            "policy maps {} inputs to {} actions, environment has {} and {}",
            policy.state_dim(),
            policy.num_actions(),
            env.state_dim(),
            env.num_actions()
        )));
    }
    let mut learner = Learner::new(config.clone(), policy)?;
    let mut records = Vec::with_capacity(num_episodes);
    while records.len() < num_episodes {
        let batch = config.delta.min(num_episodes - records.len());
        for _ in 0..batch {
            let k = learner.buffer.len() + 1;
            let (traj, record) =
                collect_episode(env, &learner.policy, k, config.gamma, env_rng, agent_rng)?;
            learner.record(traj)?;
            records.push(record);
        }
        if batch == config.delta {
            learner.update()?;
        }
    }
    let (policy, _, stats) = learner.into_parts();
    Ok((EpisodeLog { records, stats }, policy))
}
