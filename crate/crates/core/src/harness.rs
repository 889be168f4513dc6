//! Experiment orchestration: configuration files, seeded trials, regret
//! tables and CSV output.
//!
//! A configuration file holds flat `key = value` lines; `#` starts a
//! comment. Lists are comma separated. Agent hyperparameters can be set for
//! all agents (`agent.eta = 0.01`) and overridden for one
//! (`pro_wls.eta = 0.02`); the override wins regardless of line order.
//!
//! Every trial `(agent, speed, seed index i)` draws its randomness from the
//! trial seed `base_seed + 1000·i`, split into three ChaCha8 streams:
//! environment noise (`+1`), policy initialization (`+2`) and action
//! sampling (`+3`). All agents at the same speed and seed index therefore
//! start from the same policy and face the same reward noise.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::agents::{run_agent, AgentConfig, AgentKind, EpisodeLog};
use crate::basis::{BasisFamily, TimeBasisConfig};
use crate::envs::{EnvModel, EnvName, Environment, GoalReacherEnv, RecommenderEnv};
use crate::error::{Error, Result};
use crate::estimators::forecast_weights;
use crate::policy::{PolicyFamily, PolicyModel};

/// Offsets added to a trial seed to obtain its independent streams.
pub const ENV_STREAM: u64 = 1;
pub const POLICY_STREAM: u64 = 2;
pub const AGENT_STREAM: u64 = 3;
/// Spacing between the seeds of consecutive trials.
pub const TRIAL_STRIDE: u64 = 1000;

pub fn trial_seed(base_seed: u64, trial_index: usize) -> u64 {
    base_seed.wrapping_add(TRIAL_STRIDE.wrapping_mul(trial_index as u64))
}

/// Everything needed to run a set of trials.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Environment constants; the speed is set per trial.
    pub env: EnvModel,
    pub speeds: Vec<u32>,
    pub agents: Vec<AgentKind>,
    pub agent_configs: BTreeMap<AgentKind, AgentConfig>,
    pub base_seed: u64,
    pub num_seeds: usize,
    pub episodes: usize,
    pub policy_family: PolicyFamily,
    pub hidden_dim: usize,
    pub output_dir: PathBuf,
}

const AGENT_KEYS: [&str; 9] = [
    "eta",
    "lambda",
    "delta",
    "inner_iterations",
    "clip",
    "gamma",
    "basis.family",
    "basis.d",
    "wls.stop_gradient_weights",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("`{key}` is empty")));
    }
    Ok(items)
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "`{key}`: expected a boolean, got `{value}`"
        ))),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Splits a configuration text into `(key, value)` pairs.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                n + 1
            ))
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl ExperimentConfig {
    /// Defaults for an environment: all four agents, speeds 0 through 4,
    /// ten seeds of 2000 episodes, a linear policy for the recommender and
    /// a 32-unit network for the goal reacher.
    pub fn defaults(env: EnvName) -> Self {
        let (env, policy_family) = match env {
            EnvName::Recommender => (
                EnvModel::Recommender(RecommenderEnv::new(0)),
                PolicyFamily::SoftmaxLinear,
            ),
            EnvName::GoalReacher => (
                EnvModel::GoalReacher(GoalReacherEnv::new(0)),
                PolicyFamily::Mlp,
            ),
        };
        Self {
            env,
            speeds: vec![0, 1, 2, 3, 4],
            agents: AgentKind::ALL.to_vec(),
            agent_configs: AgentKind::ALL
                .iter()
                .map(|&k| (k, AgentConfig::defaults(k)))
                .collect(),
            base_seed: 0,
            num_seeds: 10,
            episodes: 2000,
            policy_family,
            hidden_dim: 32,
            output_dir: PathBuf::from("results"),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_key_values(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Builds a configuration from key-value pairs. `env.name` selects the
    /// defaults (recommender if absent); the other keys are applied on top,
    /// per-agent overrides last.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let env_name = match pairs.iter().rev().find(|(k, _)| k == "env.name") {
            Some((_, v)) => v.parse()?,
            None => EnvName::Recommender,
        };
        let mut cfg = Self::defaults(env_name);
        cfg.apply(pairs)?;
        Ok(cfg)
    }

    /// Applies key-value pairs to this configuration.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let mut overrides = Vec::new();
        for (key, value) in pairs {
            if let Some((agent, rest)) = key.split_once('.') {
                if let Ok(kind) = agent.parse::<AgentKind>() {
                    overrides.push((kind, rest, value.as_str()));
                    continue;
                }
            }
            self.apply_global(key, value)?;
        }
        for (kind, rest, value) in overrides {
            let cfg = self
                .agent_configs
                .get_mut(&kind)
                .expect("all agents have configs");
            apply_agent_key(cfg, rest, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{kind}.{m}")),
                other => other,
            })?;
        }
        self.validate()
    }

    fn apply_global(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "env.name" => {
                let name: EnvName = value.parse()?;
                if name != self.env.name() {
                    return Err(Error::Config(format!(
                        "`env.name = {name}` conflicts with the {} configuration being edited",
                        self.env.name()
                    )));
                }
            }
            "env.speeds" => self.speeds = parse_list(key, value)?,
            "agents" => self.agents = parse_list(key, value)?,
            "seed.base" => self.base_seed = parse_value(key, value)?,
            "seed.count" => self.num_seeds = parse_value(key, value)?,
            "episodes" => self.episodes = parse_value(key, value)?,
            "policy.family" => self.policy_family = value.parse()?,
            "policy.hidden_dim" => self.hidden_dim = parse_value(key, value)?,
            "output.dir" => self.output_dir = PathBuf::from(value),
            "wls.stop_gradient_weights" => {
                let cfg = self
                    .agent_configs
                    .get_mut(&AgentKind::ProWls)
                    .expect("all agents have configs");
                apply_agent_key(cfg, key, value)?;
            }
            _ if key.starts_with("env.") => self.apply_env_key(key, value)?,
            _ if key.starts_with("agent.") => {
                let rest = &key["agent.".len()..];
                for cfg in self.agent_configs.values_mut() {
                    apply_agent_key(cfg, rest, value)?;
                }
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn apply_env_key(&mut self, key: &str, value: &str) -> Result<()> {
        let field = &key["env.".len()..];
        match &mut self.env {
            EnvModel::Recommender(r) => match field {
                "amplitudes" => r.amplitudes = parse_list(key, value)?,
                "offsets" => r.offsets = parse_list(key, value)?,
                "phases" => r.phases = parse_list(key, value)?,
                "period_base" => r.period_base = parse_value(key, value)?,
                "noise_std" => r.noise_std = parse_value(key, value)?,
                _ => {
                    return Err(Error::Config(format!(
                        "unknown key `{key}` for the recommender"
                    )))
                }
            },
            EnvModel::GoalReacher(g) => match field {
                "step_size" => g.step_size = parse_value(key, value)?,
                "reach_radius" => g.reach_radius = parse_value(key, value)?,
                "radius" => g.radius = parse_value(key, value)?,
                "start_angle" => g.start_angle = parse_value(key, value)?,
                "period_base" => g.period_base = parse_value(key, value)?,
                "step_cost" => g.step_cost = parse_value(key, value)?,
                "goal_reward" => g.goal_reward = parse_value(key, value)?,
                "observe_goal" => g.observe_goal = parse_bool(key, value)?,
                _ => {
                    return Err(Error::Config(format!(
                        "unknown key `{key}` for the goal reacher"
                    )))
                }
            },
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        match &self.env {
            EnvModel::Recommender(r) => r.validate()?,
            EnvModel::GoalReacher(g) => g.validate()?,
        }
        if self.speeds.is_empty() || self.agents.is_empty() {
            return Err(Error::Config(
                "need at least one speed and one agent".into(),
            ));
        }
        if self.num_seeds == 0 || self.episodes == 0 {
            return Err(Error::Config(
                "seed.count and episodes must be positive".into(),
            ));
        }
        if self.policy_family == PolicyFamily::Mlp && self.hidden_dim == 0 {
            return Err(Error::Config("policy.hidden_dim must be positive".into()));
        }
        for cfg in self.agent_configs.values() {
            cfg.validate()?;
        }
        Ok(())
    }

    /// Every setting as `key = value` lines; [`ExperimentConfig::parse`]
    /// of the result reproduces `self`.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("env.name", self.env.name().to_string());
        match &self.env {
            EnvModel::Recommender(r) => {
                line("env.amplitudes", join(&r.amplitudes));
                line("env.offsets", join(&r.offsets));
                line("env.phases", join(&r.phases));
                line("env.period_base", r.period_base.to_string());
                line("env.noise_std", r.noise_std.to_string());
            }
            EnvModel::GoalReacher(g) => {
                line("env.step_size", g.step_size.to_string());
                line("env.reach_radius", g.reach_radius.to_string());
                line("env.radius", g.radius.to_string());
                line("env.start_angle", g.start_angle.to_string());
                line("env.period_base", g.period_base.to_string());
                line("env.step_cost", g.step_cost.to_string());
                line("env.goal_reward", g.goal_reward.to_string());
                line("env.observe_goal", g.observe_goal.to_string());
            }
        }
        line("env.speeds", join(&self.speeds));
        line("agents", join(&self.agents));
        line("seed.base", self.base_seed.to_string());
        line("seed.count", self.num_seeds.to_string());
        line("episodes", self.episodes.to_string());
        line("policy.family", self.policy_family.to_string());
        line("policy.hidden_dim", self.hidden_dim.to_string());
        line("output.dir", self.output_dir.display().to_string());
        for (kind, cfg) in &self.agent_configs {
            for key in AGENT_KEYS {
                if let Some(v) = agent_value(cfg, key) {
                    line(&format!("{kind}.{key}"), v);
                }
            }
        }
        s
    }

    pub fn agent_config(&self, kind: AgentKind) -> &AgentConfig {
        &self.agent_configs[&kind]
    }

    /// The environment at one speed.
    pub fn env_at(&self, speed: u32) -> EnvModel {
        self.env.with_speed(speed)
    }

    /// Trials in output order: agent, then speed, then seed.
    pub fn trials(&self) -> Vec<Trial> {
        let mut out = Vec::new();
        for &agent in &self.agents {
            for &speed in &self.speeds {
                for seed_index in 0..self.num_seeds {
                    out.push(Trial {
                        agent,
                        speed,
                        seed_index,
                        seed: trial_seed(self.base_seed, seed_index),
                    });
                }
            }
        }
        out
    }
}

fn agent_value(cfg: &AgentConfig, key: &str) -> Option<String> {
    Some(match key {
        "eta" => cfg.eta.to_string(),
        "lambda" => cfg.lambda.to_string(),
        "delta" => cfg.delta.to_string(),
        "inner_iterations" => cfg.inner_iterations.to_string(),
        "clip" => cfg
            .clip
            .map_or_else(|| "none".to_string(), |c| c.to_string()),
        "gamma" => cfg.gamma.to_string(),
        "basis.family" => cfg.basis.as_ref()?.family().to_string(),
        "basis.d" => cfg.basis.as_ref()?.dimension().to_string(),
        "wls.stop_gradient_weights" => {
            if cfg.kind != AgentKind::ProWls {
                return None;
            }
            cfg.stop_gradient_weights.to_string()
        }
        _ => return None,
    })
}

fn apply_agent_key(cfg: &mut AgentConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "eta" => cfg.eta = parse_value(key, value)?,
        "lambda" => cfg.lambda = parse_value(key, value)?,
        "delta" => cfg.delta = parse_value(key, value)?,
        "inner_iterations" => cfg.inner_iterations = parse_value(key, value)?,
        "clip" => {
            cfg.clip = match value.trim().to_ascii_lowercase().as_str() {
                "none" | "off" => None,
                _ => Some(parse_value(key, value)?),
            }
        }
        "gamma" => cfg.gamma = parse_value(key, value)?,
        "basis.family" | "basis.d" => {
            // Agents without a forecaster ignore basis settings given to all
            // agents at once.
            let Some(basis) = cfg.basis else {
                return Ok(());
            };
            let (mut family, mut d) = (basis.family(), basis.dimension());
            if key == "basis.family" {
                family = value.parse::<BasisFamily>()?;
                d = match family {
                    BasisFamily::Constant => 1,
                    BasisFamily::Identity => 2,
                    _ => d.max(2),
                };
            } else {
                d = parse_value(key, value)?;
            }
            cfg.basis = Some(TimeBasisConfig::new(family, d, 1)?);
        }
        "wls.stop_gradient_weights" => cfg.stop_gradient_weights = parse_bool(key, value)?,
        _ => return Err(Error::Config(format!("unknown agent key `{key}`"))),
    }
    Ok(())
}

/// One `(agent, speed, seed)` cell of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trial {
    pub agent: AgentKind,
    pub speed: u32,
    pub seed_index: usize,
    pub seed: u64,
}

/// Runs one trial.
pub fn run_trial(cfg: &ExperimentConfig, trial: &Trial) -> Result<EpisodeLog> {
    let env = cfg.env_at(trial.speed);
    let agent = cfg.agent_config(trial.agent);
    let mut env_rng = ChaCha8Rng::seed_from_u64(trial.seed.wrapping_add(ENV_STREAM));
    let mut policy_rng = ChaCha8Rng::seed_from_u64(trial.seed.wrapping_add(POLICY_STREAM));
    let mut agent_rng = ChaCha8Rng::seed_from_u64(trial.seed.wrapping_add(AGENT_STREAM));
    let policy = PolicyModel::initial(
        cfg.policy_family,
        env.state_dim(),
        cfg.hidden_dim,
        env.num_actions(),
        &mut policy_rng,
    )?;
    let (log, _) = run_agent(
        &env,
        agent,
        policy,
        cfg.episodes,
        &mut env_rng,
        &mut agent_rng,
    )
    .map_err(|e| {
        Error::Config(format!(
            "trial {} speed {} seed {}: {e}",
            trial.agent, trial.speed, trial.seed
        ))
    })?;
    Ok(log)
}

/// Runs every trial, in parallel, returning logs in [`ExperimentConfig::trials`]
/// order.
pub fn run_trials(cfg: &ExperimentConfig) -> Result<Vec<(Trial, EpisodeLog)>> {
    cfg.validate()?;
    cfg.trials()
        .into_par_iter()
        .map(|t| run_trial(cfg, &t).map(|log| (t, log)))
        .collect()
}

/// `Σ_k (J*_k − J_k(π_k)) / Σ_k J*_k` from the expected returns of a run.
pub fn compute_true_regret<E: Environment + ?Sized>(
    expected_returns: &[f64],
    env: &E,
) -> Result<f64> {
    let mut optimal = 0.0;
    let mut achieved = 0.0;
    for (i, &j) in expected_returns.iter().enumerate() {
        optimal += env.optimal_expected_return(i + 1)?;
        achieved += j;
    }
    if optimal == 0.0 {
        return Err(Error::Domain("optimal returns sum to zero".into()));
    }
    Ok((optimal - achieved) / optimal.abs())
}

/// Surrogate regret of each agent against the per-episode best observed
/// return among all of them.
///
/// The shortfall is divided by `|Σ best|`, so a worse agent always has the
/// larger regret even when returns are mostly negative.
pub fn compute_surrogate_regret(returns: &[&[f64]]) -> Result<Vec<f64>> {
    if returns.len() < 2 {
        return Err(Error::Alignment(format!(
            "surrogate regret compares at least two agents, got {}",
            returns.len()
        )));
    }
    let n = returns[0].len();
    if n == 0 || returns.iter().any(|r| r.len() != n) {
        return Err(Error::Alignment(
            "agents have different or empty episode counts".into(),
        ));
    }
    let best: f64 = (0..n)
        .map(|k| {
            returns
                .iter()
                .map(|r| r[k])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    if best == 0.0 {
        return Err(Error::Domain("best returns sum to zero".into()));
    }
    Ok(returns
        .iter()
        .map(|r| (best - r.iter().sum::<f64>()) / best.abs())
        .collect())
}

/// Mean and standard error (`sample std / √n`; zero for a single value).
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MetricKind {
    True,
    Surrogate,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::True => "true",
            MetricKind::Surrogate => "surrogate",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegretRow {
    pub agent: AgentKind,
    pub speed: u32,
    pub mean: f64,
    pub se: f64,
    pub metric: MetricKind,
    /// Per-seed values, in seed order.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegretTable {
    pub rows: Vec<RegretRow>,
}

impl RegretTable {
    pub fn get(&self, agent: AgentKind, speed: u32, metric: MetricKind) -> Option<&RegretRow> {
        self.rows
            .iter()
            .find(|r| r.agent == agent && r.speed == speed && r.metric == metric)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("agent,speed,regret_mean,regret_se,metric_kind\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.agent,
                r.speed,
                r.mean,
                r.se,
                r.metric.name()
            );
        }
        s
    }
}

/// One row of `episodes.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRow {
    pub episode: usize,
    pub agent: AgentKind,
    pub speed: u32,
    pub seed: u64,
    pub observed_return: f64,
    pub expected_return: Option<f64>,
}

pub const EPISODES_HEADER: &str = "episode,agent,speed,seed,return,expected_return";

fn opt_to_string(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn episodes_csv(results: &[(Trial, EpisodeLog)]) -> String {
    let mut s =
        String::with_capacity(64 * results.iter().map(|(_, l)| l.records.len()).sum::<usize>());
    s.push_str(EPISODES_HEADER);
    s.push('\n');
    for (t, log) in results {
        for r in &log.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.episode_index,
                t.agent,
                t.speed,
                t.seed,
                r.observed_return,
                opt_to_string(r.expected_return)
            );
        }
    }
    s
}

pub fn parse_episodes_csv(text: &str) -> Result<Vec<EpisodeRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == EPISODES_HEADER => {}
        other => {
            return Err(Error::DataCorruption(format!(
                "episodes header should be `{EPISODES_HEADER}`, found {other:?}"
            )))
        }
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::DataCorruption(format!("episodes.csv line {}: `{line}`", n + 2));
            if f.len() != 6 {
                return Err(bad());
            }
            Ok(EpisodeRow {
                episode: f[0].parse().map_err(|_| bad())?,
                agent: f[1].parse().map_err(|_| bad())?,
                speed: f[2].parse().map_err(|_| bad())?,
                seed: f[3].parse().map_err(|_| bad())?,
                observed_return: f[4].parse().map_err(|_| bad())?,
                expected_return: if f[5].is_empty() {
                    None
                } else {
                    Some(f[5].parse().map_err(|_| bad())?)
                },
            })
        })
        .collect()
}

/// Regret table from episode rows alone. True regret is included when every
/// row carries an expected return and the environment knows its optimum;
/// surrogate regret whenever at least two agents are present.
pub fn regret_from_rows(rows: &[EpisodeRow], env: &EnvModel) -> Result<RegretTable> {
    // (agent, speed, seed) -> (observed, expected) in episode order.
    type Series = (Vec<f64>, Vec<Option<f64>>);
    let mut runs: BTreeMap<(u32, u64), BTreeMap<AgentKind, Series>> = BTreeMap::new();
    let mut agent_order: Vec<AgentKind> = Vec::new();
    let mut speed_order: Vec<u32> = Vec::new();
    for r in rows {
        if !agent_order.contains(&r.agent) {
            agent_order.push(r.agent);
        }
        if !speed_order.contains(&r.speed) {
            speed_order.push(r.speed);
        }
        let series = runs
            .entry((r.speed, r.seed))
            .or_default()
            .entry(r.agent)
            .or_default();
        if r.episode != series.0.len() + 1 {
            return Err(Error::Alignment(format!(
                "{} speed {} seed {}: episode {} out of order",
                r.agent, r.speed, r.seed, r.episode
            )));
        }
        series.0.push(r.observed_return);
        series.1.push(r.expected_return);
    }

    let mut per_cell: BTreeMap<(AgentKind, u32, MetricKind), Vec<f64>> = BTreeMap::new();
    for (&(speed, _seed), agents) in &runs {
        let env = env.with_speed(speed);
        for (&agent, (_, expected)) in agents {
            let expected: Option<Vec<f64>> = expected.iter().copied().collect();
            if let Some(expected) = expected {
                match compute_true_regret(&expected, &env) {
                    Ok(v) => per_cell
                        .entry((agent, speed, MetricKind::True))
                        .or_default()
                        .push(v),
                    Err(Error::Unsupported(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        if agents.len() >= 2 {
            let kinds: Vec<AgentKind> = agents.keys().copied().collect();
            let observed: Vec<&[f64]> = agents.values().map(|(o, _)| o.as_slice()).collect();
            for (kind, v) in kinds.into_iter().zip(compute_surrogate_regret(&observed)?) {
                per_cell
                    .entry((kind, speed, MetricKind::Surrogate))
                    .or_default()
                    .push(v);
            }
        }
    }

    let mut table = RegretTable::default();
    for metric in [MetricKind::True, MetricKind::Surrogate] {
        for &agent in &agent_order {
            for &speed in &speed_order {
                if let Some(values) = per_cell.remove(&(agent, speed, metric)) {
                    let (mean, se) = mean_and_se(&values);
                    table.rows.push(RegretRow {
                        agent,
                        speed,
                        mean,
                        se,
                        metric,
                        values,
                    });
                }
            }
        }
    }
    Ok(table)
}

/// Regret table straight from trial results.
pub fn regret_table(
    cfg: &ExperimentConfig,
    results: &[(Trial, EpisodeLog)],
) -> Result<RegretTable> {
    let rows: Vec<EpisodeRow> = results
        .iter()
        .flat_map(|(t, log)| {
            log.records.iter().map(move |r| EpisodeRow {
                episode: r.episode_index,
                agent: t.agent,
                speed: t.speed,
                seed: t.seed,
                observed_return: r.observed_return,
                expected_return: r.expected_return,
            })
        })
        .collect();
    regret_from_rows(&rows, &cfg.env)
}

/// FNV-1a hash, used to fingerprint configurations.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

pub fn meta_text(cfg: &ExperimentConfig) -> String {
    let desc = cfg.describe();
    format!(
        "# prognosticator {} config-{:016x}\n{desc}",
        env!("CARGO_PKG_VERSION"),
        fnv1a(desc.as_bytes())
    )
}

/// What [`run_experiment`] produced.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub results: Vec<(Trial, EpisodeLog)>,
    pub regret: RegretTable,
    pub episodes_path: PathBuf,
    pub regret_path: PathBuf,
    pub meta_path: PathBuf,
}

/// Runs every trial and writes `episodes.csv`, `regret.csv` and `meta.txt`
/// into the configured output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let results = run_trials(cfg)?;
    let regret = regret_table(cfg, &results)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    let write = |name: &str, text: &str| -> Result<PathBuf> {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Ok(path)
    };
    let episodes_path = write("episodes.csv", &episodes_csv(&results))?;
    let regret_path = write("regret.csv", &regret.to_csv())?;
    let meta_path = write("meta.txt", &meta_text(cfg))?;
    Ok(ExperimentOutput {
        results,
        regret,
        episodes_path,
        regret_path,
        meta_path,
    })
}

/// Forecast weights under several bases side by side, plus an exponential
/// reference `αᵏ⁻ⁱ` normalized to sum to one.
///
/// Columns: `episode_index`, one per basis (named `family_d`), `exponential`.
pub fn emit_weight_table(
    k: usize,
    delta: usize,
    bases: &[TimeBasisConfig],
    alpha: f64,
) -> Result<String> {
    let columns = bases
        .iter()
        .map(|b| forecast_weights(k, delta, b))
        .collect::<Result<Vec<_>>>()?;
    let raw: Vec<f64> = (1..=k).map(|i| alpha.powi((k - i) as i32)).collect();
    let total: f64 = raw.iter().sum();
    let mut s = String::from("episode_index");
    for b in bases {
        let _ = write!(s, ",{}_{}", b.family(), b.dimension());
    }
    s.push_str(",exponential\n");
    for i in 0..k {
        let _ = write!(s, "{}", i + 1);
        for c in &columns {
            let _ = write!(s, ",{}", c[i]);
        }
        let _ = writeln!(s, ",{}", raw[i] / total);
    }
    Ok(s)
}

/// Parses a CSV of numbers with a header line into `(header, rows)`.
pub fn parse_numeric_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::DataCorruption("empty CSV".into()))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let rows = lines
        .map(|l| {
            let row: Vec<f64> = l
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::DataCorruption(format!("non-numeric CSV line `{l}`")))?;
            if row.len() != header.len() {
                return Err(Error::DataCorruption(format!(
                    "CSV line `{l}` has {} fields",
                    row.len()
                )));
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    Ok((header, rows))
}

/// A grid of hyperparameter values, one list per agent key.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepGrid {
    pub axes: Vec<(String, Vec<String>)>,
}

impl SweepGrid {
    /// Reads `sweep.<agent key> = v1, v2, …` lines; other lines are
    /// returned untouched for the experiment configuration.
    pub fn split(pairs: &[(String, String)]) -> Result<(Self, Vec<(String, String)>)> {
        let mut grid = Self::default();
        let mut rest = Vec::new();
        for (k, v) in pairs {
            match k.strip_prefix("sweep.") {
                Some(axis) => {
                    if !AGENT_KEYS.contains(&axis) {
                        return Err(Error::Config(format!("cannot sweep over `{axis}`")));
                    }
                    let values: Vec<String> = v
                        .split(',')
                        .map(|s| s.trim().to_string())
                        .filter(|s| !s.is_empty())
                        .collect();
                    if values.is_empty() {
                        return Err(Error::Config(format!("`{k}` is empty")));
                    }
                    grid.axes.push((axis.to_string(), values));
                }
                None => rest.push((k.clone(), v.clone())),
            }
        }
        Ok((grid, rest))
    }

    /// Every grid point as a list of `(agent key, value)` settings.
    pub fn points(&self) -> Vec<Vec<(String, String)>> {
        let mut points = vec![Vec::new()];
        for (axis, values) in &self.axes {
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push((axis.clone(), v.clone()));
                        q
                    })
                })
                .collect();
        }
        points
    }
}

/// Runs the base experiment at every grid point, applying the point's
/// values to all agents, and returns `sweep.csv` text: one row per grid
/// point, agent, speed and metric.
pub fn sweep(base: &ExperimentConfig, grid: &SweepGrid) -> Result<String> {
    let mut s = String::new();
    for (axis, _) in &grid.axes {
        let _ = write!(s, "{axis},");
    }
    s.push_str("agent,speed,regret_mean,regret_se,metric_kind\n");
    for point in grid.points() {
        let mut cfg = base.clone();
        let pairs: Vec<(String, String)> = point
            .iter()
            .map(|(k, v)| (format!("agent.{k}"), v.clone()))
            .collect();
        cfg.apply(&pairs)?;
        let results = run_trials(&cfg)?;
        let table = regret_table(&cfg, &results)?;
        for row in &table.rows {
            for (_, v) in &point {
                let _ = write!(s, "{v},");
            }
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                row.agent,
                row.speed,
                row.mean,
                row.se,
                row.metric.name()
            );
        }
    }
    Ok(s)
}
