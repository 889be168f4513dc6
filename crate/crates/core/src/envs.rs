//! Episodic environments whose dynamics drift with the episode index.
//!
//! The drift is exogenous: episode `k` of an environment is fully determined
//! by `k` and the speed, never by what the agent did before. Speed `0` is the
//! stationary case.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::policy::Policy;

/// Outcome of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

pub trait Environment {
    fn horizon(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn speed(&self) -> u32;

    fn reset<R: Rng + ?Sized>(&self, episode_index: usize, rng: &mut R) -> Vec<f64>;

    fn step<R: Rng + ?Sized>(
        &self,
        state: &[f64],
        action: usize,
        episode_index: usize,
        rng: &mut R,
    ) -> Result<Transition>;

    /// `J_k(π)` when the simulator can compute it exactly.
    fn expected_return<P: Policy + ?Sized>(
        &self,
        _policy: &P,
        _episode_index: usize,
    ) -> Option<f64> {
        None
    }

    /// `J*_k` when the simulator can compute it exactly.
    fn optimal_expected_return(&self, _episode_index: usize) -> Result<f64> {
        Err(Error::Unsupported(
            "optimal return is not known for this environment".into(),
        ))
    }
}

fn check_action(action: usize, num_actions: usize) -> Result<()> {
    if action >= num_actions {
        return Err(Error::Domain(format!(
            "action {action} out of range for {num_actions} actions"
        )));
    }
    Ok(())
}

/// Five items whose mean rewards follow phase-shifted seasonal cycles.
///
/// `μᵢ(k) = offsetᵢ + amplitudeᵢ · sin(2π·speed·k/period_base + phaseᵢ)`.
/// Every episode is a single recommendation.
#[derive(Debug, Clone, PartialEq)]
pub struct RecommenderEnv {
    pub amplitudes: Vec<f64>,
    pub offsets: Vec<f64>,
    pub phases: Vec<f64>,
    pub period_base: f64,
    pub noise_std: f64,
    pub speed: u32,
}

impl RecommenderEnv {
    pub const NUM_ITEMS: usize = 5;

    pub fn new(speed: u32) -> Self {
        let n = Self::NUM_ITEMS;
        Self {
            amplitudes: vec![0.3, 0.5, 0.2, 0.4, 0.6],
            offsets: vec![0.5, 0.4, 0.6, 0.5, 0.3],
            phases: (0..n).map(|i| 2.0 * PI * i as f64 / n as f64).collect(),
            period_base: 2000.0,
            noise_std: 0.1,
            speed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.amplitudes.len();
        if n == 0 || self.offsets.len() != n || self.phases.len() != n {
            return Err(Error::Config(
                "recommender amplitudes, offsets and phases must have equal nonzero length".into(),
            ));
        }
        if !(self.period_base > 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::Config(
                "recommender period must be positive and noise nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Mean reward of `item` in episode `k`.
    pub fn mean_reward(&self, item: usize, k: usize) -> f64 {
        let angle = 2.0 * PI * self.speed as f64 * k as f64 / self.period_base + self.phases[item];
        self.offsets[item] + self.amplitudes[item] * angle.sin()
    }

    pub fn mean_rewards(&self, k: usize) -> Vec<f64> {
        (0..self.amplitudes.len())
            .map(|i| self.mean_reward(i, k))
            .collect()
    }
}

impl Environment for RecommenderEnv {
    fn horizon(&self) -> usize {
        1
    }

    fn num_actions(&self) -> usize {
        self.amplitudes.len()
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn speed(&self) -> u32 {
        self.speed
    }

    fn reset<R: Rng + ?Sized>(&self, _episode_index: usize, _rng: &mut R) -> Vec<f64> {
        vec![1.0]
    }

    fn step<R: Rng + ?Sized>(
        &self,
        _state: &[f64],
        action: usize,
        episode_index: usize,
        rng: &mut R,
    ) -> Result<Transition> {
        check_action(action, self.num_actions())?;
        let mut reward = self.mean_reward(action, episode_index);
        if self.noise_std > 0.0 {
            let noise =
                Normal::new(0.0, self.noise_std).map_err(|e| Error::Config(e.to_string()))?;
            reward += noise.sample(rng);
        }
        Ok(Transition {
            next_state: vec![1.0],
            reward,
            done: true,
        })
    }

    fn expected_return<P: Policy + ?Sized>(&self, policy: &P, episode_index: usize) -> Option<f64> {
        let probs = policy.action_probabilities(&[1.0]);
        Some(
            probs
                .iter()
                .enumerate()
                .map(|(i, p)| p * self.mean_reward(i, episode_index))
                .sum(),
        )
    }

    fn optimal_expected_return(&self, episode_index: usize) -> Result<f64> {
        Ok(self
            .mean_rewards(episode_index)
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max))
    }
}

/// Four-direction navigation on `[−1, 1]²` towards a goal circling the
/// origin.
///
/// The agent starts at the origin and moves `step_size` per action on a
/// lattice. Reaching within `reach_radius` of the goal pays `+1` and ends the
/// episode; every other step costs `step_cost`. The goal sits at angle
/// `start_angle + speed·2π·k/period_base` on a circle of radius `radius`.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalReacherEnv {
    pub step_size: f64,
    pub reach_radius: f64,
    pub radius: f64,
    pub start_angle: f64,
    pub period_base: f64,
    pub step_cost: f64,
    pub goal_reward: f64,
    /// Append the goal coordinates to the observation.
    pub observe_goal: bool,
    pub speed: u32,
}

impl GoalReacherEnv {
    pub const HORIZON: usize = 15;
    /// Left, right, up, down.
    pub const MOVES: [(i64, i64); 4] = [(-1, 0), (1, 0), (0, 1), (0, -1)];

    pub fn new(speed: u32) -> Self {
        Self {
            step_size: 0.2,
            reach_radius: 0.15,
            radius: 0.5,
            start_angle: 0.0,
            period_base: 2000.0,
            step_cost: -0.05,
            goal_reward: 1.0,
            observe_goal: false,
            speed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size <= 1.0) {
            return Err(Error::Config(
                "goal reacher step size must be in (0, 1]".into(),
            ));
        }
        if !(self.reach_radius > 0.0) || !(self.period_base > 0.0) {
            return Err(Error::Config(
                "goal reacher radius and period must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Goal position in episode `k`.
    pub fn goal(&self, k: usize) -> (f64, f64) {
        let angle = self.start_angle + self.speed as f64 * 2.0 * PI * k as f64 / self.period_base;
        (self.radius * angle.cos(), self.radius * angle.sin())
    }

    fn max_cell(&self) -> i64 {
        (1.0 / self.step_size + 1e-9).floor() as i64
    }

    fn cell(&self, coord: f64) -> i64 {
        (coord / self.step_size).round() as i64
    }

    fn observation(&self, x: f64, y: f64, k: usize) -> Vec<f64> {
        if self.observe_goal {
            let (gx, gy) = self.goal(k);
            vec![x, y, gx, gy]
        } else {
            vec![x, y]
        }
    }
}

impl Environment for GoalReacherEnv {
    fn horizon(&self) -> usize {
        Self::HORIZON
    }

    fn num_actions(&self) -> usize {
        Self::MOVES.len()
    }

    fn state_dim(&self) -> usize {
        if self.observe_goal {
            4
        } else {
            2
        }
    }

    fn speed(&self) -> u32 {
        self.speed
    }

    fn reset<R: Rng + ?Sized>(&self, episode_index: usize, _rng: &mut R) -> Vec<f64> {
        self.observation(0.0, 0.0, episode_index)
    }

    fn step<R: Rng + ?Sized>(
        &self,
        state: &[f64],
        action: usize,
        episode_index: usize,
        _rng: &mut R,
    ) -> Result<Transition> {
        check_action(action, self.num_actions())?;
        let (dx, dy) = Self::MOVES[action];
        let limit = self.max_cell();
        let cx = (self.cell(state[0]) + dx).clamp(-limit, limit);
        let cy = (self.cell(state[1]) + dy).clamp(-limit, limit);
        let (x, y) = (cx as f64 * self.step_size, cy as f64 * self.step_size);
        let (gx, gy) = self.goal(episode_index);
        let reached = (x - gx).hypot(y - gy) <= self.reach_radius;
        Ok(Transition {
            next_state: self.observation(x, y, episode_index),
            reward: if reached {
                self.goal_reward
            } else {
                self.step_cost
            },
            done: reached,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvName {
    Recommender,
    GoalReacher,
}

impl fmt::Display for EnvName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvName::Recommender => "recommender",
            EnvName::GoalReacher => "goal_reacher",
        })
    }
}

impl FromStr for EnvName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "recommender" => Ok(Self::Recommender),
            "goal_reacher" | "goalreacher" => Ok(Self::GoalReacher),
            other => Err(Error::Config(format!("unknown environment `{other}`"))),
        }
    }
}

/// Either environment, selected at runtime.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvModel {
    Recommender(RecommenderEnv),
    GoalReacher(GoalReacherEnv),
}

impl EnvModel {
    pub fn name(&self) -> EnvName {
        match self {
            EnvModel::Recommender(_) => EnvName::Recommender,
            EnvModel::GoalReacher(_) => EnvName::GoalReacher,
        }
    }

    pub fn with_speed(&self, speed: u32) -> Self {
        let mut e = self.clone();
        match &mut e {
            EnvModel::Recommender(r) => r.speed = speed,
            EnvModel::GoalReacher(g) => g.speed = speed,
        }
        e
    }
}

macro_rules! delegate {
    ($self:ident, $e:ident => $body:expr) => {
        match $self {
            EnvModel::Recommender($e) => $body,
            EnvModel::GoalReacher($e) => $body,
        }
    };
}

impl Environment for EnvModel {
    fn horizon(&self) -> usize {
        delegate!(self, e => e.horizon())
    }

    fn num_actions(&self) -> usize {
        delegate!(self, e => e.num_actions())
    }

    fn state_dim(&self) -> usize {
        delegate!(self, e => e.state_dim())
    }

    fn speed(&self) -> u32 {
        delegate!(self, e => e.speed())
    }

    fn reset<R: Rng + ?Sized>(&self, episode_index: usize, rng: &mut R) -> Vec<f64> {
        delegate!(self, e => e.reset(episode_index, rng))
    }

    fn step<R: Rng + ?Sized>(
        &self,
        state: &[f64],
        action: usize,
        episode_index: usize,
        rng: &mut R,
    ) -> Result<Transition> {
        delegate!(self, e => e.step(state, action, episode_index, rng))
    }

    fn expected_return<P: Policy + ?Sized>(&self, policy: &P, episode_index: usize) -> Option<f64> {
        delegate!(self, e => e.expected_return(policy, episode_index))
    }

    fn optimal_expected_return(&self, episode_index: usize) -> Result<f64> {
        delegate!(self, e => e.optimal_expected_return(episode_index))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn recommender_state_is_dummy() {
        let env = RecommenderEnv::new(3);
        assert_eq!(env.reset(1, &mut rng()), vec![1.0]);
        assert_eq!(env.reset(977, &mut rng()), vec![1.0]);
    }

    #[test]
    fn noiseless_reward_is_mean() {
        let mut env = RecommenderEnv::new(2);
        env.noise_std = 0.0;
        for i in 0..5 {
            let t = env.step(&[1.0], i, 37, &mut rng()).unwrap();
            assert_eq!(t.reward, env.mean_reward(i, 37));
            assert!(t.done);
        }
        assert!(matches!(
            env.step(&[1.0], 5, 1, &mut rng()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn stationary_optimum_is_constant() {
        let env = RecommenderEnv::new(0);
        let j1 = env.optimal_expected_return(1).unwrap();
        for k in [2, 50, 1999] {
            assert_eq!(env.optimal_expected_return(k).unwrap(), j1);
        }
    }

    #[test]
    fn mirrored_items_optimum_is_absolute_value() {
        let env = RecommenderEnv {
            amplitudes: vec![1.0, -1.0],
            offsets: vec![0.0, 0.0],
            phases: vec![0.0, 0.0],
            period_base: 100.0,
            noise_std: 0.0,
            speed: 1,
        };
        for k in 1..200 {
            let mu = env.mean_reward(0, k);
            assert!((env.optimal_expected_return(k).unwrap() - mu.abs()).abs() < 1e-15);
        }
    }

    #[test]
    fn optimum_is_max_over_items() {
        let env = RecommenderEnv::new(4);
        for k in 1..300 {
            let brute = (0..5)
                .map(|i| env.mean_reward(i, k))
                .fold(f64::MIN, f64::max);
            assert_eq!(env.optimal_expected_return(k).unwrap(), brute);
        }
    }

    #[test]
    fn schedules_are_smooth() {
        for speed in 0..5 {
            let env = RecommenderEnv::new(speed);
            for k in 1..2000 {
                for i in 0..5 {
                    let jump = (env.mean_reward(i, k + 1) - env.mean_reward(i, k)).abs();
                    let bound = 2.0 * PI * speed as f64 * env.amplitudes[i] / env.period_base;
                    assert!(jump <= bound + 1e-15);
                }
            }
        }
    }

    #[test]
    fn goal_reacher_is_stationary_at_speed_zero() {
        let env = GoalReacherEnv::new(0);
        let first = env.reset(1, &mut rng());
        for k in 2..100 {
            assert_eq!(env.reset(k, &mut rng()), first);
            assert_eq!(env.goal(k), env.goal(1));
        }
    }

    #[test]
    fn goal_is_periodic() {
        let env = GoalReacherEnv::new(2);
        let period = 1000;
        for k in [1, 17, 500] {
            let (a, b) = (env.goal(k), env.goal(k + period));
            assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
        }
    }

    #[test]
    fn reaching_the_goal() {
        // Goal at angle 0 is (0.5, 0); from (0.4, 0) moving right lands within reach.
        let env = GoalReacherEnv::new(0);
        let t = env.step(&[0.4, 0.0], 1, 1, &mut rng()).unwrap();
        assert_eq!(t.reward, 1.0);
        assert!(t.done);
    }

    #[test]
    fn wandering_for_the_whole_horizon() {
        let env = GoalReacherEnv::new(0);
        let mut state = env.reset(1, &mut rng());
        let mut total = 0.0;
        let mut steps = 0;
        for _ in 0..env.horizon() {
            // Pacing left and right near the origin never reaches the goal.
            let action = steps % 2;
            let t = env.step(&state, action, 1, &mut rng()).unwrap();
            total += t.reward;
            steps += 1;
            state = t.next_state;
            assert!(!t.done);
        }
        assert_eq!(steps, 15);
        assert!((total + 0.75).abs() < 1e-12);
    }

    #[test]
    fn walls_clamp_position() {
        let env = GoalReacherEnv::new(0);
        let t = env.step(&[-1.0, 0.0], 0, 1, &mut rng()).unwrap();
        assert_eq!(t.next_state, vec![-1.0, 0.0]);
    }

    #[test]
    fn goal_reacher_has_no_known_optimum() {
        assert!(matches!(
            GoalReacherEnv::new(1).optimal_expected_return(3),
            Err(Error::Unsupported(_))
        ));
    }
}
