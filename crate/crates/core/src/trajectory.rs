//! Episode records and the append-only buffer of past episodes.

use std::io::Write;

use crate::error::{Error, Result};

/// One decision: the observed state, the action taken, the probability the
/// behavior policy assigned to that action, and the reward that followed.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: Vec<f64>,
    pub action: usize,
    pub behavior_prob: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// 1-based index of the episode this trajectory was recorded in.
    pub episode_index: usize,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn new(episode_index: usize) -> Self {
        Self {
            episode_index,
            steps: Vec::new(),
        }
    }

    pub fn with_steps(episode_index: usize, steps: Vec<Step>) -> Self {
        Self {
            episode_index,
            steps,
        }
    }

    pub fn push(&mut self, state: Vec<f64>, action: usize, behavior_prob: f64, reward: f64) {
        self.steps.push(Step {
            state,
            action,
            behavior_prob,
            reward,
        });
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> impl Iterator<Item = f64> + '_ {
        self.steps.iter().map(|s| s.reward)
    }

    /// Checks behavior probabilities lie in `(0, 1]` and rewards are finite.
    pub fn validate(&self) -> Result<()> {
        for (t, step) in self.steps.iter().enumerate() {
            if !(step.behavior_prob > 0.0 && step.behavior_prob <= 1.0) {
                return Err(Error::DataCorruption(format!(
                    "episode {} step {t}: behavior probability {}",
                    self.episode_index, step.behavior_prob
                )));
            }
            if !step.reward.is_finite() {
                return Err(Error::DataCorruption(format!(
                    "episode {} step {t}: reward {}",
                    self.episode_index, step.reward
                )));
            }
        }
        Ok(())
    }

    /// `Σ_t γ^t r_t`.
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        let mut discount = 1.0;
        let mut total = 0.0;
        for r in self.rewards() {
            total += discount * r;
            discount *= gamma;
        }
        total
    }
}

/// Append-only history of every episode seen so far, in episode order.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    trajectories: Vec<Trajectory>,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the next episode. Its index must be exactly `len() + 1`.
    pub fn insert(&mut self, traj: Trajectory) -> Result<()> {
        let expected = self.trajectories.len() + 1;
        if traj.episode_index != expected {
            return Err(Error::Sequencing {
                expected,
                got: traj.episode_index,
            });
        }
        traj.validate()?;
        self.trajectories.push(traj);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Trajectory> {
        self.trajectories.iter()
    }

    /// The most recent `n` trajectories (fewer if the buffer is shorter).
    pub fn recent(&self, n: usize) -> &[Trajectory] {
        let start = self.trajectories.len().saturating_sub(n);
        &self.trajectories[start..]
    }

    /// Writes one CSV line per step: `episode,t,state…,action,behavior_prob,reward`.
    pub fn write_log<W: Write>(&self, mut out: W) -> Result<()> {
        for traj in &self.trajectories {
            for (t, step) in traj.steps.iter().enumerate() {
                write!(out, "{},{}", traj.episode_index, t)?;
                for s in &step.state {
                    write!(out, ",{s}")?;
                }
                writeln!(
                    out,
                    ",{},{},{}",
                    step.action, step.behavior_prob, step.reward
                )?;
            }
        }
        Ok(())
    }
}

impl<'a> IntoIterator for &'a ReplayBuffer {
    type Item = &'a Trajectory;
    type IntoIter = std::slice::Iter<'a, Trajectory>;

    fn into_iter(self) -> Self::IntoIter {
        self.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(index: usize, rewards: &[f64]) -> Trajectory {
        let mut t = Trajectory::new(index);
        for &r in rewards {
            t.push(vec![1.0], 0, 0.5, r);
        }
        t
    }

    #[test]
    fn inserts_in_sequence() {
        let mut buf = ReplayBuffer::new();
        buf.insert(traj(1, &[1.0])).unwrap();
        assert_eq!(buf.len(), 1);
        buf.insert(traj(2, &[1.0])).unwrap();
        buf.insert(traj(3, &[1.0])).unwrap();
        buf.insert(traj(4, &[1.0])).unwrap();
        assert_eq!(buf.len(), 4);
    }

    #[test]
    fn duplicate_or_gap_is_rejected() {
        let mut buf = ReplayBuffer::new();
        for i in 1..=3 {
            buf.insert(traj(i, &[0.0])).unwrap();
        }
        assert_eq!(
            buf.insert(traj(3, &[0.0])),
            Err(Error::Sequencing {
                expected: 4,
                got: 3
            })
        );
        assert!(buf.insert(traj(6, &[0.0])).is_err());
        assert_eq!(buf.len(), 3);
    }

    #[test]
    fn zero_behavior_probability_is_rejected() {
        let mut t = Trajectory::new(1);
        t.push(vec![1.0], 0, 0.0, 1.0);
        assert!(matches!(
            ReplayBuffer::new().insert(t),
            Err(Error::DataCorruption(_))
        ));
    }

    #[test]
    fn discounted_returns() {
        assert_eq!(traj(1, &[1.0, 4.0]).discounted_return(0.5), 3.0);
        assert_eq!(traj(1, &[0.0, 0.0, 0.0]).discounted_return(0.9), 0.0);
        assert_eq!(traj(1, &[2.5]).discounted_return(0.3), 2.5);
    }

    #[test]
    fn recent_window() {
        let mut buf = ReplayBuffer::new();
        for i in 1..=5 {
            buf.insert(traj(i, &[i as f64])).unwrap();
        }
        let idx: Vec<_> = buf.recent(2).iter().map(|t| t.episode_index).collect();
        assert_eq!(idx, vec![4, 5]);
        assert_eq!(buf.recent(10).len(), 5);
    }

    #[test]
    fn log_lines() {
        let mut buf = ReplayBuffer::new();
        let mut t = Trajectory::new(1);
        t.push(vec![0.5, -1.0], 2, 0.25, 1.5);
        buf.insert(t).unwrap();
        let mut out = Vec::new();
        buf.write_log(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "1,0,0.5,-1,2,0.25,1.5\n");
    }

    proptest! {
        #[test]
        fn gamma_zero_keeps_first_reward(rewards in proptest::collection::vec(-10.0f64..10.0, 1..20)) {
            prop_assert_eq!(traj(1, &rewards).discounted_return(0.0), rewards[0]);
        }

        #[test]
        fn iteration_follows_insertion(n in 1usize..40) {
            let mut buf = ReplayBuffer::new();
            for i in 1..=n {
                buf.insert(traj(i, &[i as f64])).unwrap();
                let seen: Vec<_> = buf.iter().map(|t| t.episode_index).collect();
                prop_assert_eq!(seen, (1..=i).collect::<Vec<_>>());
            }
        }
    }
}
