//! Policy optimization for environments that drift over time.
//!
//! An ordinary policy-gradient method treats every past episode as evidence
//! about the environment it will face next. When the environment changes
//! from episode to episode, that evidence is stale. The agents in this crate
//! instead estimate how well the current policy *would have done* in each
//! past episode (by importance sampling), fit a least-squares trend to those
//! estimates, and climb the gradient of the trend's forecast for the next
//! few episodes.
//!
//! The forecast is linear in the per-episode estimates, so its gradient is a
//! weighted sum of per-episode gradients. Those weights can be read off
//! directly:
//!
//! ```
//! use prognosticator::basis::TimeBasisConfig;
//! use prognosticator::estimators::forecast_weights;
//!
//! // A linear trend through 3 episodes, forecasting the 4th.
//! let zeta = forecast_weights(3, 1, &TimeBasisConfig::identity())?;
//! assert!((zeta[0] + 2.0 / 3.0).abs() < 1e-12);
//! assert!((zeta[2] - 4.0 / 3.0).abs() < 1e-12);
//! assert!((zeta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
//! # Ok::<(), prognosticator::Error>(())
//! ```
//!
//! The oldest episode gets a negative weight: extrapolating a trend means
//! moving *away* from what used to work.
//!
//! # Layout
//!
//! * [`linalg`], [`basis`]: least-squares machinery and time features.
//! * [`trajectory`], [`policy`]: logged episodes and differentiable softmax
//!   policies.
//! * [`estimators`], [`gradients`]: the NIS and NWIS forecasters and their
//!   exact gradients. [`batch_eval`] computes the same gradients faster by
//!   sharing work across repeated states.
//! * [`envs`]: a drifting recommender bandit and a goal reacher with a
//!   moving goal.
//! * [`agents`]: Pro-OLS, Pro-WLS and the FTRL-PG and ONPG baselines.
//! * [`harness`]: configuration files, seeded trials, regret tables, CSV.
//! * [`diagnostics`]: finite-difference and Monte Carlo self-checks.

pub mod agents;
pub mod basis;
pub mod batch_eval;
pub mod diagnostics;
pub mod envs;
pub mod error;
pub mod estimators;
pub mod gradients;
pub mod harness;
pub mod linalg;
pub mod policy;
pub mod trajectory;

pub use agents::{run_agent, AgentConfig, AgentKind, EpisodeLog, Learner};
pub use basis::{BasisFamily, TimeBasisConfig};
pub use envs::{EnvModel, EnvName, Environment, GoalReacherEnv, RecommenderEnv};
pub use error::{Error, Result};
pub use harness::ExperimentConfig;
pub use policy::{MlpSoftmaxPolicy, Policy, PolicyFamily, PolicyModel, SoftmaxLinearPolicy};
pub use trajectory::{ReplayBuffer, Step, Trajectory};
