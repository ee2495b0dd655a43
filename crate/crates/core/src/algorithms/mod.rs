//! Value-learning and policy-gradient machinery: bootstrap targets, dueling
//! heads, monotone mixing, centralized critics with decentralized actors,
//! replay, and the training loop that composes them.

pub mod dueling;
pub mod maddpg;
pub mod mixer;
pub mod replay;
pub mod targets;
pub mod train;

use thiserror::Error;

use crate::approximator::ApproxError;
use crate::environment::EnvError;

pub use dueling::{DuelingHead, DuelingOutput};
pub use maddpg::{
    critic_update, entropy_grad, maddpg_actor_grad, Actor, DuelingCritic, JointCritic, JointLayout,
    MlpCritic, PolicyHead, TargetNets,
};
pub use mixer::MixerParams;
pub use replay::{ReplayBuffer, Transition};
pub use targets::{argmax, ddqn_target, dqn_target, epsilon_greedy, EpsilonSchedule};
pub use train::{
    train_loop, train_offline, Algorithm, CurveRow, DirectDriver, EnvDriver, Hyperparams, Learner,
    StepResult, TrainConfig, TrainOutcome,
};

#[derive(Debug, Error, PartialEq)]
pub enum AlgoError {
    #[error("empty action set")]
    EmptyActionSet,
    #[error("empty batch")]
    EmptyBatch,
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Approx(#[from] ApproxError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("environment driver: {0}")]
    Driver(String),
    #[error("io: {0}")]
    Io(String),
}
