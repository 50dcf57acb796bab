//! A self-contained laboratory for studying how two agents learn to share
//! goals in a cooperative navigation world.
//!
//! The crate provides, from the ground up:
//!
//! * [`nn`] — small dense networks (`f64` throughout) with hand-written
//!   reverse-mode gradients, an Adam optimizer, and categorical utilities;
//! * [`env`] — a bounded room with landmarks on the walls, unicycle-style
//!   kinematics, per-agent goal rewards and freeze-on-success semantics;
//! * [`goals`] — the one-hot/two-hot goal space, uniform and
//!   learning-progress goal samplers, and the alignment controller that
//!   interpolates between independent and centralized goal assignment;
//! * [`comm`] — the goal-coordination game: per-agent goal-by-message
//!   matrices updated from batched episode returns, with softmax
//!   message/goal selection;
//! * [`ppo`] — a PPO learner with clipped surrogate objective, GAE, and
//!   pluggable goal/critic conditioning modes;
//! * [`scripted`] — a greedy navigation controller used as a learning-free
//!   reference policy;
//! * [`run`] — the experiment orchestrator: episode collection, training
//!   loops, evaluation sweeps, journaling, and checkpoints;
//! * [`metrics`] — alignment, specialization, risky-follower statistics,
//!   interquartile means and stratified bootstrap intervals;
//! * [`config`] — the on-disk experiment configuration.
//!
//! The accompanying guide under `book/` walks through each concept; its code
//! samples compile as doc-tests via the [`book`] module.

pub mod book;
pub mod comm;
pub mod config;
pub mod env;
pub mod goals;
pub mod metrics;
pub mod nn;
pub mod ppo;
pub mod run;
pub mod scripted;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor operation received operands of incompatible shape.
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    /// A numeric input contained NaN or infinity.
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },
    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    /// An operation was applied to an episode that already terminated.
    #[error("episode already terminated (step {step} >= time limit {limit})")]
    EpisodeTerminated { step: usize, limit: usize },
    /// Not enough data for a statistic to be well defined.
    #[error("insufficient data for {op}: {details}")]
    InsufficientData { op: &'static str, details: String },
    /// A checkpoint or record file could not be read or written.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// A serialized artifact could not be parsed.
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
