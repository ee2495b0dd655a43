//! Human-in-the-loop multi-agent reinforcement learning platform.
//!
//! An orchestrator runs trials that connect a grid-world environment,
//! learning agents, and an optional human actor over a framed wire protocol.
//! Rewards from several sources are fused per tick, every tick is logged to
//! an append-only trial log, and logs export to offline datasets for the
//! learners in [`algorithms`].

pub mod algorithms;
pub mod approximator;
pub mod cli;
pub mod datastore;
pub mod environment;
pub mod orchestrator;
pub mod protocol;
