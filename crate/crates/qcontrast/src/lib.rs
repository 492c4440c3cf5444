//! Contrastive analysis of Q-learning driving policies.
//!
//! The crate trains families of DQN policies on a three-lane merging task
//! with different reward preferences, detects the states where two policies
//! disagree, separates preference-based disagreements from ability-based
//! ones, and renders natural-language explanations of what each policy
//! prefers.
//!
//! The pipeline, end to end:
//!
//! 1. [`env`] — the merging simulator with exact state snapshot/restore.
//! 2. [`dqn`] — from-scratch DQN training producing [`dqn::QFunction`]
//!    policies; every consumer sees policies only through their Q vectors.
//! 3. [`disagreement`] — rolls policy A, branches both policies from every
//!    state where their greedy actions differ, and records trajectories,
//!    outcomes and Q vectors.
//! 4. [`filter`] — keeps disagreements where both policies are confident and
//!    value the state and their own outcomes similarly.
//! 5. [`explain`] — paired t-tests over outcome features, rendered as a
//!    contrastive sentence.
//! 6. [`harness`] — trains the whole policy suite and reproduces the three
//!    evaluation scenarios with CSV/JSON reports.
//!
//! Each major capability has a runnable demo under `examples/`; the `qcontrast`
//! binary exposes the same steps as subcommands.

pub mod config;
pub mod disagreement;
pub mod dqn;
pub mod env;
pub mod error;
pub mod explain;
pub mod filter;
pub mod harness;
pub mod nn;
pub mod seeds;
pub mod stats;
mod wire;

pub use error::{Error, Result};
