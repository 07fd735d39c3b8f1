//! Solver/verifier co-evolution at desk scale.
//!
//! The library models a pool of candidate solutions judged by a pool of
//! verification strategies. Verdicts form a binary evaluation matrix from
//! which both sides earn rewards: solutions by ground-truth anchoring or by
//! consensus pass rate, strategies by agreement with the trusted solution
//! set plus geometric shaping (cluster reliability and angular diversity of
//! strategy embeddings). A small PPO-style trainer co-evolves synthetic
//! solver and verifier policies against these rewards.

pub mod core;
pub mod geometry;
pub mod io;
pub mod judge;
pub mod policy;
pub mod ppo;
pub mod rewards;
pub mod seeding;
pub mod trainer;

pub use crate::core::{CoreError, CorrectPartition, EvalMatrix, PartitionSource};
pub use crate::core::{Question, QuestionPayload, Solution, Strategy, StrategyContent};
