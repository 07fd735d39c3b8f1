//! Reward functions for both sides of the co-evolution loop.
//!
//! Solutions are rewarded either against ground-truth labels or by the
//! fraction of strategies that accept them. Strategies are rewarded by a
//! signed agreement score against the trusted solution set, optionally
//! shaped by embedding geometry: closeness to their cluster center and
//! angular spread within the cluster.

use crate::core::{CorrectPartition, EvalMatrix, PartitionSource};
use crate::geometry::{
    kmeans, project_clusters, Clustering, GeometryError, PcaScope, PolarProjection,
};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("no trusted solutions; strategy sign is undefined")]
    EmptyPositiveSet,
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
    #[error("expected {expected} embeddings, got {got}")]
    EmbeddingCount { expected: usize, got: usize },
    #[error("partition covers {partition} solutions, matrix has {matrix}")]
    PartitionSize { partition: usize, matrix: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Weights and thresholds for reward computation.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardConfig {
    /// Consensus threshold: a solution is trusted when its pass rate is at
    /// least `tau`.
    pub tau: f64,
    /// Weight of the consistency term.
    pub alpha: f64,
    /// Weight of the reliability term.
    pub beta: f64,
    /// Weight of the diversity term.
    pub gamma: f64,
    /// Cluster count for the geometric terms.
    pub k: usize,
    /// Denominator guard for the reliability normalizer.
    pub epsilon: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            tau: 0.8,
            alpha: 1.0,
            beta: 0.5,
            gamma: 0.5,
            k: 1,
            epsilon: 1e-8,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(RewardError::InvalidConfig(format!(
                "tau {} outside [0, 1]",
                self.tau
            )));
        }
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !w.is_finite() || w < 0.0 {
                return Err(RewardError::InvalidConfig(format!(
                    "weight {name} must be finite and nonnegative, got {w}"
                )));
            }
        }
        if self.k == 0 {
            return Err(RewardError::InvalidConfig("k must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(RewardError::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Binary reward per solution from ground-truth labels.
pub fn solver_reward_anchored(labels: &[bool]) -> Vec<f64> {
    labels.iter().map(|&c| f64::from(u8::from(c))).collect()
}

/// Trusted/untrusted split straight from ground-truth labels.
pub fn partition_from_labels(labels: &[bool]) -> CorrectPartition {
    CorrectPartition::new(labels.to_vec(), PartitionSource::GroundTruth)
}

/// Pass rate per solution: the fraction of strategies accepting it.
pub fn solver_reward_consensus(matrix: &EvalMatrix) -> Vec<f64> {
    matrix.pass_rates()
}

/// Trusted/untrusted split by consensus: solutions whose pass rate reaches
/// `tau` (inclusive) are trusted.
pub fn consensus_partition(matrix: &EvalMatrix, tau: f64) -> CorrectPartition {
    let mask = matrix.pass_rates().iter().map(|&r| r >= tau).collect();
    CorrectPartition::new(mask, PartitionSource::Consensus)
}

/// +1 when strategy `j` accepts every trusted solution, else -1.
pub fn strategy_sign(
    matrix: &EvalMatrix,
    partition: &CorrectPartition,
    j: usize,
) -> Result<f64, RewardError> {
    check_partition(matrix, partition)?;
    if partition.n_positive() == 0 {
        return Err(RewardError::EmptyPositiveSet);
    }
    let all_pass = partition.positive().all(|i| matrix.get(i, j) == 1);
    Ok(if all_pass { 1.0 } else { -1.0 })
}

fn check_partition(matrix: &EvalMatrix, partition: &CorrectPartition) -> Result<(), RewardError> {
    if partition.len() != matrix.n_solutions() {
        return Err(RewardError::PartitionSize {
            partition: partition.len(),
            matrix: matrix.n_solutions(),
        });
    }
    Ok(())
}

/// Signed agreement reward per strategy: the sign gate times the mean
/// rejection rate over untrusted solutions.
///
/// With no untrusted solutions the reward is 0. With no trusted solutions
/// every reward is 0; callers should also skip the verifier update for the
/// question in that case.
pub fn verifier_reward_anchored(
    matrix: &EvalMatrix,
    partition: &CorrectPartition,
) -> Result<Vec<f64>, RewardError> {
    check_partition(matrix, partition)?;
    let m = matrix.n_strategies();
    if partition.n_positive() == 0 {
        return Ok(vec![0.0; m]);
    }
    let negatives: Vec<usize> = partition.negative().collect();
    let mut rewards = Vec::with_capacity(m);
    for j in 0..m {
        if negatives.is_empty() {
            rewards.push(0.0);
            continue;
        }
        let sign = strategy_sign(matrix, partition, j)?;
        let rejection: f64 = negatives
            .iter()
            .map(|&i| 1.0 - f64::from(matrix.get(i, j)))
            .sum::<f64>()
            / negatives.len() as f64;
        let r = sign * rejection;
        // avoid returning -0.0 when the rejection rate is zero
        rewards.push(if r == 0.0 { 0.0 } else { r });
    }
    Ok(rewards)
}

/// Distance-based reliability per strategy, normalized within its own
/// cluster: 1 at the center, approaching 0 at the farthest member.
pub fn reliability_rewards(clustering: &Clustering, epsilon: f64) -> Vec<f64> {
    let mut max_in_cluster = vec![0.0f64; clustering.k];
    for (&a, &d) in clustering.assignment.iter().zip(&clustering.distances) {
        if d > max_in_cluster[a] {
            max_in_cluster[a] = d;
        }
    }
    clustering
        .assignment
        .iter()
        .zip(&clustering.distances)
        .map(|(&a, &d)| 1.0 - d / (max_in_cluster[a] + epsilon))
        .collect()
}

/// Mean angular separation of each strategy from the rest of its cluster,
/// measured as 1 - cos of pairwise angle differences. Singleton clusters
/// score 0.
pub fn diversity_rewards(angles: &[f64], assignment: &[usize], k: usize) -> Vec<f64> {
    let mut rewards = vec![0.0; angles.len()];
    for c in 0..k {
        let members: Vec<usize> = assignment
            .iter()
            .enumerate()
            .filter_map(|(j, &a)| (a == c).then_some(j))
            .collect();
        if members.len() < 2 {
            continue;
        }
        let denom = (members.len() - 1) as f64;
        for &j in &members {
            let sum: f64 = members
                .iter()
                .filter(|&&other| other != j)
                .map(|&other| 1.0 - (angles[j] - angles[other]).cos())
                .sum();
            rewards[j] = sum / denom;
        }
    }
    rewards
}

/// Per-strategy reward components and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoRewardBreakdown {
    pub r_con: f64,
    pub r_rel: f64,
    pub r_div: f64,
    pub r_ver: f64,
}

/// Output of the geometric reward pipeline, including the geometry it was
/// derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometricRewards {
    pub breakdown: Vec<GeoRewardBreakdown>,
    pub clustering: Clustering,
    pub projection: PolarProjection,
    /// Set when the trusted set was empty: rewards are zero and the
    /// question should not drive a verifier update.
    pub skip_verifier_update: bool,
}

const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_TOL: f64 = 1e-10;

/// Full geometric reward: cluster the strategy embeddings, project each
/// cluster to its principal plane, then combine consistency, reliability,
/// and diversity with the configured weights.
pub fn verifier_reward_geometric(
    matrix: &EvalMatrix,
    partition: &CorrectPartition,
    embeddings: &[Vec<f64>],
    config: &RewardConfig,
    scope: PcaScope,
    seed: u64,
) -> Result<GeometricRewards, RewardError> {
    config.validate()?;
    check_partition(matrix, partition)?;
    let m = matrix.n_strategies();
    if embeddings.len() != m {
        return Err(RewardError::EmbeddingCount {
            expected: m,
            got: embeddings.len(),
        });
    }
    let clustering = kmeans(embeddings, config.k, seed, KMEANS_MAX_ITERS, KMEANS_TOL)?;
    let projection = project_clusters(embeddings, &clustering, scope)?;
    let r_con = verifier_reward_anchored(matrix, partition)?;
    let r_rel = reliability_rewards(&clustering, config.epsilon);
    let r_div = diversity_rewards(&projection.angles, &clustering.assignment, config.k);
    let breakdown = (0..m)
        .map(|j| GeoRewardBreakdown {
            r_con: r_con[j],
            r_rel: r_rel[j],
            r_div: r_div[j],
            r_ver: config.alpha * r_con[j] + config.beta * r_rel[j] + config.gamma * r_div[j],
        })
        .collect();
    Ok(GeometricRewards {
        breakdown,
        clustering,
        projection,
        skip_verifier_update: partition.n_positive() == 0,
    })
}
