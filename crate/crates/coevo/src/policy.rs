//! Parametric stand-in policies for the two co-evolving roles.
//!
//! The solver is a per-topic skill model: its chance of solving a question
//! is a sigmoid of skill minus question difficulty (in logit space). The
//! verifier is a categorical distribution over verification archetypes,
//! each tied to a judging profile and an embedding center. Both live in one
//! flat parameter vector so a single optimizer step moves them together.

use crate::judge::JudgeProfile;
use crate::seeding::SeedStream;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("parameter vector has {got} entries, policy expects {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("action references topic {topic}, policy has {topics}")]
    TopicOutOfRange { topic: usize, topics: usize },
    #[error("action references archetype {archetype}, policy has {archetypes}")]
    ArchetypeOutOfRange { archetype: usize, archetypes: usize },
}

/// One sampled decision by either role.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Action {
    /// Solver attempted a question and either solved it or not.
    Solve {
        topic: usize,
        difficulty_logit: f64,
        correct: bool,
    },
    /// Verifier picked a verification archetype.
    Strategy { archetype: usize },
}

/// A verification style: how accurate its judgments are, how noisy its
/// embeddings are, and where they sit in embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Archetype {
    pub profile: JudgeProfile,
    pub noise: f64,
    pub mean: Vec<f64>,
}

impl Archetype {
    /// Lays out `count` archetype centers evenly on a circle of the given
    /// radius in the first two embedding axes.
    pub fn ring(
        profiles: &[JudgeProfile],
        noise: &[f64],
        radius: f64,
        dims: usize,
    ) -> Vec<Archetype> {
        let count = profiles.len();
        profiles
            .iter()
            .zip(noise)
            .enumerate()
            .map(|(a, (&profile, &sigma))| {
                let phi = 2.0 * std::f64::consts::PI * a as f64 / count as f64;
                let mut mean = vec![0.0; dims];
                mean[0] = radius * phi.cos();
                mean[1] = radius * phi.sin();
                Archetype {
                    profile,
                    noise: sigma,
                    mean,
                }
            })
            .collect()
    }

    /// Embedding for one strategy draw: the center plus isotropic noise.
    pub fn sample_embedding(&self, noise_seed: u64) -> Vec<f64> {
        let mut rng = SeedStream::new(noise_seed).str("embed").rng();
        self.mean
            .iter()
            .map(|&mu| {
                let z: f64 = StandardNormal.sample(&mut rng);
                mu + self.noise * z
            })
            .collect()
    }
}

/// Probability, clamped away from 0 and 1 so log-probabilities stay finite.
fn clamp_prob(p: f64) -> f64 {
    p.clamp(1e-12, 1.0 - 1e-12)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Converts a difficulty in (0, 1) to its logit.
pub fn difficulty_logit(difficulty: f64) -> f64 {
    (difficulty / (1.0 - difficulty)).ln()
}

/// Joint policy: per-topic solver skills followed by verifier archetype
/// logits in one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CoPolicy {
    pub skills: Vec<f64>,
    pub logits: Vec<f64>,
    /// Sharpness of the skill-vs-difficulty contest; fixed, not learned.
    pub temperature: f64,
}

impl CoPolicy {
    pub fn new(topics: usize, archetypes: usize, init_skill: f64, temperature: f64) -> Self {
        Self {
            skills: vec![init_skill; topics],
            logits: vec![0.0; archetypes],
            temperature,
        }
    }

    pub fn n_params(&self) -> usize {
        self.skills.len() + self.logits.len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.skills.clone();
        p.extend_from_slice(&self.logits);
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), PolicyError> {
        if params.len() != self.n_params() {
            return Err(PolicyError::ParamCount {
                expected: self.n_params(),
                got: params.len(),
            });
        }
        let (skills, logits) = params.split_at(self.skills.len());
        self.skills.copy_from_slice(skills);
        self.logits.copy_from_slice(logits);
        Ok(())
    }

    /// Chance the solver answers a question of this topic and difficulty.
    pub fn solve_prob(&self, topic: usize, difficulty_logit: f64) -> Result<f64, PolicyError> {
        let skill = *self
            .skills
            .get(topic)
            .ok_or(PolicyError::TopicOutOfRange {
                topic,
                topics: self.skills.len(),
            })?;
        Ok(clamp_prob(sigmoid((skill - difficulty_logit) / self.temperature)))
    }

    /// Archetype distribution of the verifier.
    pub fn archetype_probs(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    pub fn logp(&self, action: &Action) -> Result<f64, PolicyError> {
        match *action {
            Action::Solve {
                topic,
                difficulty_logit,
                correct,
            } => {
                let p = self.solve_prob(topic, difficulty_logit)?;
                Ok(if correct { p.ln() } else { (1.0 - p).ln() })
            }
            Action::Strategy { archetype } => {
                if archetype >= self.logits.len() {
                    return Err(PolicyError::ArchetypeOutOfRange {
                        archetype,
                        archetypes: self.logits.len(),
                    });
                }
                Ok(clamp_prob(self.archetype_probs()[archetype]).ln())
            }
        }
    }

    /// Gradient of `logp` with respect to the full parameter vector.
    pub fn grad_logp(&self, action: &Action) -> Result<Vec<f64>, PolicyError> {
        let mut grad = vec![0.0; self.n_params()];
        match *action {
            Action::Solve {
                topic,
                difficulty_logit,
                correct,
            } => {
                let p = self.solve_prob(topic, difficulty_logit)?;
                // d logp / d skill: (1 - p) / T on success, -p / T on failure
                grad[topic] = if correct { 1.0 - p } else { -p } / self.temperature;
            }
            Action::Strategy { archetype } => {
                if archetype >= self.logits.len() {
                    return Err(PolicyError::ArchetypeOutOfRange {
                        archetype,
                        archetypes: self.logits.len(),
                    });
                }
                let probs = self.archetype_probs();
                let base = self.skills.len();
                for (k, &pk) in probs.iter().enumerate() {
                    grad[base + k] = f64::from(k == archetype) - pk;
                }
            }
        }
        Ok(grad)
    }

    /// Draws a correctness event for one solution attempt.
    pub fn sample_solve(
        &self,
        topic: usize,
        difficulty_logit: f64,
        rng: &mut impl Rng,
    ) -> Result<Action, PolicyError> {
        let p = self.solve_prob(topic, difficulty_logit)?;
        Ok(Action::Solve {
            topic,
            difficulty_logit,
            correct: rng.gen::<f64>() < p,
        })
    }

    /// Draws an archetype for one strategy.
    pub fn sample_strategy(&self, rng: &mut impl Rng) -> Action {
        let probs = self.archetype_probs();
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (a, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return Action::Strategy { archetype: a };
            }
        }
        Action::Strategy {
            archetype: probs.len() - 1,
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
