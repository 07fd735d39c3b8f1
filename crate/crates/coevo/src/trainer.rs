//! Two-stage co-evolution loop over a synthetic question pool.
//!
//! Stage 1 trains on the labeled slice of the pool: solver rewards are
//! ground-truth labels, verifier rewards are signed agreement with the
//! labeled partition, and the two roles update sequentially. Stage 2 moves
//! to unlabeled questions: the trusted set comes from consensus pass rates,
//! verifiers earn the geometric reward, and both roles share one joint
//! update. Every step appends one row of metrics; step 0 is a dry
//! evaluation of the initial policy.

use crate::core::{CoreError, Question, Solution, Strategy};
use crate::geometry::{circular_dispersion, PcaScope};
use crate::judge::{Judge, JudgeError, JudgeProfile, SyntheticJudge};
use crate::policy::{difficulty_logit, Action, Archetype, CoPolicy, PolicyError};
use crate::ppo::{advantage_baseline, ppo_loss_and_grad, ppo_update, PpoConfig, PpoError, Sample};
use crate::rewards::{
    consensus_partition, partition_from_labels, solver_reward_consensus,
    verifier_reward_geometric, GeometricRewards, RewardConfig, RewardError,
};
use crate::seeding::SeedStream;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config: {0}")]
    Config(String),
    #[error("schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// Everything one run needs, flat so it maps 1:1 onto a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    /// Solutions sampled per question.
    pub n_solutions: usize,
    /// Strategies sampled per question.
    pub m_strategies: usize,
    /// Questions per training step.
    pub batch_questions: usize,
    pub pool_size: usize,
    /// Leading fraction of the pool that carries trusted labels.
    pub labeled_fraction: f64,
    pub topics: usize,
    /// Embedding dimensionality.
    pub dims: usize,
    /// Radius of the circle the archetype centers sit on.
    pub radius: f64,
    pub archetype_tpr: Vec<f64>,
    pub archetype_tnr: Vec<f64>,
    pub archetype_noise: Vec<f64>,
    pub init_skill: f64,
    pub solver_temperature: f64,
    pub lr: f64,
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub clusters: usize,
    pub epsilon: f64,
    pub pca_scope: PcaScope,
    /// Comma-separated stage plan, e.g. "stage1:300,stage2:300".
    pub schedule: String,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_solutions: 10,
            m_strategies: 10,
            batch_questions: 100,
            pool_size: 1000,
            labeled_fraction: 0.5,
            topics: 4,
            dims: 8,
            radius: 1.6,
            archetype_tpr: vec![0.98, 0.97, 0.97, 0.97, 0.97, 0.97],
            archetype_tnr: vec![0.92, 0.66, 0.64, 0.62, 0.60, 0.52],
            archetype_noise: vec![0.06, 0.10, 0.10, 0.10, 0.10, 2.0],
            init_skill: 0.0,
            solver_temperature: 1.0,
            lr: 0.2,
            clip_eps: 0.2,
            kl_coef: 0.01,
            tau: 0.8,
            alpha: 1.0,
            beta: 0.5,
            gamma: 0.5,
            clusters: 1,
            epsilon: 1e-8,
            pca_scope: PcaScope::default(),
            schedule: "stage1:300,stage2:300".to_string(),
        }
    }
}

impl SimConfig {
    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig {
            tau: self.tau,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            k: self.clusters,
            epsilon: self.epsilon,
        }
    }

    pub fn ppo_config(&self) -> PpoConfig {
        PpoConfig {
            lr: self.lr,
            clip_eps: self.clip_eps,
            kl_coef: self.kl_coef,
        }
    }

    pub fn n_labeled(&self) -> usize {
        (self.labeled_fraction * self.pool_size as f64).ceil() as usize
    }

    pub fn profiles(&self) -> Result<Vec<JudgeProfile>, SimError> {
        self.archetype_tpr
            .iter()
            .zip(&self.archetype_tnr)
            .map(|(&tpr, &tnr)| JudgeProfile::new(tpr, tnr).map_err(SimError::from))
            .collect()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("n_solutions", self.n_solutions),
            ("m_strategies", self.m_strategies),
            ("batch_questions", self.batch_questions),
            ("pool_size", self.pool_size),
            ("topics", self.topics),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(SimError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.dims < 2 {
            return Err(SimError::Config("dims must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.labeled_fraction) {
            return Err(SimError::Config(format!(
                "labeled_fraction {} outside [0, 1]",
                self.labeled_fraction
            )));
        }
        let a = self.archetype_tpr.len();
        if a == 0 {
            return Err(SimError::Config("archetype tables are empty".into()));
        }
        if self.archetype_tnr.len() != a || self.archetype_noise.len() != a {
            return Err(SimError::Config(format!(
                "archetype tables disagree on length: tpr {a}, tnr {}, noise {}",
                self.archetype_tnr.len(),
                self.archetype_noise.len()
            )));
        }
        self.profiles()?;
        for &sigma in &self.archetype_noise {
            if !sigma.is_finite() || sigma < 0.0 {
                return Err(SimError::Config(format!("archetype noise {sigma} invalid")));
            }
        }
        for (name, value) in [
            ("radius", self.radius),
            ("solver_temperature", self.solver_temperature),
        ] {
            if !value.is_finite() || value <= 0.0 {
                return Err(SimError::Config(format!("{name} {value} must be positive")));
            }
        }
        if !self.init_skill.is_finite() {
            return Err(SimError::Config("init_skill must be finite".into()));
        }
        for (name, value) in [("lr", self.lr), ("kl_coef", self.kl_coef)] {
            if !value.is_finite() || value < 0.0 {
                return Err(SimError::Config(format!(
                    "{name} {value} must be nonnegative"
                )));
            }
        }
        if !self.clip_eps.is_finite() || self.clip_eps <= 0.0 || self.clip_eps >= 1.0 {
            return Err(SimError::Config(format!(
                "clip_eps {} outside (0, 1)",
                self.clip_eps
            )));
        }
        self.reward_config()
            .validate()
            .map_err(|e| SimError::Config(e.to_string()))?;
        let schedule = Schedule::parse(&self.schedule)?;
        let n_labeled = self.n_labeled();
        if schedule.steps_for(Stage::Stage1) > 0 && n_labeled == 0 {
            return Err(SimError::Config(
                "schedule has stage1 steps but no labeled questions".into(),
            ));
        }
        if schedule.steps_for(Stage::Stage2) > 0 && n_labeled == self.pool_size {
            return Err(SimError::Config(
                "schedule has stage2 steps but no unlabeled questions".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Stage1,
    Stage2,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }
}

/// Ordered stage plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub pairs: Vec<(Stage, usize)>,
}

impl Schedule {
    /// Parses "stage1:300,stage2:300"; stages may repeat and run in the
    /// order listed.
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let mut pairs = Vec::new();
        for part in text.split(',') {
            let part = part.trim();
            let (name, count) = part
                .split_once(':')
                .ok_or_else(|| SimError::Schedule(format!("expected stage:count, got {part:?}")))?;
            let stage = match name.trim() {
                "stage1" => Stage::Stage1,
                "stage2" => Stage::Stage2,
                other => {
                    return Err(SimError::Schedule(format!("unknown stage {other:?}")));
                }
            };
            let count: usize = count
                .trim()
                .parse()
                .map_err(|_| SimError::Schedule(format!("bad step count in {part:?}")))?;
            pairs.push((stage, count));
        }
        Ok(Self { pairs })
    }

    pub fn steps_for(&self, stage: Stage) -> usize {
        self.pairs
            .iter()
            .filter(|(s, _)| *s == stage)
            .map(|(_, n)| n)
            .sum()
    }

    pub fn total_steps(&self) -> usize {
        self.pairs.iter().map(|(_, n)| n).sum()
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub stage: String,
    pub mean_solver_reward: f64,
    pub mean_r_con: f64,
    pub mean_r_rel: f64,
    pub mean_r_div: f64,
    pub solver_accuracy: f64,
    pub bon_accuracy: f64,
    pub verifier_tpr: f64,
    pub verifier_tnr: f64,
    pub circular_dispersion: f64,
    pub kl: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

pub const PHASE_STAGE1_SOLUTIONS: &str = "stage1/solutions";
pub const PHASE_STAGE1_STRATEGIES: &str = "stage1/strategies";
pub const PHASE_STAGE2_JOINT: &str = "stage2/joint";

/// One training step's record plus probes for tests and tooling.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub record: TrainRecord,
    /// Update phases in the order they ran.
    pub phases: Vec<&'static str>,
    pub question_ids: Vec<String>,
}

/// Synthetic rollout of one question: sampled solutions and strategies,
/// their actions, and the judged matrix.
struct Rollout {
    question_idx: usize,
    solution_actions: Vec<Action>,
    strategy_actions: Vec<Action>,
    labels: Vec<bool>,
    matrix: crate::core::EvalMatrix,
    embeddings: Vec<Vec<f64>>,
}

/// Per-question geometric evaluation used for rewards in stage 2 and for
/// metrics everywhere.
struct GeoEval {
    rewards: GeometricRewards,
    dispersion: f64,
}

pub struct Trainer {
    cfg: SimConfig,
    pool: Vec<Question>,
    n_labeled: usize,
    archetypes: Vec<Archetype>,
    reward_cfg: RewardConfig,
    ppo_cfg: PpoConfig,
    pub policy: CoPolicy,
    pub reference: CoPolicy,
    global_step: usize,
}

/// Full output of a run: the log, the trained policy, and the frozen
/// reference it was penalized against.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<TrainRecord>,
    pub policy: CoPolicy,
    pub reference: CoPolicy,
}

pub fn run_training(cfg: &SimConfig) -> Result<TrainOutcome, SimError> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let records = trainer.run()?;
    Ok(TrainOutcome {
        records,
        policy: trainer.policy.clone(),
        reference: trainer.reference.clone(),
    })
}

/// Derives the question pool from the seed: stable ids, difficulties,
/// topics, and answers, with the leading slice labeled.
pub fn question_pool(cfg: &SimConfig) -> Vec<Question> {
    let n_labeled = cfg.n_labeled();
    (0..cfg.pool_size)
        .map(|idx| {
            let mut rng = SeedStream::new(cfg.seed).str("question").u64(idx as u64).rng();
            let difficulty = 0.05 + 0.945 * rng.gen::<f64>();
            let topic = rng.gen_range(0..cfg.topics);
            Question::synthetic(
                format!("p{idx}"),
                difficulty,
                format!("a{idx}"),
                topic,
                idx < n_labeled,
            )
            .expect("derived difficulty is in range")
        })
        .collect()
}

impl Trainer {
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let pool = question_pool(&cfg);
        let profiles = cfg.profiles()?;
        let archetypes = Archetype::ring(&profiles, &cfg.archetype_noise, cfg.radius, cfg.dims);
        let policy = CoPolicy::new(
            cfg.topics,
            archetypes.len(),
            cfg.init_skill,
            cfg.solver_temperature,
        );
        let reference = policy.clone();
        let reward_cfg = cfg.reward_config();
        let ppo_cfg = cfg.ppo_config();
        Ok(Self {
            n_labeled: cfg.n_labeled(),
            cfg,
            pool,
            archetypes,
            reward_cfg,
            ppo_cfg,
            policy,
            reference,
            global_step: 0,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn pool(&self) -> &[Question] {
        &self.pool
    }

    /// Runs the configured schedule, returning one record per step plus the
    /// leading dry-evaluation row.
    pub fn run(&mut self) -> Result<Vec<TrainRecord>, SimError> {
        let schedule = Schedule::parse(&self.cfg.schedule)?;
        let mut records = vec![self.init_record()?];
        for (stage, count) in schedule.pairs.clone() {
            for _ in 0..count {
                let outcome = match stage {
                    Stage::Stage1 => self.stage1_step()?,
                    Stage::Stage2 => self.stage2_step()?,
                };
                records.push(outcome.record);
            }
        }
        Ok(records)
    }

    /// Indices into the pool for one step's batch: a seeded shuffle without
    /// replacement when the slice is large enough, cycling otherwise.
    fn select_batch(&self, lo: usize, hi: usize, tag: &str, step: usize) -> Vec<usize> {
        let len = hi - lo;
        let batch = self.cfg.batch_questions;
        if len >= batch {
            let mut idxs: Vec<usize> = (lo..hi).collect();
            let mut rng = SeedStream::new(self.cfg.seed)
                .str("batch")
                .str(tag)
                .u64(step as u64)
                .rng();
            idxs.shuffle(&mut rng);
            idxs.truncate(batch);
            idxs
        } else {
            (0..batch).map(|k| lo + (step * batch + k) % len).collect()
        }
    }

    fn rollout(&self, question_idx: usize, step: usize, judge: &SyntheticJudge) -> Result<Rollout, SimError> {
        let q = &self.pool[question_idx];
        let topic = q.topic();
        let ell = difficulty_logit(q.difficulty().expect("synthetic question"));
        let answer = q.reference_answer().expect("synthetic question").to_string();

        let n = self.cfg.n_solutions;
        let mut solutions = Vec::with_capacity(n);
        let mut solution_actions = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = SeedStream::new(self.cfg.seed)
                .str("solve")
                .u64(step as u64)
                .str(q.id())
                .u64(i as u64)
                .rng();
            let action = self.policy.sample_solve(topic, ell, &mut rng)?;
            let correct = matches!(action, Action::Solve { correct: true, .. });
            let content = if correct {
                answer.clone()
            } else {
                format!("w{i}")
            };
            solutions.push(Solution::new(q.id(), i, content));
            solution_actions.push(action);
            labels.push(correct);
        }

        let m = self.cfg.m_strategies;
        let mut strategies = Vec::with_capacity(m);
        let mut strategy_actions = Vec::with_capacity(m);
        let mut embeddings = Vec::with_capacity(m);
        for j in 0..m {
            let mut rng = SeedStream::new(self.cfg.seed)
                .str("strategy")
                .u64(step as u64)
                .str(q.id())
                .u64(j as u64)
                .rng();
            let action = self.policy.sample_strategy(&mut rng);
            let Action::Strategy { archetype } = action else {
                unreachable!("sample_strategy returns strategy actions");
            };
            let noise_seed = SeedStream::new(self.cfg.seed)
                .str("noise")
                .u64(step as u64)
                .str(q.id())
                .u64(j as u64)
                .finish();
            strategies.push(Strategy::synthetic(q.id(), j, archetype, noise_seed));
            strategy_actions.push(action);
            embeddings.push(self.archetypes[archetype].sample_embedding(noise_seed));
        }

        let matrix = judge.judge_matrix(q, &solutions, &strategies)?;
        Ok(Rollout {
            question_idx,
            solution_actions,
            strategy_actions,
            labels,
            matrix,
            embeddings,
        })
    }

    /// Judge whose draws are refreshed each step but stable within it.
    fn step_judge(&self, step: usize) -> Result<SyntheticJudge, SimError> {
        let seed = SeedStream::new(self.cfg.seed)
            .str("judge-step")
            .u64(step as u64)
            .finish();
        Ok(SyntheticJudge::new(self.cfg.profiles()?, seed))
    }

    fn geo_eval(&self, rollout: &Rollout, partition: &crate::core::CorrectPartition, step: usize) -> Result<GeoEval, SimError> {
        let q = &self.pool[rollout.question_idx];
        let seed = SeedStream::new(self.cfg.seed)
            .str("kmeans")
            .u64(step as u64)
            .str(q.id())
            .finish();
        let rewards = verifier_reward_geometric(
            &rollout.matrix,
            partition,
            &rollout.embeddings,
            &self.reward_cfg,
            self.cfg.pca_scope,
            seed,
        )?;
        let dispersion = circular_dispersion(&rewards.projection.angles);
        Ok(GeoEval { rewards, dispersion })
    }

    fn make_samples(&self, actions: &[Action], advantages: &[f64]) -> Result<Vec<Sample>, SimError> {
        actions
            .iter()
            .zip(advantages)
            .map(|(action, &advantage)| {
                Ok(Sample {
                    logp_old: self.policy.logp(action)?,
                    logp_ref: self.reference.logp(action)?,
                    advantage,
                    action: *action,
                })
            })
            .collect()
    }

    /// Softmax-weighted expectation of the archetype accuracy table under
    /// the current verifier distribution.
    fn verifier_expectations(&self) -> (f64, f64) {
        let probs = self.policy.archetype_probs();
        let tpr = probs
            .iter()
            .zip(&self.cfg.archetype_tpr)
            .map(|(p, t)| p * t)
            .sum();
        let tnr = probs
            .iter()
            .zip(&self.cfg.archetype_tnr)
            .map(|(p, t)| p * t)
            .sum();
        (tpr, tnr)
    }

    /// Evaluates the initial policy without updating it: stage-2 style
    /// rewards over a batch from the whole pool.
    pub fn init_record(&self) -> Result<TrainRecord, SimError> {
        let step = 0;
        let judge = self.step_judge(step)?;
        let batch = self.select_batch(0, self.pool.len(), "init", step);
        let mut solver_actions = Vec::new();
        let mut solver_rewards = Vec::new();
        let mut solver_groups = Vec::new();
        let mut verifier_actions = Vec::new();
        let mut verifier_rewards = Vec::new();
        let mut verifier_groups = Vec::new();
        let mut metrics = MetricAccumulator::default();
        for (g, &qi) in batch.iter().enumerate() {
            let rollout = self.rollout(qi, step, &judge)?;
            let partition = consensus_partition(&rollout.matrix, self.cfg.tau);
            let geo = self.geo_eval(&rollout, &partition, step)?;
            let rewards = solver_reward_consensus(&rollout.matrix);
            metrics.push(&rollout, &geo, &rewards);
            solver_actions.extend_from_slice(&rollout.solution_actions);
            solver_groups.extend(std::iter::repeat(g).take(rollout.solution_actions.len()));
            solver_rewards.extend(rewards);
            if !geo.rewards.skip_verifier_update {
                verifier_actions.extend_from_slice(&rollout.strategy_actions);
                verifier_groups.extend(std::iter::repeat(g).take(rollout.strategy_actions.len()));
                verifier_rewards.extend(geo.rewards.breakdown.iter().map(|b| b.r_ver));
            }
        }
        let mut samples = self.make_samples(
            &solver_actions,
            &advantage_baseline(&solver_rewards, &solver_groups),
        )?;
        samples.extend(self.make_samples(
            &verifier_actions,
            &advantage_baseline(&verifier_rewards, &verifier_groups),
        )?);
        let eval = ppo_loss_and_grad(&self.policy, &samples, &self.ppo_cfg)?;
        let grad_norm = eval.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let (tpr, tnr) = self.verifier_expectations();
        Ok(metrics.finish(step, "init", tpr, tnr, eval.kl, eval.loss, grad_norm))
    }

    /// Anchored updates on a labeled batch: solutions first, strategies
    /// second.
    pub fn stage1_step(&mut self) -> Result<StepOutcome, SimError> {
        self.global_step += 1;
        let step = self.global_step;
        let judge = self.step_judge(step)?;
        let batch = self.select_batch(0, self.n_labeled, "stage1", step);
        let mut rollouts = Vec::with_capacity(batch.len());
        for &qi in &batch {
            rollouts.push(self.rollout(qi, step, &judge)?);
        }

        let mut metrics = MetricAccumulator::default();
        let mut solver_actions = Vec::new();
        let mut solver_rewards = Vec::new();
        let mut solver_groups = Vec::new();
        let mut verifier_actions = Vec::new();
        let mut verifier_rewards = Vec::new();
        let mut verifier_groups = Vec::new();
        for (g, rollout) in rollouts.iter().enumerate() {
            let partition = partition_from_labels(&rollout.labels);
            let geo = self.geo_eval(rollout, &partition, step)?;
            let rewards: Vec<f64> = rollout.labels.iter().map(|&l| f64::from(l)).collect();
            metrics.push(rollout, &geo, &rewards);
            solver_actions.extend_from_slice(&rollout.solution_actions);
            solver_groups.extend(std::iter::repeat(g).take(rollout.solution_actions.len()));
            solver_rewards.extend(rewards);
            // the anchored verifier reward is this partition's r_con term
            if !geo.rewards.skip_verifier_update {
                verifier_actions.extend_from_slice(&rollout.strategy_actions);
                verifier_groups.extend(std::iter::repeat(g).take(rollout.strategy_actions.len()));
                verifier_rewards.extend(geo.rewards.breakdown.iter().map(|b| b.r_con));
            }
        }

        let mut phases = Vec::new();
        let mut reports = Vec::new();
        let solver_samples = self.make_samples(
            &solver_actions,
            &advantage_baseline(&solver_rewards, &solver_groups),
        )?;
        reports.push((
            solver_samples.len(),
            ppo_update(&mut self.policy, &solver_samples, &self.ppo_cfg)?,
        ));
        phases.push(PHASE_STAGE1_SOLUTIONS);
        if !verifier_actions.is_empty() {
            let verifier_samples = self.make_samples(
                &verifier_actions,
                &advantage_baseline(&verifier_rewards, &verifier_groups),
            )?;
            reports.push((
                verifier_samples.len(),
                ppo_update(&mut self.policy, &verifier_samples, &self.ppo_cfg)?,
            ));
            phases.push(PHASE_STAGE1_STRATEGIES);
        }

        let (kl, loss, grad_norm) = combine_reports(&reports);
        let (tpr, tnr) = self.verifier_expectations();
        let record = metrics.finish(step, Stage::Stage1.as_str(), tpr, tnr, kl, loss, grad_norm);
        Ok(StepOutcome {
            record,
            phases,
            question_ids: batch.iter().map(|&qi| self.pool[qi].id().to_string()).collect(),
        })
    }

    /// Consensus plus geometric rewards on an unlabeled batch, one joint
    /// update over both roles.
    pub fn stage2_step(&mut self) -> Result<StepOutcome, SimError> {
        self.global_step += 1;
        let step = self.global_step;
        let judge = self.step_judge(step)?;
        let batch = self.select_batch(self.n_labeled, self.pool.len(), "stage2", step);
        let mut rollouts = Vec::with_capacity(batch.len());
        for &qi in &batch {
            rollouts.push(self.rollout(qi, step, &judge)?);
        }

        let mut metrics = MetricAccumulator::default();
        let mut solver_actions = Vec::new();
        let mut solver_rewards = Vec::new();
        let mut solver_groups = Vec::new();
        let mut verifier_actions = Vec::new();
        let mut verifier_rewards = Vec::new();
        let mut verifier_groups = Vec::new();
        for (g, rollout) in rollouts.iter().enumerate() {
            let partition = consensus_partition(&rollout.matrix, self.cfg.tau);
            let geo = self.geo_eval(rollout, &partition, step)?;
            let rewards = solver_reward_consensus(&rollout.matrix);
            metrics.push(rollout, &geo, &rewards);
            solver_actions.extend_from_slice(&rollout.solution_actions);
            solver_groups.extend(std::iter::repeat(g).take(rollout.solution_actions.len()));
            solver_rewards.extend(rewards);
            if !geo.rewards.skip_verifier_update {
                verifier_actions.extend_from_slice(&rollout.strategy_actions);
                verifier_groups.extend(std::iter::repeat(g).take(rollout.strategy_actions.len()));
                verifier_rewards.extend(geo.rewards.breakdown.iter().map(|b| b.r_ver));
            }
        }

        let mut samples = self.make_samples(
            &solver_actions,
            &advantage_baseline(&solver_rewards, &solver_groups),
        )?;
        samples.extend(self.make_samples(
            &verifier_actions,
            &advantage_baseline(&verifier_rewards, &verifier_groups),
        )?);
        let mut rng = SeedStream::new(self.cfg.seed)
            .str("shuffle")
            .u64(step as u64)
            .rng();
        samples.shuffle(&mut rng);
        let n = samples.len();
        let report = ppo_update(&mut self.policy, &samples, &self.ppo_cfg)?;
        let (kl, loss, grad_norm) = combine_reports(&[(n, report)]);
        let (tpr, tnr) = self.verifier_expectations();
        let record = metrics.finish(step, Stage::Stage2.as_str(), tpr, tnr, kl, loss, grad_norm);
        Ok(StepOutcome {
            record,
            phases: vec![PHASE_STAGE2_JOINT],
            question_ids: batch.iter().map(|&qi| self.pool[qi].id().to_string()).collect(),
        })
    }
}

/// Sample-count-weighted mean of update losses and KLs, and the norm of the
/// summed gradient directions (updates touch disjoint parameter blocks).
fn combine_reports(reports: &[(usize, crate::ppo::UpdateReport)]) -> (f64, f64, f64) {
    let total: usize = reports.iter().map(|(n, _)| n).sum();
    if total == 0 {
        return (0.0, 0.0, 0.0);
    }
    let kl = reports.iter().map(|(n, r)| *n as f64 * r.kl).sum::<f64>() / total as f64;
    let loss = reports.iter().map(|(n, r)| *n as f64 * r.loss).sum::<f64>() / total as f64;
    let grad_norm = reports
        .iter()
        .map(|(_, r)| r.grad_norm * r.grad_norm)
        .sum::<f64>()
        .sqrt();
    (kl, loss, grad_norm)
}

/// Accumulates per-question metrics into one record.
#[derive(Default)]
struct MetricAccumulator {
    questions: usize,
    solver_reward_sum: f64,
    solver_reward_count: usize,
    r_con_sum: f64,
    r_rel_sum: f64,
    r_div_sum: f64,
    strategy_count: usize,
    correct: usize,
    attempts: usize,
    bon_correct: usize,
    dispersion_sum: f64,
}

impl MetricAccumulator {
    fn push(&mut self, rollout: &Rollout, geo: &GeoEval, solver_rewards: &[f64]) {
        self.questions += 1;
        self.solver_reward_sum += solver_rewards.iter().sum::<f64>();
        self.solver_reward_count += solver_rewards.len();
        for b in &geo.rewards.breakdown {
            self.r_con_sum += b.r_con;
            self.r_rel_sum += b.r_rel;
            self.r_div_sum += b.r_div;
        }
        self.strategy_count += geo.rewards.breakdown.len();
        self.correct += rollout.labels.iter().filter(|&&l| l).count();
        self.attempts += rollout.labels.len();
        let best = rollout.matrix.select_best_of_n().expect("nonempty matrix");
        self.bon_correct += usize::from(rollout.labels[best]);
        self.dispersion_sum += geo.dispersion;
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        self,
        step: usize,
        stage: &str,
        verifier_tpr: f64,
        verifier_tnr: f64,
        kl: f64,
        loss: f64,
        grad_norm: f64,
    ) -> TrainRecord {
        let q = self.questions.max(1) as f64;
        TrainRecord {
            step,
            stage: stage.to_string(),
            mean_solver_reward: self.solver_reward_sum / self.solver_reward_count.max(1) as f64,
            mean_r_con: self.r_con_sum / self.strategy_count.max(1) as f64,
            mean_r_rel: self.r_rel_sum / self.strategy_count.max(1) as f64,
            mean_r_div: self.r_div_sum / self.strategy_count.max(1) as f64,
            solver_accuracy: self.correct as f64 / self.attempts.max(1) as f64,
            bon_accuracy: self.bon_correct as f64 / q,
            verifier_tpr,
            verifier_tnr,
            circular_dispersion: self.dispersion_sum / q,
            kl,
            loss,
            grad_norm,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_config() -> SimConfig {
        SimConfig {
            pool_size: 24,
            batch_questions: 6,
            n_solutions: 4,
            m_strategies: 5,
            schedule: "stage1:3,stage2:3".to_string(),
            ..SimConfig::default()
        }
    }

    #[test]
    fn schedule_parses_pairs_in_order() {
        let s = Schedule::parse("stage1:2, stage2:3,stage1:1").unwrap();
        assert_eq!(
            s.pairs,
            vec![(Stage::Stage1, 2), (Stage::Stage2, 3), (Stage::Stage1, 1)]
        );
        assert_eq!(s.steps_for(Stage::Stage1), 3);
        assert_eq!(s.total_steps(), 6);
        assert!(Schedule::parse("stage3:1").is_err());
        assert!(Schedule::parse("stage1").is_err());
        assert!(Schedule::parse("stage1:x").is_err());
    }

    #[test]
    fn pool_is_stable_and_split_by_fraction() {
        let cfg = small_config();
        let pool = question_pool(&cfg);
        let again = question_pool(&cfg);
        assert_eq!(pool.len(), 24);
        for (a, b) in pool.iter().zip(&again) {
            assert_eq!(a.id(), b.id());
            assert_eq!(a.difficulty(), b.difficulty());
            assert_eq!(a.topic(), b.topic());
        }
        let labeled = pool.iter().filter(|q| q.labeled()).count();
        assert_eq!(labeled, cfg.n_labeled());
        assert!(pool[..labeled].iter().all(|q| q.labeled()));
        assert!(pool[labeled..].iter().all(|q| !q.labeled()));
        for q in &pool {
            let d = q.difficulty().unwrap();
            assert!((0.05..=0.995).contains(&d));
        }
    }

    #[test]
    fn default_config_validates() {
        SimConfig::default().validate().unwrap();
    }

    #[test]
    fn validation_catches_table_mismatch_and_bad_schedule() {
        let mut cfg = SimConfig::default();
        cfg.archetype_tnr.pop();
        assert!(matches!(cfg.validate(), Err(SimError::Config(_))));

        let cfg = SimConfig {
            schedule: "stage1:zap".to_string(),
            ..SimConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(SimError::Schedule(_))));

        let cfg = SimConfig {
            labeled_fraction: 0.0,
            ..SimConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(SimError::Config(_))));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = SimConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: SimConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        let sparse: SimConfig = toml::from_str("seed = 11\nlr = 0.25\n").unwrap();
        assert_eq!(sparse.seed, 11);
        assert_eq!(sparse.lr, 0.25);
        assert_eq!(sparse.pool_size, SimConfig::default().pool_size);
        assert!(toml::from_str::<SimConfig>("seeed = 11\n").is_err());
    }

    #[test]
    fn zero_step_schedule_yields_only_init_row() {
        let cfg = SimConfig {
            schedule: "stage1:0".to_string(),
            ..small_config()
        };
        let outcome = run_training(&cfg).unwrap();
        assert_eq!(outcome.records.len(), 1);
        assert_eq!(outcome.records[0].step, 0);
        assert_eq!(outcome.records[0].stage, "init");
        assert_eq!(outcome.policy, outcome.reference);
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = small_config();
        let a = run_training(&cfg).unwrap();
        let b = run_training(&cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.policy, b.policy);
    }

    #[test]
    fn records_use_global_step_indices_and_stage_tags() {
        let cfg = small_config();
        let outcome = run_training(&cfg).unwrap();
        assert_eq!(outcome.records.len(), 7);
        for (i, r) in outcome.records.iter().enumerate() {
            assert_eq!(r.step, i);
        }
        assert_eq!(outcome.records[0].stage, "init");
        assert!(outcome.records[1..=3].iter().all(|r| r.stage == "stage1"));
        assert!(outcome.records[4..=6].iter().all(|r| r.stage == "stage2"));
    }

    #[test]
    fn all_record_fields_are_finite() {
        let outcome = run_training(&small_config()).unwrap();
        for r in &outcome.records {
            for (name, v) in [
                ("mean_solver_reward", r.mean_solver_reward),
                ("mean_r_con", r.mean_r_con),
                ("mean_r_rel", r.mean_r_rel),
                ("mean_r_div", r.mean_r_div),
                ("solver_accuracy", r.solver_accuracy),
                ("bon_accuracy", r.bon_accuracy),
                ("verifier_tpr", r.verifier_tpr),
                ("verifier_tnr", r.verifier_tnr),
                ("circular_dispersion", r.circular_dispersion),
                ("kl", r.kl),
                ("loss", r.loss),
                ("grad_norm", r.grad_norm),
            ] {
                assert!(v.is_finite(), "step {} {name} = {v}", r.step);
            }
        }
    }

    #[test]
    fn stage_steps_report_their_update_phases() {
        let mut trainer = Trainer::new(small_config()).unwrap();
        let s1 = trainer.stage1_step().unwrap();
        assert_eq!(
            s1.phases,
            vec![PHASE_STAGE1_SOLUTIONS, PHASE_STAGE1_STRATEGIES]
        );
        let s2 = trainer.stage2_step().unwrap();
        assert_eq!(s2.phases, vec![PHASE_STAGE2_JOINT]);
        assert_eq!(s1.record.step, 1);
        assert_eq!(s2.record.step, 2);
    }

    #[test]
    fn stage_batches_respect_the_label_split() {
        let mut trainer = Trainer::new(small_config()).unwrap();
        let n_labeled = trainer.config().n_labeled();
        let s1 = trainer.stage1_step().unwrap();
        for id in &s1.question_ids {
            let idx: usize = id.strip_prefix('p').unwrap().parse().unwrap();
            assert!(idx < n_labeled, "stage1 drew unlabeled question {id}");
        }
        let s2 = trainer.stage2_step().unwrap();
        for id in &s2.question_ids {
            let idx: usize = id.strip_prefix('p').unwrap().parse().unwrap();
            assert!(idx >= n_labeled, "stage2 drew labeled question {id}");
        }
    }

    #[test]
    fn saturated_skill_solves_everything() {
        let cfg = SimConfig {
            init_skill: 30.0,
            ..small_config()
        };
        let trainer = Trainer::new(cfg).unwrap();
        let record = trainer.init_record().unwrap();
        assert_eq!(record.solver_accuracy, 1.0);
        assert_eq!(record.bon_accuracy, 1.0);
    }

    #[test]
    fn zero_threshold_empties_the_untrusted_set() {
        // tau = 0 puts every solution in the trusted set, so the anchored
        // term of the geometric reward vanishes
        let cfg = SimConfig {
            tau: 0.0,
            schedule: "stage2:1".to_string(),
            ..small_config()
        };
        let mut trainer = Trainer::new(cfg).unwrap();
        let outcome = trainer.stage2_step().unwrap();
        assert_eq!(outcome.record.mean_r_con, 0.0);
        assert!(outcome.record.mean_r_rel > 0.0);
    }

    #[test]
    fn zero_lr_leaves_policy_at_reference() {
        let cfg = SimConfig {
            lr: 0.0,
            ..small_config()
        };
        let outcome = run_training(&cfg).unwrap();
        assert_eq!(outcome.policy, outcome.reference);
        for r in &outcome.records {
            assert_eq!(r.kl, 0.0, "no drift without updates");
        }
    }

    #[test]
    fn naive_weights_reduce_reward_to_consistency() {
        let cfg = SimConfig {
            beta: 0.0,
            gamma: 0.0,
            ..small_config()
        };
        let trainer = Trainer::new(cfg).unwrap();
        let judge = trainer.step_judge(1).unwrap();
        let rollout = trainer.rollout(trainer.config().n_labeled(), 1, &judge).unwrap();
        let partition = consensus_partition(&rollout.matrix, trainer.config().tau);
        let geo = trainer.geo_eval(&rollout, &partition, 1).unwrap();
        for b in &geo.rewards.breakdown {
            assert_relative_eq!(b.r_ver, b.r_con);
        }
    }

    #[test]
    fn expected_verifier_rates_follow_the_policy_mix() {
        let cfg = small_config();
        let mut trainer = Trainer::new(cfg.clone()).unwrap();
        // uniform mix at init
        let (tpr, tnr) = trainer.verifier_expectations();
        let a = cfg.archetype_tpr.len() as f64;
        assert_relative_eq!(tpr, cfg.archetype_tpr.iter().sum::<f64>() / a);
        assert_relative_eq!(tnr, cfg.archetype_tnr.iter().sum::<f64>() / a);
        // concentrated on archetype 0
        trainer.policy.logits = vec![0.0; cfg.archetype_tpr.len()];
        trainer.policy.logits[0] = 50.0;
        let (tpr, tnr) = trainer.verifier_expectations();
        assert_relative_eq!(tpr, cfg.archetype_tpr[0], max_relative = 1e-9);
        assert_relative_eq!(tnr, cfg.archetype_tnr[0], max_relative = 1e-9);
    }

    #[test]
    fn oracle_judge_makes_bon_at_least_mean_accuracy() {
        let n_arch = SimConfig::default().archetype_tpr.len();
        let cfg = SimConfig {
            archetype_tpr: vec![1.0; n_arch],
            archetype_tnr: vec![1.0; n_arch],
            schedule: "stage1:2,stage2:2".to_string(),
            ..small_config()
        };
        let outcome = run_training(&cfg).unwrap();
        for r in &outcome.records {
            assert!(
                r.bon_accuracy >= r.solver_accuracy - 1e-12,
                "step {}: bon {} < mean {}",
                r.step,
                r.bon_accuracy,
                r.solver_accuracy
            );
        }
    }
}
