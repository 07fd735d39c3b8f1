//! Judge backends: who decides whether a strategy accepts a solution.
//!
//! The synthetic judge draws seeded Bernoulli verdicts from per-archetype
//! accuracy profiles. The replay judge serves verdicts recorded earlier.
//! The remote judge renders prompt templates and asks an external endpoint,
//! expecting a bare True/False answer.

use crate::core::{CoreError, EvalMatrix, Question, QuestionPayload, Solution, Strategy, StrategyContent};
use crate::seeding::SeedStream;
use rand::Rng;
use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("{field} {value} outside [0, 1]")]
    InvalidProfile { field: &'static str, value: f64 },
    #[error("no recorded verdict for question {question}, solution {i}, strategy {j}")]
    MissingVerdict { question: String, i: usize, j: usize },
    #[error("duplicate recorded verdict for question {question}, solution {i}, strategy {j}")]
    DuplicateReplay { question: String, i: usize, j: usize },
    #[error("question {question} carries no reference answer to grade against")]
    NotLabeled { question: String },
    #[error("strategy {strategy} has no archetype; synthetic judging needs one")]
    UnresolvedArchetype { strategy: String },
    #[error("archetype {archetype} outside profile table of size {count}")]
    ArchetypeOutOfRange { archetype: usize, count: usize },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed judge response after {attempts} attempts: {last:?}")]
    Protocol { attempts: u32, last: String },
    #[error(transparent)]
    Matrix(#[from] CoreError),
}

/// Accuracy profile of a judging pathway: probability of accepting a
/// correct solution and of rejecting an incorrect one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JudgeProfile {
    pub tpr: f64,
    pub tnr: f64,
}

impl JudgeProfile {
    pub fn new(tpr: f64, tnr: f64) -> Result<Self, JudgeError> {
        if !(0.0..=1.0).contains(&tpr) {
            return Err(JudgeError::InvalidProfile { field: "tpr", value: tpr });
        }
        if !(0.0..=1.0).contains(&tnr) {
            return Err(JudgeError::InvalidProfile { field: "tnr", value: tnr });
        }
        Ok(Self { tpr, tnr })
    }

    /// Always right: accepts exactly the correct solutions.
    pub fn oracle() -> Self {
        Self { tpr: 1.0, tnr: 1.0 }
    }
}

/// Recorded reference answer for a question.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub question_id: String,
    pub answer: String,
}

/// Exact-match grading against a known reference.
pub fn ground_truth_grade(solution: &Solution, truth: &GroundTruth) -> u8 {
    u8::from(solution.content == truth.answer)
}

/// Grades a solution against the question's own reference answer.
pub fn grade_against_question(question: &Question, solution: &Solution) -> Result<u8, JudgeError> {
    let reference = question
        .reference_answer()
        .ok_or_else(|| JudgeError::NotLabeled {
            question: question.id().to_string(),
        })?;
    Ok(u8::from(solution.content == reference))
}

pub trait Judge {
    fn judge_pair(
        &self,
        question: &Question,
        solution: &Solution,
        strategy: &Strategy,
    ) -> Result<u8, JudgeError>;

    /// Judges every (solution, strategy) pair into a matrix.
    fn judge_matrix(
        &self,
        question: &Question,
        solutions: &[Solution],
        strategies: &[Strategy],
    ) -> Result<EvalMatrix, JudgeError> {
        let mut verdicts = Vec::with_capacity(solutions.len() * strategies.len());
        for s in solutions {
            for v in strategies {
                verdicts.push((s.index, v.index, self.judge_pair(question, s, v)?));
            }
        }
        Ok(EvalMatrix::build(
            solutions.len(),
            strategies.len(),
            &verdicts,
        )?)
    }
}

/// Seeded stochastic judge; verdicts depend only on (question id, solution
/// index, strategy index, seed), never on call order.
pub struct SyntheticJudge {
    profiles: Vec<JudgeProfile>,
    seed: u64,
}

impl SyntheticJudge {
    pub fn new(profiles: Vec<JudgeProfile>, seed: u64) -> Self {
        Self { profiles, seed }
    }

    pub fn profiles(&self) -> &[JudgeProfile] {
        &self.profiles
    }
}

impl Judge for SyntheticJudge {
    fn judge_pair(
        &self,
        question: &Question,
        solution: &Solution,
        strategy: &Strategy,
    ) -> Result<u8, JudgeError> {
        let correct = grade_against_question(question, solution)? == 1;
        let archetype = match strategy.content {
            StrategyContent::Synthetic { archetype, .. } => archetype,
            StrategyContent::Text { .. } => {
                return Err(JudgeError::UnresolvedArchetype {
                    strategy: strategy.id.clone(),
                })
            }
        };
        let profile = self
            .profiles
            .get(archetype)
            .ok_or(JudgeError::ArchetypeOutOfRange {
                archetype,
                count: self.profiles.len(),
            })?;
        let p = if correct { profile.tpr } else { 1.0 - profile.tnr };
        let mut rng = SeedStream::new(self.seed)
            .str("judge")
            .str(question.id())
            .u64(solution.index as u64)
            .u64(strategy.index as u64)
            .rng();
        Ok(u8::from(rng.gen::<f64>() < p))
    }
}

/// Replays verdicts recorded in an earlier run.
#[derive(Debug, Default)]
pub struct ReplayJudge {
    verdicts: HashMap<(String, usize, usize), u8>,
}

impl ReplayJudge {
    pub fn from_verdicts(
        records: impl IntoIterator<Item = (String, usize, usize, u8)>,
    ) -> Result<Self, JudgeError> {
        let mut verdicts = HashMap::new();
        for (q, i, j, bit) in records {
            if verdicts.insert((q.clone(), i, j), bit).is_some() {
                return Err(JudgeError::DuplicateReplay { question: q, i, j });
            }
        }
        Ok(Self { verdicts })
    }

    pub fn len(&self) -> usize {
        self.verdicts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.verdicts.is_empty()
    }
}

impl Judge for ReplayJudge {
    fn judge_pair(
        &self,
        question: &Question,
        solution: &Solution,
        strategy: &Strategy,
    ) -> Result<u8, JudgeError> {
        self.verdicts
            .get(&(question.id().to_string(), solution.index, strategy.index))
            .copied()
            .ok_or_else(|| JudgeError::MissingVerdict {
                question: question.id().to_string(),
                i: solution.index,
                j: strategy.index,
            })
    }
}

pub const SOLVER_PROMPT_TEMPLATE: &str = include_str!("../prompts/solver.txt");
pub const VERIFIER_PROMPT_TEMPLATE: &str = include_str!("../prompts/verifier.txt");
pub const GROUND_TRUTH_TEMPLATE: &str = include_str!("../prompts/ground_truth_test.txt");
pub const JUDGING_MODEL_TEMPLATE: &str = include_str!("../prompts/judging_model.txt");

/// Fills `{{name}}` slots in a template.
pub fn render_template(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in vars {
        out = out.replace(&format!("{{{{{name}}}}}"), value);
    }
    out
}

/// Transport used by the remote judge; returns the endpoint's raw reply.
pub trait JudgeTransport: Send + Sync {
    fn send(&self, prompt: &str) -> Result<String, JudgeError>;
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub auth_token: Option<String>,
    /// Upper bound on concurrently outstanding requests.
    pub max_in_flight: usize,
    /// Minimum spacing between request starts.
    pub min_request_interval: Duration,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            auth_token: None,
            max_in_flight: 4,
            min_request_interval: Duration::ZERO,
        }
    }
}

/// Judge that defers to an external model endpoint. Malformed or failed
/// replies are retried once; a second failure counts as a rejection and is
/// logged rather than aborting the batch.
pub struct RemoteJudge<T: JudgeTransport> {
    config: RemoteConfig,
    transport: T,
    last_request: Mutex<Option<Instant>>,
}

impl RemoteJudge<HttpTransport> {
    /// Judge speaking plain HTTP to `config.endpoint`.
    pub fn over_http(config: RemoteConfig) -> Self {
        let transport = HttpTransport::new(config.endpoint.clone(), config.auth_token.clone());
        Self::new(config, transport)
    }
}

impl<T: JudgeTransport> RemoteJudge<T> {
    pub fn new(config: RemoteConfig, transport: T) -> Self {
        Self {
            config,
            transport,
            last_request: Mutex::new(None),
        }
    }

    fn pace(&self) {
        let interval = self.config.min_request_interval;
        if interval.is_zero() {
            return;
        }
        let wait = {
            let mut last = self.last_request.lock().unwrap();
            let now = Instant::now();
            let wait = match *last {
                Some(prev) => interval.checked_sub(now.duration_since(prev)),
                None => None,
            };
            *last = Some(now + wait.unwrap_or_default());
            wait
        };
        if let Some(w) = wait {
            std::thread::sleep(w);
        }
    }

    fn parse_verdict(reply: &str) -> Option<u8> {
        parse_judge_reply(reply)
    }

    /// One prompt round trip under the retry policy.
    fn ask(&self, prompt: &str) -> u8 {
        let mut last = String::new();
        for _attempt in 0..2 {
            self.pace();
            match self.transport.send(prompt) {
                Ok(reply) => {
                    if let Some(bit) = Self::parse_verdict(&reply) {
                        return bit;
                    }
                    last = reply;
                }
                Err(e) => last = e.to_string(),
            }
        }
        log::warn!("remote judge reply unusable after retry, scoring 0: {last:?}");
        0
    }

    fn problem_text(question: &Question) -> &str {
        match question.payload() {
            QuestionPayload::Text { text, .. } => text,
            QuestionPayload::Synthetic { .. } => question.id(),
        }
    }

    fn strategy_fields(strategy: &Strategy) -> (String, String) {
        match &strategy.content {
            StrategyContent::Text {
                strategy_type,
                details,
            } => (strategy_type.clone(), details.clone()),
            StrategyContent::Synthetic { archetype, .. } => (
                format!("archetype_{archetype}"),
                format!("latent verification archetype {archetype}"),
            ),
        }
    }

    /// Grades a solution against a reference via the endpoint.
    pub fn grade_ground_truth(&self, problem: &str, reference: &str, solution: &str) -> u8 {
        let prompt = render_template(
            GROUND_TRUTH_TEMPLATE,
            &[
                ("problem", problem),
                ("reference_solution", reference),
                ("solution", solution),
            ],
        );
        self.ask(&prompt)
    }
}

impl<T: JudgeTransport> Judge for RemoteJudge<T> {
    fn judge_pair(
        &self,
        question: &Question,
        solution: &Solution,
        strategy: &Strategy,
    ) -> Result<u8, JudgeError> {
        let (strategy_type, details) = Self::strategy_fields(strategy);
        let prompt = render_template(
            JUDGING_MODEL_TEMPLATE,
            &[
                ("problem", Self::problem_text(question)),
                ("solution", &solution.content),
                ("strategy_type", &strategy_type),
                ("strategy_details", &details),
            ],
        );
        Ok(self.ask(&prompt))
    }

    fn judge_matrix(
        &self,
        question: &Question,
        solutions: &[Solution],
        strategies: &[Strategy],
    ) -> Result<EvalMatrix, JudgeError> {
        let n = solutions.len();
        let m = strategies.len();
        let workers = self.config.max_in_flight.max(1).min(n * m);
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<u8>>> = (0..n * m).map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let idx = next.fetch_add(1, Ordering::Relaxed);
                    if idx >= n * m {
                        break;
                    }
                    let (i, j) = (idx / m, idx % m);
                    let bit = self
                        .judge_pair(question, &solutions[i], &strategies[j])
                        .unwrap_or(0);
                    *slots[idx].lock().unwrap() = Some(bit);
                });
            }
        });
        let mut verdicts = Vec::with_capacity(n * m);
        for (idx, slot) in slots.iter().enumerate() {
            let bit = slot.lock().unwrap().unwrap_or(0);
            verdicts.push((idx / m, idx % m, bit));
        }
        Ok(EvalMatrix::build(n, m, &verdicts)?)
    }
}

/// HTTP transport posting `{"prompt": ...}` and returning the response body.
pub struct HttpTransport {
    endpoint: String,
    auth_token: Option<String>,
}

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>, auth_token: Option<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            auth_token,
        }
    }
}

impl JudgeTransport for HttpTransport {
    fn send(&self, prompt: &str) -> Result<String, JudgeError> {
        let body = serde_json::json!({ "prompt": prompt }).to_string();
        let mut request = ureq::post(&self.endpoint).content_type("application/json");
        if let Some(token) = &self.auth_token {
            request = request.header("Authorization", format!("Bearer {token}"));
        }
        let mut response = request
            .send(body)
            .map_err(|e| JudgeError::Transport(e.to_string()))?;
        response
            .body_mut()
            .read_to_string()
            .map_err(|e| JudgeError::Transport(e.to_string()))
    }
}

/// Strict wire contract: the reply must be exactly the token `True` or
/// `False`, modulo surrounding whitespace.
pub fn parse_judge_reply(reply: &str) -> Option<u8> {
    match reply.trim() {
        "True" => Some(1),
        "False" => Some(0),
        _ => None,
    }
}
