//! On-disk formats: JSONL verdict, label, and embedding records, reward
//! reports, the training-log CSV, and run manifests.
//!
//! Writers are deterministic (stable ordering, shortest-roundtrip floats)
//! and atomic (temp file then rename) so a rerun with the same inputs is
//! byte-identical. Parsers report 1-based line numbers on failure.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::core::EvalMatrix;
use crate::rewards::GeometricRewards;
use crate::trainer::TrainRecord;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Inconsistent(String),
}

impl IoError {
    fn parse(line: usize, msg: impl Into<String>) -> Self {
        IoError::Parse {
            line,
            msg: msg.into(),
        }
    }
}

/// Question ids appear as strings or bare numbers in the wild; both map to
/// the string form.
fn id_from_value(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn de_id<'de, D: Deserializer<'de>>(de: D) -> Result<String, D::Error> {
    let v = serde_json::Value::deserialize(de)?;
    id_from_value(&v).ok_or_else(|| serde::de::Error::custom("q must be a string or number"))
}

fn de_opt_id<'de, D: Deserializer<'de>>(de: D) -> Result<Option<String>, D::Error> {
    let v = Option::<serde_json::Value>::deserialize(de)?;
    match v {
        None | Some(serde_json::Value::Null) => Ok(None),
        Some(v) => id_from_value(&v)
            .map(Some)
            .ok_or_else(|| serde::de::Error::custom("q must be a string or number")),
    }
}

/// One judged (solution, strategy) cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictRecord {
    #[serde(deserialize_with = "de_id")]
    pub q: String,
    pub i: usize,
    pub j: usize,
    pub pass: u8,
}

/// Ground-truth label for one solution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    #[serde(deserialize_with = "de_id")]
    pub q: String,
    pub i: usize,
    pub label: u8,
}

/// Strategy embedding vector; `q` ties a row to its question when batches
/// for several questions share a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingRecord {
    #[serde(
        default,
        deserialize_with = "de_opt_id",
        skip_serializing_if = "Option::is_none"
    )]
    pub q: Option<String>,
    pub j: usize,
    pub z: Vec<f64>,
}

fn parse_jsonl<T, F>(text: &str, validate: F) -> Result<Vec<T>, IoError>
where
    T: DeserializeOwned,
    F: Fn(&T) -> Result<(), String>,
{
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        let record: T =
            serde_json::from_str(trimmed).map_err(|e| IoError::parse(line, e.to_string()))?;
        validate(&record).map_err(|msg| IoError::parse(line, msg))?;
        out.push(record);
    }
    Ok(out)
}

pub fn parse_verdicts(text: &str) -> Result<Vec<VerdictRecord>, IoError> {
    parse_jsonl(text, |r: &VerdictRecord| {
        if r.pass > 1 {
            return Err(format!("pass must be 0 or 1, got {}", r.pass));
        }
        Ok(())
    })
}

pub fn parse_labels(text: &str) -> Result<Vec<LabelRecord>, IoError> {
    parse_jsonl(text, |r: &LabelRecord| {
        if r.label > 1 {
            return Err(format!("label must be 0 or 1, got {}", r.label));
        }
        Ok(())
    })
}

pub fn parse_embeddings(text: &str) -> Result<Vec<EmbeddingRecord>, IoError> {
    parse_jsonl(text, |r: &EmbeddingRecord| {
        if r.z.is_empty() {
            return Err("embedding vector is empty".to_string());
        }
        if let Some(bad) = r.z.iter().find(|v| !v.is_finite()) {
            return Err(format!("non-finite embedding component {bad}"));
        }
        Ok(())
    })
}

fn read_to_string(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_verdicts(path: &Path) -> Result<Vec<VerdictRecord>, IoError> {
    parse_verdicts(&read_to_string(path)?)
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRecord>, IoError> {
    parse_labels(&read_to_string(path)?)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>, IoError> {
    parse_embeddings(&read_to_string(path)?)
}

/// All verdicts for one question, assembled into a dense matrix.
#[derive(Debug, Clone)]
pub struct QuestionVerdicts {
    pub q: String,
    pub matrix: EvalMatrix,
}

/// Groups verdicts by question id (first-appearance order) and builds one
/// complete matrix per question. Matrix shape comes from the largest seen
/// indices; a hole or duplicate is a consistency error.
pub fn group_verdicts(records: &[VerdictRecord]) -> Result<Vec<QuestionVerdicts>, IoError> {
    let mut order = Vec::new();
    let mut by_question: HashMap<&str, Vec<(usize, usize, u8)>> = HashMap::new();
    for r in records {
        let entry = by_question.entry(&r.q).or_insert_with(|| {
            order.push(r.q.clone());
            Vec::new()
        });
        entry.push((r.i, r.j, r.pass));
    }
    let mut out = Vec::with_capacity(order.len());
    for q in order {
        let cells = &by_question[q.as_str()];
        let max_i = cells.iter().map(|&(i, _, _)| i).max().unwrap();
        let max_j = cells.iter().map(|&(_, j, _)| j).max().unwrap();
        // size the matrix before allocating; a sparse huge index would
        // otherwise ask for max_i * max_j cells
        let shape = max_i
            .checked_add(1)
            .zip(max_j.checked_add(1))
            .and_then(|(n, m)| n.checked_mul(m).map(|total| (n, m, total)));
        let (n, m) = match shape {
            Some((n, m, total)) if total == cells.len() => (n, m),
            _ => {
                return Err(IoError::Inconsistent(format!(
                    "question {q}: {} verdicts cannot fill a {} x {} matrix",
                    cells.len(),
                    max_i as u128 + 1,
                    max_j as u128 + 1
                )))
            }
        };
        let matrix = EvalMatrix::build(n, m, cells)
            .map_err(|e| IoError::Inconsistent(format!("question {q}: {e}")))?;
        out.push(QuestionVerdicts { q, matrix });
    }
    Ok(out)
}

/// Groups labels by question id into dense per-solution vectors; every
/// index 0..n must appear exactly once.
pub fn group_labels(records: &[LabelRecord]) -> Result<HashMap<String, Vec<bool>>, IoError> {
    let mut by_question: HashMap<String, Vec<(usize, u8)>> = HashMap::new();
    for r in records {
        by_question
            .entry(r.q.clone())
            .or_default()
            .push((r.i, r.label));
    }
    let mut out = HashMap::new();
    for (q, mut cells) in by_question {
        cells.sort_unstable();
        let mut labels = Vec::with_capacity(cells.len());
        for (slot, &(i, label)) in cells.iter().enumerate() {
            if i != slot {
                let what = if i < slot { "duplicate" } else { "missing" };
                return Err(IoError::Inconsistent(format!(
                    "question {q}: {what} label index {}",
                    slot.min(i)
                )));
            }
            labels.push(label == 1);
        }
        out.insert(q, labels);
    }
    Ok(out)
}

/// Reward earned by one solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolutionRewardRecord {
    #[serde(deserialize_with = "de_id")]
    pub q: String,
    pub i: usize,
    pub r_sol: f64,
}

/// Reward breakdown earned by one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyRewardRecord {
    #[serde(deserialize_with = "de_id")]
    pub q: String,
    pub j: usize,
    pub r_con: f64,
    pub r_rel: f64,
    pub r_div: f64,
    pub r_ver: f64,
}

/// Serializes a reward report: per-solution records then per-strategy
/// records, in index order.
pub fn reward_report(
    solutions: &[SolutionRewardRecord],
    strategies: &[StrategyRewardRecord],
) -> String {
    let mut out = String::new();
    for r in solutions {
        out.push_str(&serde_json::to_string(r).expect("reward record serializes"));
        out.push('\n');
    }
    for r in strategies {
        out.push_str(&serde_json::to_string(r).expect("reward record serializes"));
        out.push('\n');
    }
    out
}

/// Plot-ready polar table for one question's strategies.
pub fn polar_csv(geo: &GeometricRewards) -> String {
    let mut out = String::from("j,cluster,x,y,theta,d\n");
    for j in 0..geo.breakdown.len() {
        let [x, y] = geo.projection.coords[j];
        let _ = writeln!(
            out,
            "{j},{},{x},{y},{},{}",
            geo.clustering.assignment[j], geo.projection.angles[j], geo.clustering.distances[j]
        );
    }
    out
}

pub const TRAINLOG_HEADER: &str = "step,stage,mean_solver_reward,mean_r_con,mean_r_rel,mean_r_div,solver_accuracy,bon_accuracy,verifier_tpr,verifier_tnr,circular_dispersion,kl,loss,grad_norm";

pub fn trainlog_csv(records: &[TrainRecord]) -> String {
    let mut out = String::from(TRAINLOG_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.stage,
            r.mean_solver_reward,
            r.mean_r_con,
            r.mean_r_rel,
            r.mean_r_div,
            r.solver_accuracy,
            r.bon_accuracy,
            r.verifier_tpr,
            r.verifier_tnr,
            r.circular_dispersion,
            r.kl,
            r.loss,
            r.grad_norm
        );
    }
    out
}

fn field<T: FromStr>(raw: &str, line: usize, name: &str) -> Result<T, IoError> {
    raw.parse()
        .map_err(|_| IoError::parse(line, format!("bad {name} value {raw:?}")))
}

pub fn parse_trainlog(text: &str) -> Result<Vec<TrainRecord>, IoError> {
    let mut lines = text.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, raw)) if raw.trim().is_empty() => continue,
            Some((_, raw)) => break raw.trim_end_matches('\r'),
            None => return Err(IoError::Inconsistent("empty training log".to_string())),
        }
    };
    if header != TRAINLOG_HEADER {
        return Err(IoError::Inconsistent(format!(
            "training log header mismatch: got {header:?}"
        )));
    }
    let mut out = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let trimmed = raw.trim_end_matches('\r');
        if trimmed.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = trimmed.split(',').collect();
        if parts.len() != 14 {
            return Err(IoError::parse(
                line,
                format!("expected 14 fields, got {}", parts.len()),
            ));
        }
        out.push(TrainRecord {
            step: field(parts[0], line, "step")?,
            stage: parts[1].to_string(),
            mean_solver_reward: field(parts[2], line, "mean_solver_reward")?,
            mean_r_con: field(parts[3], line, "mean_r_con")?,
            mean_r_rel: field(parts[4], line, "mean_r_rel")?,
            mean_r_div: field(parts[5], line, "mean_r_div")?,
            solver_accuracy: field(parts[6], line, "solver_accuracy")?,
            bon_accuracy: field(parts[7], line, "bon_accuracy")?,
            verifier_tpr: field(parts[8], line, "verifier_tpr")?,
            verifier_tnr: field(parts[9], line, "verifier_tnr")?,
            circular_dispersion: field(parts[10], line, "circular_dispersion")?,
            kl: field(parts[11], line, "kl")?,
            loss: field(parts[12], line, "loss")?,
            grad_norm: field(parts[13], line, "grad_norm")?,
        });
    }
    Ok(out)
}

pub fn read_trainlog(path: &Path) -> Result<Vec<TrainRecord>, IoError> {
    parse_trainlog(&read_to_string(path)?)
}

/// Everything needed to rerun a command and get the same bytes back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub config: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            config,
        }
    }
}

pub fn manifest_json(manifest: &RunManifest) -> String {
    let mut out = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    out.push('\n');
    out
}

pub fn parse_manifest(text: &str) -> Result<RunManifest, IoError> {
    serde_json::from_str(text).map_err(|e| IoError::parse(e.line(), e.to_string()))
}

/// Trained parameters plus what is needed to rebuild the policy object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub skills: Vec<f64>,
    pub logits: Vec<f64>,
    pub temperature: f64,
}

impl From<&crate::policy::CoPolicy> for PolicySnapshot {
    fn from(p: &crate::policy::CoPolicy) -> Self {
        Self {
            skills: p.skills.clone(),
            logits: p.logits.clone(),
            temperature: p.temperature,
        }
    }
}

impl From<PolicySnapshot> for crate::policy::CoPolicy {
    fn from(s: PolicySnapshot) -> Self {
        Self {
            skills: s.skills,
            logits: s.logits,
            temperature: s.temperature,
        }
    }
}

/// Writes via a sibling temp file and rename so readers never observe a
/// partial file and a crashed run leaves the old contents intact.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), IoError> {
    let file_err = |source: std::io::Error| IoError::File {
        path: path.display().to_string(),
        source,
    };
    let mut name = path
        .file_name()
        .ok_or_else(|| file_err(std::io::Error::other("path has no file name")))?
        .to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    fs::write(&tmp, contents).map_err(file_err)?;
    fs::rename(&tmp, path).map_err(file_err)
}
