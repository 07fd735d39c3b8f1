//! Command line front door for the co-evolution pipeline: reward
//! computation over recorded verdicts and embeddings, training simulation,
//! and analysis export. Every command writes a run manifest before any
//! output so a run can be reproduced from its artifacts alone.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use coevo::geometry::{GeometryError, PcaScope};
use coevo::io::{
    self, IoError, QuestionVerdicts, RunManifest, SolutionRewardRecord, StrategyRewardRecord,
};
use coevo::rewards::{self, RewardConfig, RewardError};
use coevo::trainer::{run_training, Schedule, SimConfig, SimError, TrainRecord};

const EXIT_INPUT: u8 = 2;
const EXIT_CONSISTENCY: u8 = 3;
const EXIT_DEGENERATE: u8 = 4;

/// An error plus the process exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl Failure {
    fn input(err: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_INPUT,
            err: err.into(),
        }
    }

    fn consistency(err: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_CONSISTENCY,
            err: err.into(),
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        let code = match &e {
            IoError::Inconsistent(_) => EXIT_CONSISTENCY,
            _ => EXIT_INPUT,
        };
        Self {
            code,
            err: e.into(),
        }
    }
}

impl From<RewardError> for Failure {
    fn from(e: RewardError) -> Self {
        let code = match &e {
            RewardError::InvalidConfig(_) => EXIT_INPUT,
            RewardError::Geometry(g) => geometry_code(g),
            _ => EXIT_CONSISTENCY,
        };
        Self {
            code,
            err: e.into(),
        }
    }
}

fn geometry_code(e: &GeometryError) -> u8 {
    match e {
        GeometryError::DegenerateClustering { .. } => EXIT_DEGENERATE,
        GeometryError::InvalidK => EXIT_INPUT,
        _ => EXIT_CONSISTENCY,
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Reward(r) => r.into(),
            other => Self {
                code: EXIT_INPUT,
                err: other.into(),
            },
        }
    }
}

#[derive(Parser)]
#[command(
    name = "coevo",
    version,
    about = "Reward computation and co-evolution training over recorded judge verdicts"
)]
struct Cli {
    /// Worker threads for per-question reward computation.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Anchored rewards from a verdict matrix and ground-truth labels.
    RewardStage1(RewardStage1Args),
    /// Consensus plus geometric rewards from verdicts and strategy embeddings.
    RewardStage2(RewardStage2Args),
    /// Run the synthetic solver/verifier training loop.
    Simulate(SimulateArgs),
    /// Summarize training logs into one table row per run.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct RewardStage1Args {
    /// Verdict JSONL, one record per judged (solution, strategy) cell.
    matrix: PathBuf,
    /// Label JSONL, one record per solution.
    labels: PathBuf,
    /// Reward report JSONL to write.
    out: PathBuf,
}

#[derive(Args)]
struct RewardStage2Args {
    /// Verdict JSONL, one record per judged (solution, strategy) cell.
    matrix: PathBuf,
    /// Embedding JSONL, one vector per strategy.
    embeddings: PathBuf,
    /// Reward report JSONL to write.
    out: PathBuf,
    /// Reward weights and clustering settings, flat TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Polar coordinate CSV to write (default: out with a .csv extension).
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Cluster count for the geometric reward.
    #[arg(long)]
    k: Option<usize>,
    /// Seed for clustering restarts.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Directory for the manifest, training log, and policy snapshot.
    out_dir: PathBuf,
    /// Simulation settings, flat TOML; omitted keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stage plan, e.g. stage1:300,stage2:300.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Cluster count for the geometric reward.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    clip_eps: Option<f64>,
    #[arg(long)]
    kl_coef: Option<f64>,
    /// Drop the geometric reward terms (sets beta and gamma to 0).
    #[arg(long)]
    ablate_naive: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Training log CSV files.
    logs: Vec<PathBuf>,
    /// Summary CSV to write (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(EXIT_INPUT);
        }
        // A failure here means a pool already exists; the default is fine.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    let result = match cli.command {
        Command::RewardStage1(args) => cmd_reward_stage1(&args),
        Command::RewardStage2(args) => cmd_reward_stage2(&args),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Analyze(args) => cmd_analyze(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn cmd_reward_stage1(args: &RewardStage1Args) -> Result<(), Failure> {
    let verdicts = io::read_verdicts(&args.matrix)?;
    let questions = io::group_verdicts(&verdicts)?;
    if questions.is_empty() {
        return Err(Failure::consistency(anyhow!("verdict file has no records")));
    }
    let label_records = io::read_labels(&args.labels)?;
    if label_records.is_empty() {
        return Err(Failure::consistency(anyhow!("label file has no records")));
    }
    let labels = io::group_labels(&label_records)?;

    let mut solutions = Vec::new();
    let mut strategies = Vec::new();
    let per_question = compute_per_question(&questions, |qv| {
        let labels = labels.get(&qv.q).ok_or_else(|| {
            Failure::consistency(anyhow!("question {}: no labels", qv.q))
        })?;
        if labels.len() != qv.matrix.n_solutions() {
            return Err(Failure::consistency(anyhow!(
                "question {}: {} labels for {} solutions",
                qv.q,
                labels.len(),
                qv.matrix.n_solutions()
            )));
        }
        let r_sol = rewards::solver_reward_anchored(labels);
        let partition = rewards::partition_from_labels(labels);
        let r_ver = rewards::verifier_reward_anchored(&qv.matrix, &partition)
            .map_err(Failure::from)?;
        Ok((r_sol, r_ver))
    })?;
    for (qv, (r_sol, r_ver)) in questions.iter().zip(per_question) {
        for (i, r) in r_sol.into_iter().enumerate() {
            solutions.push(SolutionRewardRecord {
                q: qv.q.clone(),
                i,
                r_sol: r,
            });
        }
        for (j, r) in r_ver.into_iter().enumerate() {
            // Stage 1 has no geometric shaping: the anchored agreement
            // reward is both the consistency term and the total.
            strategies.push(StrategyRewardRecord {
                q: qv.q.clone(),
                j,
                r_con: r,
                r_rel: 0.0,
                r_div: 0.0,
                r_ver: r,
            });
        }
    }

    let mut manifest = RunManifest::new("reward-stage1", serde_json::json!({}));
    manifest.inputs = vec![path_str(&args.matrix), path_str(&args.labels)];
    manifest.outputs = vec![path_str(&args.out)];
    io::write_atomic(&manifest_path(&args.out), &io::manifest_json(&manifest))?;
    io::write_atomic(&args.out, &io::reward_report(&solutions, &strategies))?;
    Ok(())
}

/// Geometric reward settings as they appear in a stage-2 config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Stage2Config {
    tau: f64,
    alpha: f64,
    beta: f64,
    gamma: f64,
    k: usize,
    epsilon: f64,
    pca_scope: PcaScope,
    seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        let r = RewardConfig::default();
        Self {
            tau: r.tau,
            alpha: r.alpha,
            beta: r.beta,
            gamma: r.gamma,
            k: r.k,
            epsilon: r.epsilon,
            pca_scope: PcaScope::default(),
            seed: 0,
        }
    }
}

impl Stage2Config {
    fn reward_config(&self) -> RewardConfig {
        RewardConfig {
            tau: self.tau,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            k: self.k,
            epsilon: self.epsilon,
        }
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Failure::input(anyhow!("{}: {e}", path.display()))
    })?;
    toml::from_str(&text).map_err(|e| Failure::input(anyhow!("{}: {e}", path.display())))
}

/// Embedding batches keyed the same way the verdicts are grouped.
fn embeddings_by_question(
    records: &[io::EmbeddingRecord],
    questions: &[QuestionVerdicts],
) -> Result<Vec<Vec<Vec<f64>>>, Failure> {
    let with_q = records.iter().filter(|r| r.q.is_some()).count();
    if with_q != 0 && with_q != records.len() {
        return Err(Failure::consistency(anyhow!(
            "embedding records mix tagged and untagged question ids"
        )));
    }
    let mut grouped: HashMap<&str, Vec<(usize, &Vec<f64>)>> = HashMap::new();
    if with_q == 0 {
        if questions.len() != 1 {
            return Err(Failure::consistency(anyhow!(
                "embeddings carry no question ids but the verdict file has {} questions",
                questions.len()
            )));
        }
        let only = questions[0].q.as_str();
        grouped.insert(only, records.iter().map(|r| (r.j, &r.z)).collect());
    } else {
        for r in records {
            grouped
                .entry(r.q.as_deref().unwrap())
                .or_default()
                .push((r.j, &r.z));
        }
    }
    let mut out = Vec::with_capacity(questions.len());
    for qv in questions {
        let mut batch = grouped.remove(qv.q.as_str()).ok_or_else(|| {
            Failure::consistency(anyhow!("question {}: no embeddings", qv.q))
        })?;
        let m = qv.matrix.n_strategies();
        if batch.len() != m {
            return Err(Failure::consistency(anyhow!(
                "question {}: {} embeddings for {} strategies",
                qv.q,
                batch.len(),
                m
            )));
        }
        batch.sort_by_key(|&(j, _)| j);
        for (slot, &(j, _)) in batch.iter().enumerate() {
            if j != slot {
                let what = if j < slot { "duplicate" } else { "missing" };
                return Err(Failure::consistency(anyhow!(
                    "question {}: {what} embedding index {}",
                    qv.q,
                    slot.min(j)
                )));
            }
        }
        out.push(batch.into_iter().map(|(_, z)| z.clone()).collect());
    }
    if let Some(q) = grouped.keys().next() {
        return Err(Failure::consistency(anyhow!(
            "embeddings for unknown question {q}"
        )));
    }
    Ok(out)
}

/// Runs `per_question` across the batch on the rayon pool, keeping input
/// order in the results.
fn compute_per_question<T: Send>(
    questions: &[QuestionVerdicts],
    per_question: impl Fn(&QuestionVerdicts) -> Result<T, Failure> + Sync + Send,
) -> Result<Vec<T>, Failure> {
    questions.par_iter().map(per_question).collect()
}

fn cmd_reward_stage2(args: &RewardStage2Args) -> Result<(), Failure> {
    let mut cfg: Stage2Config = match &args.config {
        Some(path) => read_toml(path)?,
        None => Stage2Config::default(),
    };
    if let Some(v) = args.tau {
        cfg.tau = v;
    }
    if let Some(v) = args.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = args.beta {
        cfg.beta = v;
    }
    if let Some(v) = args.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = args.k {
        cfg.k = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    let reward_cfg = cfg.reward_config();
    reward_cfg.validate().map_err(Failure::from)?;

    let verdicts = io::read_verdicts(&args.matrix)?;
    let questions = io::group_verdicts(&verdicts)?;
    if questions.is_empty() {
        return Err(Failure::consistency(anyhow!("verdict file has no records")));
    }
    let embedding_records = io::read_embeddings(&args.embeddings)?;
    let batches = embeddings_by_question(&embedding_records, &questions)?;

    let csv_path = args
        .csv
        .clone()
        .unwrap_or_else(|| args.out.with_extension("csv"));
    if csv_path == args.out {
        return Err(Failure::input(anyhow!(
            "report and csv outputs resolve to the same path {}",
            csv_path.display()
        )));
    }

    let paired: Vec<(&QuestionVerdicts, &Vec<Vec<f64>>)> =
        questions.iter().zip(batches.iter()).collect();
    let results: Vec<_> = paired
        .par_iter()
        .map(|(qv, batch)| {
            let r_sol = rewards::solver_reward_consensus(&qv.matrix);
            let partition = rewards::consensus_partition(&qv.matrix, cfg.tau);
            let geo = rewards::verifier_reward_geometric(
                &qv.matrix,
                &partition,
                batch,
                &reward_cfg,
                cfg.pca_scope,
                cfg.seed,
            )
            .map_err(Failure::from)?;
            Ok((r_sol, geo))
        })
        .collect::<Result<_, Failure>>()?;

    let mut solutions = Vec::new();
    let mut strategies = Vec::new();
    let mut csv = String::from("j,cluster,x,y,theta,d\n");
    for (qv, (r_sol, geo)) in questions.iter().zip(&results) {
        for (i, &r) in r_sol.iter().enumerate() {
            solutions.push(SolutionRewardRecord {
                q: qv.q.clone(),
                i,
                r_sol: r,
            });
        }
        for (j, b) in geo.breakdown.iter().enumerate() {
            strategies.push(StrategyRewardRecord {
                q: qv.q.clone(),
                j,
                r_con: b.r_con,
                r_rel: b.r_rel,
                r_div: b.r_div,
                r_ver: b.r_ver,
            });
        }
        // One block per question; the header appears once.
        csv.push_str(io::polar_csv(geo).trim_start_matches("j,cluster,x,y,theta,d\n"));
    }

    let mut manifest = RunManifest::new(
        "reward-stage2",
        serde_json::to_value(&cfg).expect("config serializes"),
    );
    manifest.seed = Some(cfg.seed);
    manifest.inputs = vec![path_str(&args.matrix), path_str(&args.embeddings)];
    if let Some(path) = &args.config {
        manifest.inputs.push(path_str(path));
    }
    manifest.outputs = vec![path_str(&args.out), path_str(&csv_path)];
    io::write_atomic(&manifest_path(&args.out), &io::manifest_json(&manifest))?;
    io::write_atomic(&args.out, &io::reward_report(&solutions, &strategies))?;
    io::write_atomic(&csv_path, &csv)?;
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let mut cfg: SimConfig = match &args.config {
        Some(path) => read_toml(path)?,
        None => SimConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = &args.schedule {
        cfg.schedule = v.clone();
    }
    if let Some(v) = args.tau {
        cfg.tau = v;
    }
    if let Some(v) = args.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = args.beta {
        cfg.beta = v;
    }
    if let Some(v) = args.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = args.k {
        cfg.clusters = v;
    }
    if let Some(v) = args.clip_eps {
        cfg.clip_eps = v;
    }
    if let Some(v) = args.kl_coef {
        cfg.kl_coef = v;
    }
    if args.ablate_naive {
        cfg.beta = 0.0;
        cfg.gamma = 0.0;
    }
    cfg.validate().map_err(Failure::from)?;
    Schedule::parse(&cfg.schedule).map_err(Failure::from)?;

    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| Failure::input(anyhow!("{}: {e}", args.out_dir.display())))?;
    let log_path = args.out_dir.join("trainlog.csv");
    let policy_path = args.out_dir.join("policy.json");

    let mut manifest = RunManifest::new(
        "simulate",
        serde_json::to_value(&cfg).expect("config serializes"),
    );
    manifest.seed = Some(cfg.seed);
    if let Some(path) = &args.config {
        manifest.inputs.push(path_str(path));
    }
    manifest.outputs = vec![path_str(&log_path), path_str(&policy_path)];
    io::write_atomic(&args.out_dir.join("manifest.json"), &io::manifest_json(&manifest))?;

    let started = std::time::Instant::now();
    let outcome = run_training(&cfg).map_err(Failure::from)?;
    log::info!(
        "simulated {} steps in {:.1?}",
        outcome.records.len().saturating_sub(1),
        started.elapsed()
    );

    io::write_atomic(&log_path, &io::trainlog_csv(&outcome.records))?;
    let snapshot = io::PolicySnapshot::from(&outcome.policy);
    let mut policy_json =
        serde_json::to_string_pretty(&snapshot).expect("snapshot serializes");
    policy_json.push('\n');
    io::write_atomic(&policy_path, &policy_json)?;
    Ok(())
}

fn csv_field(text: &str) -> String {
    if text.contains(',') || text.contains('"') || text.contains('\n') {
        format!("\"{}\"", text.replace('"', "\"\""))
    } else {
        text.to_string()
    }
}

const SUMMARY_HEADER: &str = "log,final_mean_r_con,final_mean_r_rel,final_mean_r_div,final_circular_dispersion,final_solver_accuracy,final_bon_accuracy";

fn summary_row(path: &Path, last: &TrainRecord) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        csv_field(&path_str(path)),
        last.mean_r_con,
        last.mean_r_rel,
        last.mean_r_div,
        last.circular_dispersion,
        last.solver_accuracy,
        last.bon_accuracy
    )
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<(), Failure> {
    if args.logs.is_empty() {
        return Err(Failure::consistency(anyhow!("no training logs given")));
    }
    let mut table = String::from(SUMMARY_HEADER);
    table.push('\n');
    for path in &args.logs {
        let records = io::read_trainlog(path)?;
        let last = records.last().ok_or_else(|| {
            Failure::consistency(anyhow!("{}: log has no records", path.display()))
        })?;
        let _ = writeln!(table, "{}", summary_row(path, last));
    }
    match &args.out {
        Some(out) => {
            let mut manifest = RunManifest::new("analyze", serde_json::json!({}));
            manifest.inputs = args.logs.iter().map(|p| path_str(p)).collect();
            manifest.outputs = vec![path_str(out)];
            io::write_atomic(&manifest_path(out), &io::manifest_json(&manifest))?;
            io::write_atomic(out, &table)?;
        }
        None => print!("{table}"),
    }
    Ok(())
}
