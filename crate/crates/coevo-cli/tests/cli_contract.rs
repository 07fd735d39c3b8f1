//! Exit codes, output formats, and flag behavior of the `coevo` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn coevo(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coevo"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn write(dir: &Path, name: &str, contents: &str) {
    fs::write(dir.join(name), contents).unwrap();
}

const WORKED_MATRIX: &str = concat!(
    "{\"q\": \"w\", \"i\": 0, \"j\": 0, \"pass\": 1}\n",
    "{\"q\": \"w\", \"i\": 1, \"j\": 0, \"pass\": 1}\n",
    "{\"q\": \"w\", \"i\": 2, \"j\": 0, \"pass\": 0}\n",
    "{\"q\": \"w\", \"i\": 3, \"j\": 0, \"pass\": 1}\n",
);

const WORKED_LABELS: &str = concat!(
    "{\"q\": \"w\", \"i\": 0, \"label\": 1}\n",
    "{\"q\": \"w\", \"i\": 1, \"label\": 1}\n",
    "{\"q\": \"w\", \"i\": 2, \"label\": 0}\n",
    "{\"q\": \"w\", \"i\": 3, \"label\": 0}\n",
);

#[test]
fn stage1_worked_example_rewards_half() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "matrix.jsonl", WORKED_MATRIX);
    write(dir.path(), "labels.jsonl", WORKED_LABELS);
    let out = coevo(
        &["reward-stage1", "matrix.jsonl", "labels.jsonl", "out.jsonl"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(dir.path().join("out.jsonl")).unwrap();
    // accepts both trusted solutions, rejects one of two untrusted: +0.5
    assert!(report.contains("{\"q\":\"w\",\"j\":0,\"r_con\":0.5,\"r_rel\":0.0,\"r_div\":0.0,\"r_ver\":0.5}"));
    assert!(report.contains("{\"q\":\"w\",\"i\":0,\"r_sol\":1.0}"));
    assert!(report.contains("{\"q\":\"w\",\"i\":2,\"r_sol\":0.0}"));

    // manifest lands next to the report and names both files
    let manifest = fs::read_to_string(dir.path().join("out.jsonl.manifest.json")).unwrap();
    assert!(manifest.contains("\"command\": \"reward-stage1\""));
    assert!(manifest.contains("matrix.jsonl"));

    // rerunning writes byte-identical output
    let before = fs::read(dir.path().join("out.jsonl")).unwrap();
    let again = coevo(
        &["reward-stage1", "matrix.jsonl", "labels.jsonl", "out.jsonl"],
        dir.path(),
    );
    assert_eq!(code(&again), 0);
    assert_eq!(before, fs::read(dir.path().join("out.jsonl")).unwrap());
}

#[test]
fn stage1_parse_failure_exits_2_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "matrix.jsonl", "{\"q\": \"w\", \"i\": 0, \"j\": 0, \"pass\": 1}\n{bad\n");
    write(dir.path(), "labels.jsonl", WORKED_LABELS);
    let out = coevo(
        &["reward-stage1", "matrix.jsonl", "labels.jsonl", "out.jsonl"],
        dir.path(),
    );
    assert_eq!(code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 2"), "stderr: {stderr}");
    assert!(!dir.path().join("out.jsonl").exists());
}

#[test]
fn stage1_dimension_mismatch_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "matrix.jsonl", "{\"q\": \"w\", \"i\": 0, \"j\": 0, \"pass\": 1}\n");
    write(dir.path(), "labels.jsonl", WORKED_LABELS);
    let out = coevo(
        &["reward-stage1", "matrix.jsonl", "labels.jsonl", "out.jsonl"],
        dir.path(),
    );
    assert_eq!(code(&out), 3);
}

#[test]
fn stage1_empty_labels_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "matrix.jsonl", WORKED_MATRIX);
    write(dir.path(), "labels.jsonl", "");
    let out = coevo(
        &["reward-stage1", "matrix.jsonl", "labels.jsonl", "out.jsonl"],
        dir.path(),
    );
    assert_eq!(code(&out), 3);
}

fn planted_fixture(dir: &Path) {
    let mut matrix = String::new();
    for j in 0..3 {
        matrix.push_str(&format!("{{\"q\": \"p\", \"i\": 0, \"j\": {j}, \"pass\": 1}}\n"));
        matrix.push_str(&format!("{{\"q\": \"p\", \"i\": 1, \"j\": {j}, \"pass\": 0}}\n"));
    }
    write(dir, "matrix.jsonl", &matrix);
    let mut emb = String::new();
    for (j, angle) in [0.0, 2.0 * std::f64::consts::FRAC_PI_3, 4.0 * std::f64::consts::FRAC_PI_3]
        .iter()
        .enumerate()
    {
        emb.push_str(&format!(
            "{{\"j\": {j}, \"z\": [{}, {}]}}\n",
            angle.cos(),
            angle.sin()
        ));
    }
    write(dir, "emb.jsonl", &emb);
}

#[test]
fn stage2_planted_angles_earn_r_div_1_5() {
    let dir = tempfile::tempdir().unwrap();
    planted_fixture(dir.path());
    let out = coevo(
        &["reward-stage2", "matrix.jsonl", "emb.jsonl", "out.jsonl"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(dir.path().join("out.jsonl")).unwrap();
    let mut strategies = 0;
    for line in report.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if let Some(r_div) = v.get("r_div") {
            assert!(
                (r_div.as_f64().unwrap() - 1.5).abs() < 1e-9,
                "r_div {r_div} for {line}"
            );
            strategies += 1;
        }
    }
    assert_eq!(strategies, 3);

    // the polar CSV ships alongside with the documented columns
    let csv = fs::read_to_string(dir.path().join("out.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("j,cluster,x,y,theta,d"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn stage2_single_strategy_gets_full_reliability_no_diversity() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "matrix.jsonl", "{\"q\": \"s\", \"i\": 0, \"j\": 0, \"pass\": 1}\n");
    write(dir.path(), "emb.jsonl", "{\"j\": 0, \"z\": [0.3, 0.4]}\n");
    let out = coevo(
        &["reward-stage2", "matrix.jsonl", "emb.jsonl", "out.jsonl"],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let report = fs::read_to_string(dir.path().join("out.jsonl")).unwrap();
    assert!(report.contains("\"r_rel\":1.0"));
    assert!(report.contains("\"r_div\":0.0"));
}

#[test]
fn stage2_tau_flag_override_is_observable() {
    let dir = tempfile::tempdir().unwrap();
    planted_fixture(dir.path());
    let strict = coevo(
        &["reward-stage2", "matrix.jsonl", "emb.jsonl", "strict.jsonl"],
        dir.path(),
    );
    assert_eq!(code(&strict), 0);
    // tau 0 trusts everything, so S- empties and r_con drops to zero
    let loose = coevo(
        &[
            "reward-stage2",
            "matrix.jsonl",
            "emb.jsonl",
            "loose.jsonl",
            "--tau",
            "0.0",
        ],
        dir.path(),
    );
    assert_eq!(code(&loose), 0);
    let strict = fs::read_to_string(dir.path().join("strict.jsonl")).unwrap();
    let loose = fs::read_to_string(dir.path().join("loose.jsonl")).unwrap();
    assert!(strict.contains("\"r_con\":1.0"));
    assert!(loose.contains("\"r_con\":0.0"));
    assert_ne!(strict, loose);
}

#[test]
fn stage2_degenerate_clustering_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    planted_fixture(dir.path());
    write(
        dir.path(),
        "emb.jsonl",
        concat!(
            "{\"j\": 0, \"z\": [1.0, 0.0]}\n",
            "{\"j\": 1, \"z\": [1.0, 0.0]}\n",
            "{\"j\": 2, \"z\": [1.0, 0.0]}\n",
        ),
    );
    let out = coevo(
        &[
            "reward-stage2",
            "matrix.jsonl",
            "emb.jsonl",
            "out.jsonl",
            "--k",
            "2",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 4);
}

#[test]
fn stage2_embedding_count_mismatch_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    planted_fixture(dir.path());
    write(dir.path(), "emb.jsonl", "{\"j\": 0, \"z\": [1.0, 0.0]}\n");
    let out = coevo(
        &["reward-stage2", "matrix.jsonl", "emb.jsonl", "out.jsonl"],
        dir.path(),
    );
    assert_eq!(code(&out), 3);
}

#[test]
fn stage2_config_file_sets_weights() {
    let dir = tempfile::tempdir().unwrap();
    planted_fixture(dir.path());
    write(dir.path(), "weights.toml", "beta = 0.0\ngamma = 0.0\n");
    let out = coevo(
        &[
            "reward-stage2",
            "matrix.jsonl",
            "emb.jsonl",
            "out.jsonl",
            "--config",
            "weights.toml",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let report = fs::read_to_string(dir.path().join("out.jsonl")).unwrap();
    // with beta = gamma = 0 the total collapses onto r_con
    for line in report.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if let (Some(r_con), Some(r_ver)) = (v.get("r_con"), v.get("r_ver")) {
            assert_eq!(r_con.as_f64(), r_ver.as_f64(), "line {line}");
        }
    }
    let unknown = coevo(
        &[
            "reward-stage2",
            "matrix.jsonl",
            "emb.jsonl",
            "out.jsonl",
            "--config",
            "missing.toml",
        ],
        dir.path(),
    );
    assert_eq!(code(&unknown), 2);
    write(dir.path(), "bad.toml", "no_such_key = 1\n");
    let bad = coevo(
        &[
            "reward-stage2",
            "matrix.jsonl",
            "emb.jsonl",
            "out.jsonl",
            "--config",
            "bad.toml",
        ],
        dir.path(),
    );
    assert_eq!(code(&bad), 2);
}

#[test]
fn simulate_zero_step_schedule_writes_one_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = coevo(
        &["simulate", "run", "--schedule", "stage1:0,stage2:0"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(dir.path().join("run/trainlog.csv")).unwrap();
    let mut lines = log.lines();
    assert!(lines.next().unwrap().starts_with("step,stage,"));
    let row = lines.next().unwrap();
    assert!(row.starts_with("0,init,"), "row: {row}");
    assert_eq!(lines.next(), None);
    assert!(dir.path().join("run/manifest.json").exists());
    assert!(dir.path().join("run/policy.json").exists());
}

#[test]
fn simulate_ablate_naive_rewrites_weights_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = coevo(
        &[
            "simulate",
            "run",
            "--schedule",
            "stage1:0,stage2:0",
            "--ablate-naive",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["config"]["beta"], 0.0);
    assert_eq!(manifest["config"]["gamma"], 0.0);
    assert_eq!(manifest["config"]["alpha"], 1.0);
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["seed"], 7);
}

#[test]
fn simulate_bad_schedule_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = coevo(&["simulate", "run", "--schedule", "stage9:5"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn simulate_config_file_round_trips_through_flags() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "sim.toml",
        "seed = 11\nschedule = \"stage1:2,stage2:2\"\npool_size = 200\nbatch_questions = 20\n",
    );
    let a = coevo(&["simulate", "a", "--config", "sim.toml"], dir.path());
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    let b = coevo(
        &[
            "simulate",
            "b",
            "--config",
            "sim.toml",
            "--seed",
            "11",
        ],
        dir.path(),
    );
    assert_eq!(code(&b), 0);
    assert_eq!(
        fs::read(dir.path().join("a/trainlog.csv")).unwrap(),
        fs::read(dir.path().join("b/trainlog.csv")).unwrap()
    );
    let c = coevo(
        &["simulate", "c", "--config", "sim.toml", "--seed", "12"],
        dir.path(),
    );
    assert_eq!(code(&c), 0);
    assert_ne!(
        fs::read(dir.path().join("a/trainlog.csv")).unwrap(),
        fs::read(dir.path().join("c/trainlog.csv")).unwrap()
    );
}

fn golden(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data/golden/v1")
        .join(name)
        .display()
        .to_string()
}

#[test]
fn analyze_golden_pair_shows_geometric_dispersion_advantage() {
    let dir = tempfile::tempdir().unwrap();
    let out = coevo(
        &["analyze", &golden("pair_geometric.csv"), &golden("pair_naive.csv")],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let table = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("log,final_mean_r_con"));
    let field = |row: &str, idx: usize| -> f64 {
        row.split(',').nth(idx).unwrap().parse().unwrap()
    };
    // columns: log, r_con, r_rel, r_div, dispersion, accuracy, bon
    let geo_disp = field(rows[1], 4);
    let naive_disp = field(rows[2], 4);
    assert!(
        geo_disp > naive_disp,
        "dispersion geometric {geo_disp} vs naive {naive_disp}"
    );
    let geo_rel = field(rows[1], 2);
    let naive_rel = field(rows[2], 2);
    assert!(
        geo_rel > naive_rel,
        "r_rel geometric {geo_rel} vs naive {naive_rel}"
    );
}

#[test]
fn analyze_writes_file_and_manifest_with_out_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = coevo(
        &[
            "analyze",
            &golden("stage1_50.csv"),
            "--out",
            "summary.csv",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let table = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
    assert!(dir.path().join("summary.csv.manifest.json").exists());
}

#[test]
fn analyze_schema_mismatch_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "other.csv", "step,stage\n0,init\n");
    let out = coevo(&["analyze", "other.csv"], dir.path());
    assert_eq!(code(&out), 3);
}

#[test]
fn analyze_no_logs_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = coevo(&["analyze"], dir.path());
    assert_eq!(code(&out), 3);
}

#[test]
fn jobs_flag_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    planted_fixture(dir.path());
    let one = coevo(
        &[
            "reward-stage2",
            "matrix.jsonl",
            "emb.jsonl",
            "one.jsonl",
            "--jobs",
            "1",
        ],
        dir.path(),
    );
    assert_eq!(code(&one), 0);
    let four = coevo(
        &[
            "reward-stage2",
            "matrix.jsonl",
            "emb.jsonl",
            "four.jsonl",
            "--jobs",
            "4",
        ],
        dir.path(),
    );
    assert_eq!(code(&four), 0);
    assert_eq!(
        fs::read(dir.path().join("one.jsonl")).unwrap(),
        fs::read(dir.path().join("four.jsonl")).unwrap()
    );
}
