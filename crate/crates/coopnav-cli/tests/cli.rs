//! End-to-end tests of the `coopnav` binary: directory layout, byte-level
//! determinism, the four subcommands' happy paths, and their refusal modes.
//! Every run here is scripted (no learning) so the whole file finishes in
//! seconds.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn coopnav(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coopnav"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn coopnav")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
}

fn assert_fails(out: &Output, needle: &str) {
    assert!(!out.status.success(), "expected failure, command succeeded");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains(needle),
        "stderr should mention {needle:?}, got: {stderr}"
    );
}

/// A tiny scripted experiment: three landmarks, 600 episodes in three
/// 200-episode batches, an evaluation sweep after every batch.
fn small_config(condition: &str, seeds: &str, out_dir: &str) -> String {
    format!(
        r#"
[run]
condition = "{condition}"
seeds = [{seeds}]
budget_episodes = 600
batch_episodes = 200
eval_interval_batches = 1
eval_episodes_per_goal = 1
scripted = true
out_dir = "{out_dir}"

[world]
num_landmarks = 3
beta = 4.0
"#
    )
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn seed_dir(root: &Path, out: &str, condition: &str, seed: u64) -> PathBuf {
    root.join(out).join(condition).join(format!("seed_{seed}"))
}

fn json_lines(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn run_lays_out_the_directory_and_is_byte_deterministic() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(
        tmp.path(),
        "exp.toml",
        &small_config("independent", "7", "out_a"),
    );
    let config = config.to_str().unwrap();

    assert_ok(&coopnav(&["run", "--config", config], tmp.path()));
    let dir = seed_dir(tmp.path(), "out_a", "independent", 7);
    for file in [
        "resolved.toml",
        "manifest.json",
        "records.jsonl",
        "summary.json",
    ] {
        assert!(dir.join(file).is_file(), "missing {file}");
    }
    for batch in 1..=3 {
        let name = format!("checkpoints/batch_{batch:06}.json");
        assert!(dir.join(&name).is_file(), "missing {name}");
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["schema_version"], 1);
    assert_eq!(manifest["condition"], "independent");
    assert_eq!(manifest["seed"], 7);
    assert!(manifest["config_hash"].as_str().unwrap().len() == 16);

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["episodes"], 600);
    assert_eq!(summary["evals"].as_array().unwrap().len(), 3);

    // A second invocation with a different output root must reproduce the
    // journal byte for byte, and a different worker count must not matter.
    let config_b = write_config(
        tmp.path(),
        "exp_b.toml",
        &small_config("independent", "7", "out_b"),
    );
    assert_ok(&coopnav(
        &[
            "run",
            "--config",
            config_b.to_str().unwrap(),
            "--workers",
            "4",
        ],
        tmp.path(),
    ));
    let dir_b = seed_dir(tmp.path(), "out_b", "independent", 7);
    assert_eq!(
        fs::read(dir.join("records.jsonl")).unwrap(),
        fs::read(dir_b.join("records.jsonl")).unwrap(),
        "same config + seed must give identical records for any worker count"
    );
}

#[test]
fn run_refuses_to_overwrite_without_force() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(
        tmp.path(),
        "exp.toml",
        &small_config("independent", "3", "out"),
    );
    let config = config.to_str().unwrap();
    assert_ok(&coopnav(&["run", "--config", config], tmp.path()));
    assert_fails(
        &coopnav(&["run", "--config", config], tmp.path()),
        "--force",
    );
    assert_ok(&coopnav(
        &["run", "--config", config, "--force"],
        tmp.path(),
    ));
}

#[test]
fn malformed_config_fails_before_writing_anything() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(
        tmp.path(),
        "bad.toml",
        "[run]\ncondtion = \"ctde\"\nout_dir = \"out\"\n",
    );
    let out = coopnav(&["run", "--config", config.to_str().unwrap()], tmp.path());
    assert_fails(&out, "bad.toml");
    assert!(
        !tmp.path().join("out").exists(),
        "a rejected config must not leave partial output"
    );

    // Two budgets set is caught at resolution, same guarantee.
    let config = write_config(
        tmp.path(),
        "two_budgets.toml",
        "[run]\nbudget_episodes = 10\nbudget_updates = 2\nout_dir = \"out2\"\n",
    );
    let out = coopnav(&["run", "--config", config.to_str().unwrap()], tmp.path());
    assert_fails(&out, "at most one");
    assert!(!tmp.path().join("out2").exists());
}

#[test]
fn condition_and_seed_overrides_take_effect() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(
        tmp.path(),
        "exp.toml",
        &small_config("independent", "3", "out"),
    );
    assert_ok(&coopnav(
        &[
            "run",
            "--config",
            config.to_str().unwrap(),
            "--condition",
            "centralized",
            "--seed",
            "11",
            "--budget-episodes",
            "200",
        ],
        tmp.path(),
    ));
    let dir = seed_dir(tmp.path(), "out", "centralized", 11);
    let records = json_lines(&dir.join("records.jsonl"));
    let train: Vec<_> = records.iter().filter(|r| r["phase"] == "train").collect();
    assert_eq!(train.len(), 200);
    assert!(
        train.iter().all(|r| r["goals"][0] == r["goals"][1]),
        "centralized assignment must give both agents the same goal"
    );
    assert!(
        !seed_dir(tmp.path(), "out", "centralized", 3).exists(),
        "--seed must replace the config's seed list"
    );
}

#[test]
fn eval_replays_a_checkpoint_into_a_per_goal_table() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(
        tmp.path(),
        "exp.toml",
        &small_config("centralized", "5", "out"),
    );
    assert_ok(&coopnav(
        &["run", "--config", config.to_str().unwrap()],
        tmp.path(),
    ));
    let checkpoint =
        seed_dir(tmp.path(), "out", "centralized", 5).join("checkpoints/batch_000003.json");
    let checkpoint = checkpoint.to_str().unwrap();

    let args = [
        "eval",
        "--checkpoint",
        checkpoint,
        "--episodes-per-goal",
        "2",
    ];
    let out = coopnav(&args, tmp.path());
    assert_ok(&out);
    let table = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(
        lines[0],
        "goal,episodes,success_rate,mean_reward,mean_length"
    );
    // Three landmarks, unfiltered: three singleton goals, three pairs,
    // plus the ALL row.
    assert_eq!(lines.len(), 1 + 6 + 1);
    assert!(lines.last().unwrap().starts_with("ALL,12,"));
    for line in &lines[1..7] {
        let goal = line.split(',').next().unwrap();
        assert_eq!(goal.len(), 3, "goal column is a landmark bitstring: {line}");
        assert!(goal.chars().all(|c| c == '0' || c == '1'));
    }

    // Same checkpoint, same table — and --out writes instead of printing.
    let repeat = coopnav(&args, tmp.path());
    assert_ok(&repeat);
    assert_eq!(table.as_bytes(), &repeat.stdout[..]);
    let csv = tmp.path().join("eval.csv");
    let mut with_out = args.to_vec();
    with_out.extend(["--out", csv.to_str().unwrap()]);
    let out = coopnav(&with_out, tmp.path());
    assert_ok(&out);
    assert!(out.stdout.is_empty());
    assert_eq!(fs::read(&csv).unwrap(), table.as_bytes());

    // Optional episode journal alongside the table.
    let records = tmp.path().join("eval_records.jsonl");
    let mut with_records = args.to_vec();
    with_records.extend(["--records", records.to_str().unwrap()]);
    assert_ok(&coopnav(&with_records, tmp.path()));
    let rows = json_lines(&records);
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| r["phase"] == "eval"));
}

#[test]
fn eval_rejects_foreign_checkpoint_versions() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(
        tmp.path(),
        "exp.toml",
        &small_config("independent", "2", "out"),
    );
    assert_ok(&coopnav(
        &["run", "--config", config.to_str().unwrap()],
        tmp.path(),
    ));
    let path = seed_dir(tmp.path(), "out", "independent", 2).join("checkpoints/batch_000003.json");
    let mut checkpoint: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    checkpoint["version"] = serde_json::json!(99);
    fs::write(&path, serde_json::to_vec(&checkpoint).unwrap()).unwrap();
    let out = coopnav(
        &["eval", "--checkpoint", path.to_str().unwrap()],
        tmp.path(),
    );
    assert_fails(&out, "version");
}

#[test]
fn report_aggregates_runs_into_metric_tables() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(
        tmp.path(),
        "game.toml",
        &small_config("goal_coordination_game", "0, 1", "out"),
    );
    assert_ok(&coopnav(
        &["run", "--config", config.to_str().unwrap()],
        tmp.path(),
    ));
    let seed0 = seed_dir(tmp.path(), "out", "goal_coordination_game", 0);
    let seed1 = seed_dir(tmp.path(), "out", "goal_coordination_game", 1);

    assert_ok(&coopnav(
        &[
            "report",
            seed0.to_str().unwrap(),
            seed1.to_str().unwrap(),
            "--out",
            "tables",
            "--bootstrap-iterations",
            "200",
        ],
        tmp.path(),
    ));
    let tables = tmp.path().join("tables");
    for file in [
        "training_curve.csv",
        "eval_curve.csv",
        "alignment.csv",
        "per_goal.csv",
        "specialization.csv",
        "risky.csv",
        "matrices.csv",
        "summary.csv",
        "summary.json",
    ] {
        let text = fs::read_to_string(tables.join(file)).unwrap_or_else(|e| {
            panic!("missing table {file}: {e}");
        });
        assert!(text.lines().count() > 1, "{file} should have data rows");
    }

    let training = fs::read_to_string(tables.join("training_curve.csv")).unwrap();
    assert!(
        training.starts_with("condition,seed,batch,env_steps,episodes,mean_reward,mean_length\n")
    );
    // Two seeds, three batches each.
    assert_eq!(training.lines().count(), 1 + 6);

    // The matrices table covers every goal/message cell for both agents of
    // both runs: 2 seeds x 2 agents x 6 goals x 15 messages.
    let matrices = fs::read_to_string(tables.join("matrices.csv")).unwrap();
    assert_eq!(matrices.lines().count(), 1 + 2 * 2 * 6 * 15);

    let summary = fs::read_to_string(tables.join("summary.csv")).unwrap();
    let row = summary.lines().nth(1).unwrap();
    assert!(row.starts_with("goal_coordination_game,2,"));
    assert!(
        row.contains(",false,"),
        "two seeds should not be degenerate"
    );

    // A single-seed report still works but flags the interval as degenerate.
    assert_ok(&coopnav(
        &[
            "report",
            seed0.to_str().unwrap(),
            "--out",
            "tables_one",
            "--bootstrap-iterations",
            "200",
        ],
        tmp.path(),
    ));
    let summary = fs::read_to_string(tmp.path().join("tables_one/summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().contains(",true,"));

    // Runs under different experiment settings must be rejected, not mixed.
    let other = write_config(
        tmp.path(),
        "other.toml",
        &small_config("goal_coordination_game", "0", "out_beta")
            .replace("beta = 4.0", "beta = 2.0"),
    );
    assert_ok(&coopnav(
        &["run", "--config", other.to_str().unwrap()],
        tmp.path(),
    ));
    let foreign = seed_dir(tmp.path(), "out_beta", "goal_coordination_game", 0);
    let out = coopnav(
        &[
            "report",
            seed0.to_str().unwrap(),
            foreign.to_str().unwrap(),
            "--out",
            "tables_mixed",
        ],
        tmp.path(),
    );
    assert_fails(&out, "differ");
}

#[test]
fn oracle_prints_key_value_lines_and_can_persist() {
    let tmp = TempDir::new().unwrap();
    let out = coopnav(
        &[
            "oracle",
            "--landmarks",
            "3",
            "--episodes",
            "600",
            "--batch-episodes",
            "200",
            "--seed",
            "2",
        ],
        tmp.path(),
    );
    assert_ok(&out);
    let stdout = String::from_utf8(out.stdout).unwrap();
    for key in [
        "episodes 600",
        "env_steps ",
        "mean_reward_agent0 ",
        "mean_reward_agent1 ",
        "alignment_overall ",
        "alignment_final_window ",
    ] {
        assert!(stdout.contains(key), "missing {key:?} in:\n{stdout}");
    }
    assert!(
        !stdout.contains("risky_rate"),
        "no leaders in the centralized condition"
    );

    let persisted = coopnav(
        &[
            "oracle",
            "--landmarks",
            "3",
            "--condition",
            "goal_coordination_game",
            "--episodes",
            "600",
            "--batch-episodes",
            "200",
            "--seed",
            "2",
            "--out-dir",
            "oracle_out",
        ],
        tmp.path(),
    );
    assert_ok(&persisted);
    let stdout = String::from_utf8(persisted.stdout).unwrap();
    assert!(stdout.contains("risky_rate_given_individual "));
    let dir = seed_dir(tmp.path(), "oracle_out", "goal_coordination_game", 2);
    assert!(dir.join("records.jsonl").is_file());
    assert!(dir.join("manifest.json").is_file());
}
