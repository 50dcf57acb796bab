//! Command-line harness around the `coopnav` library.
//!
//! Four subcommands cover the experiment lifecycle:
//!
//! * `run`    — execute every seed of a TOML-configured experiment, writing
//!   one directory per (condition, seed) with the resolved config, a
//!   manifest, the episode journal, and periodic checkpoints;
//! * `eval`   — replay evaluation sweeps from a checkpoint and print a
//!   per-goal CSV table;
//! * `report` — aggregate finished run directories into metric CSVs
//!   (curves, alignment, specialization, matrix heatmaps, bootstrap
//!   summaries);
//! * `oracle` — scripted-policy runs (no learning) that exercise the
//!   environment, goal assignment, and the coordination game at full speed;
//!   used for calibration and sanity checks.
//!
//! All tables are comma-separated UTF-8 with a header row and `.` as the
//! decimal separator. The `COOPNAV_WORKERS` environment variable bounds
//! episode-level parallelism; results are identical for every value.

mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use coopnav::config::{ExperimentConfig, ResolvedExperiment};
use coopnav::goals::GoalFilter;
use coopnav::metrics;
use coopnav::run::{
    read_records, Checkpoint, ConditionName, EvalSummary, JsonlSink, NullSink, Phase, RecordSink,
    RunRecord, RunSummary, Runner,
};

#[derive(Parser)]
#[command(
    name = "coopnav",
    version,
    about = "Two-agent cooperative navigation laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute every seed of a configured experiment.
    Run(RunArgs),
    /// Replay evaluation sweeps from a checkpoint.
    Eval(EvalArgs),
    /// Export metric tables from finished run directories.
    Report(report::ReportArgs),
    /// Run scripted-policy experiments (no learning).
    Oracle(OracleArgs),
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => report::cmd_report(args),
        Command::Oracle(args) => cmd_oracle(args),
    };
    if let Err(err) = outcome {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

#[derive(Args)]
struct RunArgs {
    /// Experiment description (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Replace the config's seed list (comma-separated).
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Override the experimental condition.
    #[arg(long)]
    condition: Option<ConditionName>,
    /// Override the budget with an environment-step count.
    #[arg(long)]
    budget_env_steps: Option<u64>,
    /// Override the budget with an episode count.
    #[arg(long)]
    budget_episodes: Option<u64>,
    /// Override the budget with an update count.
    #[arg(long)]
    budget_updates: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Episode-wave width (0 = COOPNAV_WORKERS or thread count).
    #[arg(long)]
    workers: Option<usize>,
    /// Overwrite existing run directories.
    #[arg(long)]
    force: bool,
}

fn cmd_run(args: RunArgs) -> anyhow::Result<()> {
    let mut config = ExperimentConfig::load(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    if !args.seed.is_empty() {
        config.run.seeds = args.seed.clone();
    }
    if let Some(condition) = args.condition {
        config.run.condition = condition;
    }
    if args.budget_env_steps.is_some()
        || args.budget_episodes.is_some()
        || args.budget_updates.is_some()
    {
        config.run.budget_env_steps = args.budget_env_steps;
        config.run.budget_episodes = args.budget_episodes;
        config.run.budget_updates = args.budget_updates;
    }
    if let Some(dir) = &args.out_dir {
        config.run.out_dir = dir.display().to_string();
    }
    if let Some(workers) = args.workers {
        config.run.workers = workers;
    }
    let resolved = config.resolve()?;
    for &seed in &resolved.seeds().to_vec() {
        run_one_seed(&resolved, seed, args.force)?;
    }
    Ok(())
}

/// Directory layout of a single run: `<out>/<condition>/seed_<n>/`.
fn run_dir(resolved: &ResolvedExperiment, seed: u64) -> PathBuf {
    Path::new(resolved.out_dir())
        .join(resolved.condition().as_str())
        .join(format!("seed_{seed}"))
}

fn run_one_seed(resolved: &ResolvedExperiment, seed: u64, force: bool) -> anyhow::Result<()> {
    let dir = run_dir(resolved, seed);
    let records_path = dir.join("records.jsonl");
    if records_path.exists() && !force {
        bail!(
            "{} already exists; pass --force to overwrite",
            records_path.display()
        );
    }
    fs::create_dir_all(dir.join("checkpoints"))?;
    fs::write(dir.join("resolved.toml"), resolved.to_toml_string()?)?;
    let manifest = serde_json::json!({
        "schema_version": 1,
        "git_revision": git_revision(),
        "config_hash": format!("{:016x}", resolved.config_hash()?),
        "condition": resolved.condition().as_str(),
        "seed": seed,
        "seeds": resolved.seeds(),
    });
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;

    let params = resolved.params_for_seed(seed)?;
    let mut runner = Runner::new(params)?;
    let mut sink = JsonlSink::create(&records_path)?;
    let label = format!("{}/seed_{}", resolved.condition(), seed);
    let started = Instant::now();
    let summary = drive(
        &mut runner,
        &mut sink,
        Some(&dir.join("checkpoints")),
        &label,
    )?;
    sink.flush()?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_vec_pretty(&summary)?,
    )?;
    let secs = started.elapsed().as_secs_f64();
    eprintln!(
        "[{label}] done: {} env steps, {} episodes, {} updates in {:.1}s ({:.0} steps/s)",
        summary.env_steps,
        summary.episodes,
        summary.batches,
        secs,
        summary.env_steps as f64 / secs.max(1e-9),
    );
    Ok(())
}

/// The training loop with progress reporting; semantics match
/// [`Runner::run`]: evaluate every `eval_interval_batches` updates and at
/// budget exhaustion, checkpoint at each evaluation, honor early stopping.
fn drive(
    runner: &mut Runner,
    sink: &mut dyn RecordSink,
    checkpoint_dir: Option<&Path>,
    label: &str,
) -> coopnav::Result<RunSummary> {
    let mut evals = Vec::new();
    let mut stopped_early = false;
    while !runner.budget_exhausted() {
        let report = runner.run_one_batch(sink)?;
        let interval = runner.params().eval_interval_batches;
        let due = interval > 0 && runner.batches().is_multiple_of(interval as u64);
        let last = runner.budget_exhausted();
        if due || last {
            let eval = runner.evaluate(sink)?;
            eprintln!(
                "[{label}] batch {:>5} | {:>9} steps | train reward {:+.3} | eval reward {:+.3} | eval success {:.2}",
                runner.batches(),
                runner.env_steps(),
                report.mean_reward,
                eval.mean_reward,
                eval.success_rate,
            );
            let success = eval.success_rate;
            evals.push(eval);
            if let Some(dir) = checkpoint_dir {
                fs::create_dir_all(dir)?;
                runner
                    .checkpoint()
                    .save(&dir.join(format!("batch_{:06}.json", runner.batches())))?;
            }
            if let Some(threshold) = runner.params().stop_on_success {
                if success >= threshold && !last {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(RunSummary {
        env_steps: runner.env_steps(),
        episodes: runner.episodes(),
        batches: runner.batches(),
        evals,
        stopped_early,
    })
}

fn git_revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|out| out.status.success())
        .map(|out| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file produced by `run`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Episodes to play per goal (default: the run's configured count).
    #[arg(long)]
    episodes_per_goal: Option<usize>,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the evaluation episode records to this JSONL file.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Episode-wave width (0 = COOPNAV_WORKERS or thread count).
    #[arg(long)]
    workers: Option<usize>,
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let checkpoint = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let mut runner = Runner::from_checkpoint(checkpoint)?;
    if let Some(n) = args.episodes_per_goal {
        runner.set_eval_episodes_per_goal(n);
    }
    if let Some(workers) = args.workers {
        runner.set_workers(workers);
    }
    let summary = match &args.records {
        Some(path) => {
            let mut sink = JsonlSink::create(path)?;
            let summary = runner.evaluate(&mut sink)?;
            sink.flush()?;
            summary
        }
        None => runner.evaluate(&mut NullSink)?,
    };
    let table = eval_table(&summary);
    match &args.out {
        Some(path) => fs::write(path, table)?,
        None => print!("{table}"),
    }
    Ok(())
}

fn eval_table(summary: &EvalSummary) -> String {
    let mut out = String::from("goal,episodes,success_rate,mean_reward,mean_length\n");
    let mut episodes = 0u32;
    let mut length_weighted = 0.0;
    for g in &summary.per_goal {
        episodes += g.episodes;
        length_weighted += g.mean_length * g.episodes as f64;
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            g.goal, g.episodes, g.success_rate, g.mean_reward, g.mean_length
        ));
    }
    let mean_length = if episodes == 0 {
        0.0
    } else {
        length_weighted / episodes as f64
    };
    out.push_str(&format!(
        "ALL,{},{},{},{}\n",
        episodes, summary.success_rate, summary.mean_reward, mean_length
    ));
    out
}

#[derive(Args)]
struct OracleArgs {
    /// Landmark count.
    #[arg(long, default_value_t = 3)]
    landmarks: usize,
    /// Cooperative-to-individual reward ratio.
    #[arg(long, default_value_t = 4.0)]
    beta: f64,
    /// Goal-assignment condition.
    #[arg(long, default_value = "centralized")]
    condition: ConditionName,
    /// Training episodes to play.
    #[arg(long, default_value_t = 50_000)]
    episodes: u64,
    /// Episodes per update batch.
    #[arg(long, default_value_t = 1000)]
    batch_episodes: usize,
    /// Message alphabet width (default: goal count plus nine).
    #[arg(long)]
    messages: Option<usize>,
    /// Restrict the goal space.
    #[arg(long, default_value = "all")]
    goal_filter: GoalFilter,
    /// Forced-alignment probability for the aligned condition.
    #[arg(long, default_value_t = 0.5)]
    align_fraction: f64,
    /// Followers answer individual-goal leaders with covering cooperative
    /// goals.
    #[arg(long)]
    risky_follower: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Persist the run directory (records, manifest, checkpoints).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Episode-wave width (0 = COOPNAV_WORKERS or thread count).
    #[arg(long)]
    workers: Option<usize>,
    /// Overwrite an existing run directory.
    #[arg(long)]
    force: bool,
}

fn cmd_oracle(args: OracleArgs) -> anyhow::Result<()> {
    let mut config = ExperimentConfig::default();
    config.run.condition = args.condition;
    config.run.seeds = vec![args.seed];
    config.run.budget_episodes = Some(args.episodes);
    config.run.batch_episodes = Some(args.batch_episodes);
    config.run.goal_filter = args.goal_filter;
    config.run.align_fraction = args.align_fraction;
    config.run.scripted = true;
    config.run.risky_follower = args.risky_follower;
    config.run.eval_interval_batches = 0;
    config.run.eval_episodes_per_goal = 1;
    config.run.workers = args.workers.unwrap_or(0);
    if let Some(dir) = &args.out_dir {
        config.run.out_dir = dir.display().to_string();
    }
    config.world.num_landmarks = args.landmarks;
    config.world.beta = args.beta;
    config.game.num_messages = args.messages;
    let resolved = config.resolve()?;

    let records = match &args.out_dir {
        Some(_) => {
            run_one_seed(&resolved, args.seed, args.force)?;
            read_records(&run_dir(&resolved, args.seed).join("records.jsonl"))?
        }
        None => {
            let params = resolved.params_for_seed(args.seed)?;
            let mut runner = Runner::new(params)?;
            let mut records = Vec::new();
            drive(&mut runner, &mut records, None, "oracle")?;
            records
        }
    };
    print!("{}", oracle_summary(&records, args.batch_episodes));
    Ok(())
}

/// Key/value lines summarizing a scripted run's training records.
fn oracle_summary(records: &[RunRecord], final_window: usize) -> String {
    let train: Vec<RunRecord> = records
        .iter()
        .filter(|r| r.phase == Phase::Train)
        .cloned()
        .collect();
    let n = train.len().max(1) as f64;
    let mean = |agent: usize| train.iter().map(|r| r.rewards[agent]).sum::<f64>() / n;
    let overall = metrics::alignment(&train);
    let tail_start = train.len().saturating_sub(final_window);
    let tail = metrics::alignment(&train[tail_start..]);
    let mut out = String::new();
    out.push_str(&format!("episodes {}\n", train.len()));
    out.push_str(&format!(
        "env_steps {}\n",
        train.last().map(|r| r.env_steps).unwrap_or(0)
    ));
    out.push_str(&format!("mean_reward_agent0 {}\n", mean(0)));
    out.push_str(&format!("mean_reward_agent1 {}\n", mean(1)));
    out.push_str(&format!("alignment_overall {}\n", overall.value));
    out.push_str(&format!("alignment_final_window {}\n", tail.value));
    let risky = metrics::risky_follower(&train);
    if risky.with_leader > 0 {
        out.push_str(&format!("risky_rate_overall {}\n", risky.rate_overall));
        out.push_str(&format!(
            "risky_rate_given_individual {}\n",
            risky.rate_given_individual
        ));
    }
    out
}
