//! The `report` subcommand: read-only aggregation of finished run
//! directories into CSV tables and a structured summary.
//!
//! Emitted tables (all comma-separated, header row, UTF-8, `.` decimal):
//!
//! * `training_curve.csv`  — per-batch training reward and episode length;
//! * `eval_curve.csv`      — per-sweep evaluation reward and success;
//! * `alignment.csv`       — per-batch cooperative goal alignment;
//! * `per_goal.csv`        — per-goal alignment/reward co-evolution;
//! * `specialization.csv`  — landmark preference per (agent, goal);
//! * `risky.csv`           — follower risk-taking counts and rates;
//! * `matrices.csv`        — goal-by-message matrices from the latest
//!   checkpoint (game runs only), long form: one row per cell per agent;
//! * `summary.csv` / `summary.json` — per-condition interquartile mean of
//!   final evaluation rewards with a stratified bootstrap interval (goals
//!   are strata, seeds are resampled).
//!
//! Every number is recomputable from `records.jsonl` plus the checkpoints;
//! the command never writes into the run directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use coopnav::config::ExperimentConfig;
use coopnav::goals::GoalSpace;
use coopnav::metrics;
use coopnav::run::{read_records, Checkpoint, ConditionName, Phase, RunRecord};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Args)]
pub struct ReportArgs {
    /// Finished run directories (each holding records.jsonl + resolved.toml).
    #[arg(required = true)]
    pub run_dirs: Vec<PathBuf>,
    /// Directory for the emitted tables.
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
    /// Bootstrap resampling iterations.
    #[arg(long, default_value_t = 2000)]
    pub bootstrap_iterations: u32,
    /// Bootstrap RNG seed.
    #[arg(long, default_value_t = 0)]
    pub bootstrap_seed: u64,
}

struct LoadedRun {
    dir: PathBuf,
    condition: ConditionName,
    seed: u64,
    config: ExperimentConfig,
    records: Vec<RunRecord>,
    /// Latest checkpoint, when any were written.
    checkpoint: Option<Checkpoint>,
}

impl LoadedRun {
    fn active_agents(&self) -> usize {
        if self.config.run.solo {
            1
        } else {
            2
        }
    }
}

/// Mean reward across the agents that actually act.
fn record_reward(r: &RunRecord, agents: usize) -> f64 {
    r.rewards[..agents].iter().sum::<f64>() / agents as f64
}

/// An episode succeeds when every acting agent was paid.
fn record_success(r: &RunRecord, agents: usize) -> bool {
    r.rewards[..agents].iter().all(|&x| x > 0.0)
}

pub fn cmd_report(args: ReportArgs) -> anyhow::Result<()> {
    let runs = load_runs(&args.run_dirs)?;
    ensure_compatible(&runs)?;
    let groups = group_by_condition(&runs)?;
    fs::create_dir_all(&args.out)?;
    write_training_curve(&args.out, &runs)?;
    write_eval_curve(&args.out, &runs)?;
    write_alignment(&args.out, &runs)?;
    write_per_goal(&args.out, &runs)?;
    write_specialization(&args.out, &runs)?;
    write_risky(&args.out, &runs)?;
    write_matrices(&args.out, &runs)?;
    write_summary(
        &args.out,
        &groups,
        args.bootstrap_iterations,
        args.bootstrap_seed,
    )?;
    eprintln!("report written to {}", args.out.display());
    Ok(())
}

fn load_runs(dirs: &[PathBuf]) -> anyhow::Result<Vec<LoadedRun>> {
    let mut runs = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let config = ExperimentConfig::load(&dir.join("resolved.toml"))
            .with_context(|| format!("loading {}/resolved.toml", dir.display()))?;
        let manifest: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(dir.join("manifest.json"))
                .with_context(|| format!("loading {}/manifest.json", dir.display()))?,
        )?;
        let seed = manifest
            .get("seed")
            .and_then(|v| v.as_u64())
            .with_context(|| format!("{}/manifest.json lacks a seed", dir.display()))?;
        let records = read_records(&dir.join("records.jsonl"))
            .with_context(|| format!("loading {}/records.jsonl", dir.display()))?;
        let checkpoint = latest_checkpoint(&dir.join("checkpoints"))?;
        runs.push(LoadedRun {
            dir: dir.clone(),
            condition: config.run.condition,
            seed,
            config,
            records,
            checkpoint,
        });
    }
    Ok(runs)
}

fn latest_checkpoint(dir: &Path) -> anyhow::Result<Option<Checkpoint>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut names: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    names.sort();
    match names.last() {
        Some(path) => Ok(Some(
            Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?,
        )),
        None => Ok(None),
    }
}

/// Everything that must agree for runs to be comparable in one report:
/// the world, training, game, and sampler settings plus the goal regime.
/// The condition, seed list, output directory, worker count, and
/// evaluation cadence may differ (none of them change what an episode is).
fn comparable_key(config: &ExperimentConfig) -> anyhow::Result<String> {
    let mut c = config.clone();
    c.run.condition = ConditionName::Independent;
    c.run.seeds = vec![0];
    c.run.out_dir = String::new();
    c.run.workers = 0;
    c.run.eval_interval_batches = 0;
    Ok(toml::to_string(&c)?)
}

fn ensure_compatible(runs: &[LoadedRun]) -> anyhow::Result<()> {
    let Some(first) = runs.first() else {
        bail!("no run directories given");
    };
    let reference = comparable_key(&first.config)?;
    for run in &runs[1..] {
        if comparable_key(&run.config)? != reference {
            bail!(
                "incompatible configs: {} and {} describe different experiments",
                first.dir.display(),
                run.dir.display()
            );
        }
    }
    Ok(())
}

fn group_by_condition(
    runs: &[LoadedRun],
) -> anyhow::Result<BTreeMap<&'static str, Vec<&LoadedRun>>> {
    let mut groups: BTreeMap<&'static str, Vec<&LoadedRun>> = BTreeMap::new();
    for run in runs {
        groups.entry(run.condition.as_str()).or_default().push(run);
    }
    for group in groups.values_mut() {
        group.sort_by_key(|r| r.seed);
        for pair in group.windows(2) {
            if pair[0].seed == pair[1].seed {
                bail!(
                    "duplicate run for condition {} seed {}: {} and {}",
                    pair[0].condition,
                    pair[0].seed,
                    pair[0].dir.display(),
                    pair[1].dir.display()
                );
            }
        }
    }
    Ok(groups)
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> anyhow::Result<()> {
    let mut text = String::with_capacity(header.len() + 1 + rows.len() * 48);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Training records of one run bucketed by update index, in order.
fn train_by_batch(run: &LoadedRun) -> BTreeMap<u64, Vec<&RunRecord>> {
    let mut buckets: BTreeMap<u64, Vec<&RunRecord>> = BTreeMap::new();
    for r in run.records.iter().filter(|r| r.phase == Phase::Train) {
        buckets.entry(r.batch).or_default().push(r);
    }
    buckets
}

fn eval_by_batch(run: &LoadedRun) -> BTreeMap<u64, Vec<&RunRecord>> {
    let mut buckets: BTreeMap<u64, Vec<&RunRecord>> = BTreeMap::new();
    for r in run.records.iter().filter(|r| r.phase == Phase::Eval) {
        buckets.entry(r.batch).or_default().push(r);
    }
    buckets
}

fn write_training_curve(out: &Path, runs: &[LoadedRun]) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    for run in runs {
        let agents = run.active_agents();
        for (batch, records) in train_by_batch(run) {
            let n = records.len() as f64;
            let reward = records
                .iter()
                .map(|r| record_reward(r, agents))
                .sum::<f64>()
                / n;
            let length = records.iter().map(|r| r.length as f64).sum::<f64>() / n;
            let env_steps = records.iter().map(|r| r.env_steps).max().unwrap_or(0);
            rows.push(format!(
                "{},{},{},{},{},{},{}",
                run.condition,
                run.seed,
                batch,
                env_steps,
                records.len(),
                reward,
                length
            ));
        }
    }
    write_csv(
        &out.join("training_curve.csv"),
        "condition,seed,batch,env_steps,episodes,mean_reward,mean_length",
        &rows,
    )
}

fn write_eval_curve(out: &Path, runs: &[LoadedRun]) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    for run in runs {
        let agents = run.active_agents();
        for (batch, records) in eval_by_batch(run) {
            let n = records.len() as f64;
            let reward = records
                .iter()
                .map(|r| record_reward(r, agents))
                .sum::<f64>()
                / n;
            let success = records.iter().filter(|r| record_success(r, agents)).count() as f64 / n;
            let length = records.iter().map(|r| r.length as f64).sum::<f64>() / n;
            let env_steps = records.iter().map(|r| r.env_steps).max().unwrap_or(0);
            rows.push(format!(
                "{},{},{},{},{},{},{},{}",
                run.condition,
                run.seed,
                batch,
                env_steps,
                records.len(),
                reward,
                success,
                length
            ));
        }
    }
    write_csv(
        &out.join("eval_curve.csv"),
        "condition,seed,batch,env_steps,episodes,mean_reward,success_rate,mean_length",
        &rows,
    )
}

fn write_alignment(out: &Path, runs: &[LoadedRun]) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    for run in runs {
        for (batch, records) in train_by_batch(run) {
            let owned: Vec<RunRecord> = records.iter().map(|r| (*r).clone()).collect();
            let stats = metrics::alignment(&owned);
            let env_steps = records.iter().map(|r| r.env_steps).max().unwrap_or(0);
            rows.push(format!(
                "{},{},{},{},{},{},{},{}",
                run.condition,
                run.seed,
                batch,
                env_steps,
                stats.aligned_cooperative,
                stats.cooperative_involved,
                stats.value,
                stats.degenerate
            ));
        }
    }
    write_csv(
        &out.join("alignment.csv"),
        "condition,seed,batch,env_steps,aligned,eligible,value,degenerate",
        &rows,
    )
}

fn write_per_goal(out: &Path, runs: &[LoadedRun]) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    for run in runs {
        let agents = run.active_agents();
        // (goal, batch) -> (episodes, matched, reward sum)
        let mut cells: BTreeMap<(String, u64), (u64, u64, f64)> = BTreeMap::new();
        for r in run.records.iter().filter(|r| r.phase == Phase::Train) {
            let reference = r.leader.unwrap_or(0) as usize;
            let cell = cells
                .entry((r.goals[reference].clone(), r.batch))
                .or_insert((0, 0, 0.0));
            cell.0 += 1;
            cell.1 += u64::from(r.goals[0] == r.goals[1]);
            cell.2 += record_reward(r, agents);
        }
        for ((goal, batch), (episodes, matched, reward_sum)) in cells {
            rows.push(format!(
                "{},{},{},{},{},{},{},{}",
                run.condition,
                run.seed,
                goal,
                batch,
                episodes,
                matched,
                matched as f64 / episodes as f64,
                reward_sum / episodes as f64
            ));
        }
    }
    write_csv(
        &out.join("per_goal.csv"),
        "condition,seed,goal,batch,episodes,matched,alignment,mean_reward",
        &rows,
    )
}

fn write_specialization(out: &Path, runs: &[LoadedRun]) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    for run in runs {
        let train: Vec<RunRecord> = run
            .records
            .iter()
            .filter(|r| r.phase == Phase::Train)
            .cloned()
            .collect();
        for row in metrics::specialization(&train) {
            rows.push(format!(
                "{},{},{},{},{},{},{},{}",
                run.condition,
                run.seed,
                row.agent,
                row.goal,
                row.preferred_landmark,
                row.preferred_visits,
                row.total_visits,
                row.value
            ));
        }
    }
    write_csv(
        &out.join("specialization.csv"),
        "condition,seed,agent,goal,preferred_landmark,preferred_visits,total_visits,value",
        &rows,
    )
}

fn write_risky(out: &Path, runs: &[LoadedRun]) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    for run in runs {
        let train: Vec<RunRecord> = run
            .records
            .iter()
            .filter(|r| r.phase == Phase::Train)
            .cloned()
            .collect();
        let stats = metrics::risky_follower(&train);
        rows.push(format!(
            "{},{},{},{},{},{},{}",
            run.condition,
            run.seed,
            stats.risky,
            stats.leader_individual,
            stats.with_leader,
            stats.rate_overall,
            stats.rate_given_individual
        ));
    }
    write_csv(
        &out.join("risky.csv"),
        "condition,seed,risky,leader_individual,with_leader,rate_overall,rate_given_individual",
        &rows,
    )
}

fn write_matrices(out: &Path, runs: &[LoadedRun]) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    for run in runs {
        let Some(checkpoint) = &run.checkpoint else {
            continue;
        };
        let Some(game) = &checkpoint.game else {
            continue;
        };
        let space = GoalSpace::new(
            checkpoint.params.world.num_landmarks,
            checkpoint.params.goal_filter,
        )?;
        for agent in 0..2 {
            let matrix = game.matrix(agent);
            for g in 0..matrix.num_goals() {
                for m in 0..matrix.num_messages() {
                    rows.push(format!(
                        "{},{},{},{},{},{},{}",
                        run.condition,
                        run.seed,
                        agent,
                        g,
                        space.goal(g).bitstring(),
                        m,
                        matrix.values()[[g, m]]
                    ));
                }
            }
        }
    }
    write_csv(
        &out.join("matrices.csv"),
        "condition,seed,agent,goal_index,goal,message,value",
        &rows,
    )
}

fn write_summary(
    out: &Path,
    groups: &BTreeMap<&'static str, Vec<&LoadedRun>>,
    iterations: u32,
    bootstrap_seed: u64,
) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    let mut entries = Vec::new();
    for (condition, runs) in groups {
        let agents = runs[0].active_agents();
        // scores[goal][seed] = that seed's mean final-sweep reward on the goal
        let mut strata: BTreeMap<String, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
        let mut success_values = Vec::new();
        for run in runs {
            let evals = eval_by_batch(run);
            let Some((_, final_records)) = evals.iter().next_back() else {
                bail!(
                    "{}: no evaluation records; cannot summarize",
                    run.dir.display()
                );
            };
            let n = final_records.len() as f64;
            success_values.push(
                final_records
                    .iter()
                    .filter(|r| record_success(r, agents))
                    .count() as f64
                    / n,
            );
            for r in final_records {
                strata
                    .entry(r.goals[0].clone())
                    .or_default()
                    .entry(run.seed)
                    .or_default()
                    .push(record_reward(r, agents));
            }
        }
        let seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
        let mut scores: Vec<Vec<f64>> = Vec::with_capacity(strata.len());
        for (goal, by_seed) in &strata {
            let mut row = Vec::with_capacity(seeds.len());
            for seed in &seeds {
                let Some(values) = by_seed.get(seed) else {
                    bail!("condition {condition}: goal {goal} has no episodes for seed {seed}");
                };
                row.push(values.iter().sum::<f64>() / values.len() as f64);
            }
            scores.push(row);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(bootstrap_seed);
        let bootstrap = metrics::stratified_bootstrap(&scores, iterations, &mut rng)?;
        let final_eval_success = success_values.iter().sum::<f64>() / success_values.len() as f64;
        rows.push(format!(
            "{},{},{},{},{},{},{},{},{}",
            condition,
            seeds.len(),
            scores.len(),
            bootstrap.point,
            bootstrap.ci_low,
            bootstrap.ci_high,
            bootstrap.iterations,
            bootstrap.degenerate,
            final_eval_success
        ));
        entries.push(serde_json::json!({
            "condition": condition,
            "seeds": seeds,
            "strata": scores.len(),
            "bootstrap": bootstrap,
            "final_eval_success": final_eval_success,
        }));
    }
    write_csv(
        &out.join("summary.csv"),
        "condition,seeds,strata,point_iqm,ci_low,ci_high,iterations,degenerate,final_eval_success",
        &rows,
    )?;
    fs::write(
        out.join("summary.json"),
        serde_json::to_vec_pretty(&serde_json::Value::Array(entries))?,
    )?;
    Ok(())
}
