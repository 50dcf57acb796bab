//! Run orchestration: full training and evaluation loops, episode records,
//! and checkpointing.
//!
//! # Determinism
//!
//! Every run is a pure function of its [`RunParams`] (which include the
//! seed). Randomness is split into independent ChaCha streams:
//!
//! * network initialization uses one stream per agent;
//! * each training episode owns two streams keyed by its global index — one
//!   for its plan (goal assignment, roles, message) and one for its
//!   simulation (placement, headings, action sampling);
//! * evaluation episodes use a separate pair of stream families, so
//!   evaluation never perturbs training randomness;
//! * each update draws its minibatch shuffles from a stream keyed by the
//!   batch index.
//!
//! Goal-sampler probabilities and coordination matrices are snapshotted at
//! the start of each batch and all plans within the batch read the
//! snapshot. Together with per-episode streams and in-order consumption of
//! results this makes run output byte-identical for *any* worker count:
//! workers only decide how many episodes are simulated concurrently.
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comm::{assign_leader, CoordinationGame, GameConfig, RoundPlan};
use crate::env::{
    covered_landmark, env_reset, env_step, observe, Action, EnvState, WorldConfig, NUM_AGENTS,
};
use crate::goals::{GoalFilter, GoalSpace, Sampler};
use crate::nn::{fnv1a64, sample_index};
use crate::ppo::{
    ppo_update, ConditioningMode, EpisodeRollout, PolicyBundle, RolloutBuffer, StepSample,
    TrainConfig, UpdateStats,
};
use crate::scripted::ScriptedNav;
use crate::{Error, Result};

const STREAM_POLICY_INIT: [u64; 2] = [1, 2];
const STREAM_TRAIN_PLAN: u64 = 0x1000_0000_0000_0000;
const STREAM_TRAIN_SIM: u64 = 0x2000_0000_0000_0000;
const STREAM_EVAL_SIM: u64 = 0x4000_0000_0000_0000;
const STREAM_UPDATE: u64 = 0x5000_0000_0000_0000;

/// Environment variable overriding the episode-wave width.
pub const WORKERS_ENV_VAR: &str = "COOPNAV_WORKERS";

/// Whether an episode was collected for training or during an evaluation
/// sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Eval,
}

/// The experimental condition: how the two agents' goals are related and
/// what each network is allowed to see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionName {
    /// Each agent samples its own goal; no shared information.
    Independent,
    /// With probability `align_fraction`, both agents receive one shared
    /// uniform draw; otherwise goals are sampled independently.
    Aligned,
    /// Both agents always receive the same uniform goal.
    Centralized,
    /// Independent goals, but each policy is conditioned on both goals.
    BothGoals,
    /// Independent goals; decentralized policies with a centralized critic
    /// that sees the partner's observation, goal, and action.
    Ctde,
    /// Independent goals; the critic additionally sees the partner's goal
    /// (but not its observation or action).
    CtdeGoalsOnly,
    /// Goals negotiated per episode through the message game: a leader
    /// samples its goal and sends one symbol, the follower derives its goal
    /// from the symbol via its own matrix.
    GoalCoordinationGame,
}

impl ConditionName {
    pub const ALL: [ConditionName; 7] = [
        ConditionName::Independent,
        ConditionName::Aligned,
        ConditionName::Centralized,
        ConditionName::BothGoals,
        ConditionName::Ctde,
        ConditionName::CtdeGoalsOnly,
        ConditionName::GoalCoordinationGame,
    ];

    pub fn conditioning_mode(self) -> ConditioningMode {
        match self {
            ConditionName::BothGoals => ConditioningMode::BothGoals,
            ConditionName::Ctde => ConditioningMode::CtdeFull,
            ConditionName::CtdeGoalsOnly => ConditioningMode::CtdeGoalsOnly,
            _ => ConditioningMode::OwnGoal,
        }
    }

    /// The effective probability of a forced shared goal draw.
    pub fn align_fraction(self, configured: f64) -> f64 {
        match self {
            ConditionName::Centralized => 1.0,
            ConditionName::Aligned => configured,
            _ => 0.0,
        }
    }

    pub fn uses_game(self) -> bool {
        self == ConditionName::GoalCoordinationGame
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConditionName::Independent => "independent",
            ConditionName::Aligned => "aligned",
            ConditionName::Centralized => "centralized",
            ConditionName::BothGoals => "both_goals",
            ConditionName::Ctde => "ctde",
            ConditionName::CtdeGoalsOnly => "ctde_goals_only",
            ConditionName::GoalCoordinationGame => "goal_coordination_game",
        }
    }
}

impl std::fmt::Display for ConditionName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditionName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConditionName::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown condition '{s}'")))
    }
}

/// Who controls the agents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// PPO-trained networks.
    Learned,
    /// Greedy scripted navigation toward goal landmarks. With
    /// `risky_follower`, an individual-goal leader is always answered by a
    /// cooperative superset goal whose extra landmark the follower covers.
    ScriptedOracle { risky_follower: bool },
}

/// When a run stops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    EnvSteps(u64),
    Episodes(u64),
    Updates(u64),
}

/// When a batch is complete and an update fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchLimit {
    /// At least this many environment steps (the episode crossing the
    /// boundary is included whole).
    Steps(usize),
    /// Exactly this many episodes.
    Episodes(usize),
}

/// Goal-sampler choice per agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerSpec {
    Uniform,
    LearningProgress { epsilon: f64, window: usize },
}

/// Everything that defines one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunParams {
    pub world: WorldConfig,
    pub goal_filter: GoalFilter,
    pub condition: ConditionName,
    /// Forced-alignment probability used by the `aligned` condition.
    pub align_fraction: f64,
    pub train: TrainConfig,
    pub game: GameConfig,
    pub sampler: SamplerSpec,
    pub policy: PolicyKind,
    /// Run with agent 1 absent (frozen from the start).
    pub solo: bool,
    pub seed: u64,
    pub budget: Budget,
    pub batch: BatchLimit,
    /// Evaluate every this many batches; 0 disables periodic sweeps (a
    /// final sweep still runs).
    pub eval_interval_batches: usize,
    pub eval_episodes_per_goal: usize,
    /// Stop once an evaluation sweep reaches this success rate.
    pub stop_on_success: Option<f64>,
    /// Episode-wave width; 0 resolves from `COOPNAV_WORKERS` or the rayon
    /// thread count. Output is identical for every value.
    pub workers: usize,
}

impl RunParams {
    /// Reference parameters for a landmark count, condition, and seed.
    pub fn reference(num_landmarks: usize, condition: ConditionName, seed: u64) -> Self {
        let world = WorldConfig::for_landmarks(num_landmarks);
        let train = TrainConfig::for_landmarks(num_landmarks);
        let space_size = GoalSpace::full(num_landmarks)
            .map(|s| s.size())
            .unwrap_or(num_landmarks);
        RunParams {
            world,
            goal_filter: GoalFilter::All,
            condition,
            align_fraction: 0.5,
            batch: BatchLimit::Steps(train.batch_size_steps),
            train,
            game: GameConfig::for_goal_count(space_size),
            sampler: SamplerSpec::Uniform,
            policy: PolicyKind::Learned,
            solo: false,
            seed,
            budget: Budget::EnvSteps(5_000_000),
            eval_interval_batches: 10,
            eval_episodes_per_goal: 20,
            stop_on_success: None,
            workers: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        if self.condition.uses_game() {
            self.game.validate()?;
        }
        if !(0.0..=1.0).contains(&self.align_fraction) {
            return Err(Error::InvalidConfig(format!(
                "align_fraction must lie in [0, 1], got {}",
                self.align_fraction
            )));
        }
        if self.eval_episodes_per_goal == 0 {
            return Err(Error::InvalidConfig(
                "eval_episodes_per_goal must be positive".into(),
            ));
        }
        match self.batch {
            BatchLimit::Steps(0) | BatchLimit::Episodes(0) => {
                return Err(Error::InvalidConfig("batch limit must be positive".into()));
            }
            _ => {}
        }
        if let SamplerSpec::LearningProgress { epsilon, window } = self.sampler {
            if !(0.0..=1.0).contains(&epsilon) || window == 0 {
                return Err(Error::InvalidConfig(
                    "learning-progress sampler needs epsilon in [0, 1] and a positive window"
                        .into(),
                ));
            }
        }
        if let PolicyKind::ScriptedOracle {
            risky_follower: true,
        } = self.policy
        {
            if self.condition.uses_game() {
                return Err(Error::InvalidConfig(
                    "risky_follower replaces the message game; use a non-game condition".into(),
                ));
            }
            if self.goal_filter == GoalFilter::IndividualOnly {
                return Err(Error::InvalidConfig(
                    "risky_follower needs cooperative goals in the space".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One episode as logged to `records.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Global index within its phase (training and evaluation count
    /// separately).
    pub episode: u64,
    pub phase: Phase,
    /// Cumulative *training* environment steps after this episode (for
    /// evaluation records: at the time of the sweep).
    pub env_steps: u64,
    /// Index of the update this episode contributed to (or, for evaluation,
    /// the number of updates already applied).
    pub batch: u64,
    /// Goal bitstrings, agent 0 then agent 1; bit `i` is landmark `i`.
    pub goals: [String; 2],
    pub forced_aligned: bool,
    /// Leader agent index for game or risky-oracle episodes.
    pub leader: Option<u8>,
    /// Message symbol for game episodes.
    pub message: Option<u16>,
    pub rewards: [f64; 2],
    /// Steps elapsed in the episode.
    pub length: u32,
    /// Landmark each agent was covering when its goal paid out.
    pub arrivals: [Option<u8>; 2],
}

/// Destination for episode records.
pub trait RecordSink {
    fn record(&mut self, record: &RunRecord) -> Result<()>;
}

impl RecordSink for Vec<RunRecord> {
    fn record(&mut self, record: &RunRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl RecordSink for NullSink {
    fn record(&mut self, _record: &RunRecord) -> Result<()> {
        Ok(())
    }
}

/// Streams records as JSON lines.
pub struct JsonlSink {
    writer: BufWriter<File>,
}

impl JsonlSink {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(JsonlSink {
            writer: BufWriter::new(File::create(path)?),
        })
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

impl RecordSink for JsonlSink {
    fn record(&mut self, record: &RunRecord) -> Result<()> {
        serde_json::to_writer(&mut self.writer, record)?;
        self.writer.write_all(b"\n")?;
        Ok(())
    }
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Per-goal results of one evaluation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalEval {
    pub goal: String,
    pub episodes: u32,
    /// Fraction of episodes where every active agent was rewarded.
    pub success_rate: f64,
    /// Mean per-agent episode reward over active agents.
    pub mean_reward: f64,
    pub mean_length: f64,
}

/// One evaluation sweep: every goal in the space, both agents assigned that
/// goal, fixed episode count per goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub batches: u64,
    pub env_steps: u64,
    pub per_goal: Vec<GoalEval>,
    pub success_rate: f64,
    pub mean_reward: f64,
}

/// Outcome of a completed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub env_steps: u64,
    pub episodes: u64,
    pub batches: u64,
    pub evals: Vec<EvalSummary>,
    pub stopped_early: bool,
}

/// Diagnostics of one collected batch.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct BatchReport {
    pub batch: u64,
    pub episodes: usize,
    pub steps: usize,
    pub mean_reward: f64,
    pub update: [Option<UpdateStats>; 2],
}

/// Serialized full state of a run at a batch boundary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub params: RunParams,
    pub env_steps: u64,
    pub episodes: u64,
    pub batches: u64,
    pub eval_episodes: u64,
    pub bundles: Option<[PolicyBundle; 2]>,
    pub game: Option<CoordinationGame>,
    pub samplers: [Sampler; 2],
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut writer = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut writer, self)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }
}

/// Distribution state frozen for the duration of one batch.
struct PlanState {
    sampler_probs: [Vec<f64>; 2],
}

/// Everything decided about an episode before it is simulated.
#[derive(Debug, Clone)]
struct EpisodePlan {
    goals: [usize; 2],
    forced_aligned: bool,
    leader: Option<u8>,
    round: Option<RoundPlan>,
    scripted: Option<[ScriptedNav; 2]>,
}

/// Result of simulating one planned episode.
struct EpisodeOutput {
    plan: EpisodePlan,
    steps: usize,
    rewards: [f64; 2],
    arrivals: [Option<u8>; 2],
    rollouts: Option<[EpisodeRollout; 2]>,
}

/// A live, resumable run.
pub struct Runner {
    params: RunParams,
    space: GoalSpace,
    mode: ConditioningMode,
    bundles: Option<[PolicyBundle; 2]>,
    game: Option<CoordinationGame>,
    samplers: [Sampler; 2],
    env_steps: u64,
    episodes: u64,
    batches: u64,
    eval_episodes: u64,
    workers: usize,
}

fn resolve_workers(requested: usize) -> usize {
    if requested > 0 {
        return requested;
    }
    if let Ok(value) = std::env::var(WORKERS_ENV_VAR) {
        if let Ok(parsed) = value.trim().parse::<usize>() {
            if parsed > 0 {
                return parsed;
            }
        }
    }
    rayon::current_num_threads().max(1)
}

impl Runner {
    pub fn new(params: RunParams) -> Result<Self> {
        params.validate()?;
        let space = GoalSpace::new(params.world.num_landmarks, params.goal_filter)?;
        let mode = params.condition.conditioning_mode();
        let obs_dim = crate::env::observation_len(params.world.num_landmarks);
        let goal_dim = params.world.num_landmarks;
        let bundles = match params.policy {
            PolicyKind::Learned => {
                let make = |agent: usize| {
                    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
                    rng.set_stream(STREAM_POLICY_INIT[agent]);
                    PolicyBundle::new(obs_dim, goal_dim, mode, &params.train, &mut rng)
                };
                Some([make(0), make(1)])
            }
            PolicyKind::ScriptedOracle { .. } => None,
        };
        let game = if params.condition.uses_game() {
            Some(CoordinationGame::new(space.size(), params.game)?)
        } else {
            None
        };
        let samplers = match params.sampler {
            SamplerSpec::Uniform => [Sampler::uniform(&space), Sampler::uniform(&space)],
            SamplerSpec::LearningProgress { epsilon, window } => [
                Sampler::learning_progress(&space, epsilon, window)?,
                Sampler::learning_progress(&space, epsilon, window)?,
            ],
        };
        let workers = resolve_workers(params.workers);
        Ok(Runner {
            params,
            space,
            mode,
            bundles,
            game,
            samplers,
            env_steps: 0,
            episodes: 0,
            batches: 0,
            eval_episodes: 0,
            workers,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let mut runner = Runner::new(ck.params.clone())?;
        runner.env_steps = ck.env_steps;
        runner.episodes = ck.episodes;
        runner.batches = ck.batches;
        runner.eval_episodes = ck.eval_episodes;
        runner.bundles = ck.bundles;
        runner.game = ck.game;
        runner.samplers = ck.samplers;
        Ok(runner)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            params: self.params.clone(),
            env_steps: self.env_steps,
            episodes: self.episodes,
            batches: self.batches,
            eval_episodes: self.eval_episodes,
            bundles: self.bundles.clone(),
            game: self.game.clone(),
            samplers: self.samplers.clone(),
        }
    }

    pub fn params(&self) -> &RunParams {
        &self.params
    }

    pub fn space(&self) -> &GoalSpace {
        &self.space
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    pub fn batches(&self) -> u64 {
        self.batches
    }

    /// Overrides how many episodes each evaluation sweep plays per goal.
    pub fn set_eval_episodes_per_goal(&mut self, episodes: usize) {
        self.params.eval_episodes_per_goal = episodes;
    }

    /// Re-resolves the episode-wave width (0 = environment variable or
    /// thread count). Output never depends on it.
    pub fn set_workers(&mut self, workers: usize) {
        self.workers = resolve_workers(workers);
    }

    pub fn game(&self) -> Option<&CoordinationGame> {
        self.game.as_ref()
    }

    pub fn bundles(&self) -> Option<&[PolicyBundle; 2]> {
        self.bundles.as_ref()
    }

    /// Digest over everything training mutates: network parameters,
    /// coordination matrices, and sampler state. Evaluation must leave this
    /// unchanged.
    pub fn model_digest(&self) -> u64 {
        let mut bytes = Vec::new();
        if let Some(bundles) = &self.bundles {
            for b in bundles {
                bytes.extend_from_slice(&b.digest().to_le_bytes());
            }
        }
        if let Some(game) = &self.game {
            bytes.extend_from_slice(&serde_json::to_vec(game).expect("game serializes"));
        }
        bytes.extend_from_slice(&serde_json::to_vec(&self.samplers).expect("samplers serialize"));
        fnv1a64(&bytes)
    }

    fn stream_rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.params.seed);
        rng.set_stream(stream);
        rng
    }

    /// The environment state an episode index would start from; useful for
    /// verifying that placement is identical across conditions and phases.
    pub fn initial_env_state(&self, episode_index: u64) -> EnvState {
        let mut rng = self.stream_rng(STREAM_TRAIN_SIM + episode_index);
        let g = self.space.goal(0).clone();
        let mut state = env_reset(&self.params.world, [g.clone(), g], &mut rng);
        if self.params.solo {
            state.agents[1].done = true;
        }
        state
    }

    fn snapshot(&self) -> PlanState {
        PlanState {
            sampler_probs: [
                self.samplers[0].probabilities(),
                self.samplers[1].probabilities(),
            ],
        }
    }

    /// Decides goals, roles, and scripted targets for one training episode.
    /// Consumes only the episode's dedicated plan stream, so plans are
    /// reproducible regardless of scheduling. (Evaluation plans carry no
    /// randomness; see [`Runner::eval_plan`].)
    fn plan_episode(&self, index: u64, state: &PlanState) -> Result<EpisodePlan> {
        let mut rng = self.stream_rng(STREAM_TRAIN_PLAN + index);
        let (goals, forced, leader, round) = if let Some(game) = &self.game {
            let leader = assign_leader(&mut rng);
            let leader_goal = sample_index(&state.sampler_probs[leader], &mut rng);
            let round = game.plan_round(leader, leader_goal, &mut rng)?;
            let mut goals = [0usize; 2];
            goals[round.leader] = round.leader_goal;
            goals[round.follower] = round.follower_goal;
            (goals, false, Some(leader as u8), Some(round))
        } else if matches!(
            self.params.policy,
            PolicyKind::ScriptedOracle {
                risky_follower: true
            }
        ) {
            let leader = assign_leader(&mut rng);
            let leader_goal = sample_index(&state.sampler_probs[leader], &mut rng);
            let follower_goal = if self.space.goal(leader_goal).is_cooperative() {
                leader_goal
            } else {
                let bit = self.space.goal(leader_goal).set_bits()[0];
                let candidates: Vec<usize> = self
                    .space
                    .iter()
                    .filter(|(_, g)| g.is_cooperative() && g.contains(bit))
                    .map(|(i, _)| i)
                    .collect();
                candidates[rng.gen_range(0..candidates.len())]
            };
            let mut goals = [0usize; 2];
            goals[leader] = leader_goal;
            goals[1 - leader] = follower_goal;
            (goals, false, Some(leader as u8), None)
        } else {
            let fraction = self
                .params
                .condition
                .align_fraction(self.params.align_fraction);
            let forced = rng.gen::<f64>() < fraction;
            let goals = if forced {
                let g = rng.gen_range(0..self.space.size());
                [g, g]
            } else {
                [
                    sample_index(&state.sampler_probs[0], &mut rng),
                    sample_index(&state.sampler_probs[1], &mut rng),
                ]
            };
            (goals, forced, None, None)
        };
        let scripted = self.scripted_navs(&goals, leader, round.as_ref());
        Ok(EpisodePlan {
            goals,
            forced_aligned: forced,
            leader,
            round,
            scripted,
        })
    }

    fn scripted_navs(
        &self,
        goals: &[usize; 2],
        leader: Option<u8>,
        round: Option<&RoundPlan>,
    ) -> Option<[ScriptedNav; 2]> {
        match self.params.policy {
            PolicyKind::Learned => None,
            PolicyKind::ScriptedOracle { risky_follower } => {
                let g0 = self.space.goal(goals[0]);
                let g1 = self.space.goal(goals[1]);
                if risky_follower && round.is_none() {
                    if let Some(leader) = leader {
                        let leader = leader as usize;
                        let lg = self.space.goal(goals[leader]);
                        if !lg.is_cooperative() {
                            let fg = self.space.goal(goals[1 - leader]);
                            let mut navs =
                                [ScriptedNav::for_goal(g0, 0), ScriptedNav::for_goal(g1, 1)];
                            navs[leader] = ScriptedNav::for_goal(lg, leader);
                            navs[1 - leader] = ScriptedNav::complement_of(lg, fg);
                            return Some(navs);
                        }
                    }
                }
                Some([ScriptedNav::for_goal(g0, 0), ScriptedNav::for_goal(g1, 1)])
            }
        }
    }

    fn eval_plan(&self, goal: usize) -> EpisodePlan {
        let goals = [goal, goal];
        let scripted = self.scripted_navs(&goals, None, None);
        EpisodePlan {
            goals,
            forced_aligned: false,
            leader: None,
            round: None,
            scripted,
        }
    }

    pub fn budget_exhausted(&self) -> bool {
        match self.params.budget {
            Budget::EnvSteps(n) => self.env_steps >= n,
            Budget::Episodes(n) => self.episodes >= n,
            Budget::Updates(n) => self.batches >= n,
        }
    }

    fn simulate_wave(
        &self,
        jobs: Vec<(EpisodePlan, ChaCha8Rng)>,
        collect: bool,
    ) -> Vec<Result<EpisodeOutput>> {
        let world = &self.params.world;
        let space = &self.space;
        let bundles = self.bundles.as_ref();
        let mode = self.mode;
        let solo = self.params.solo;
        if jobs.len() > 1 {
            jobs.into_par_iter()
                .map(|(plan, mut rng)| {
                    run_episode(world, space, mode, bundles, &plan, &mut rng, collect, solo)
                })
                .collect()
        } else {
            jobs.into_iter()
                .map(|(plan, mut rng)| {
                    run_episode(world, space, mode, bundles, &plan, &mut rng, collect, solo)
                })
                .collect()
        }
    }

    fn consume_train_episode(
        &mut self,
        out: EpisodeOutput,
        buffers: &mut [RolloutBuffer; 2],
        sink: &mut dyn RecordSink,
    ) -> Result<usize> {
        let steps = out.steps;
        self.env_steps += steps as u64;
        let record = RunRecord {
            episode: self.episodes,
            phase: Phase::Train,
            env_steps: self.env_steps,
            batch: self.batches,
            goals: [
                self.space.goal(out.plan.goals[0]).bitstring(),
                self.space.goal(out.plan.goals[1]).bitstring(),
            ],
            forced_aligned: out.plan.forced_aligned,
            leader: out.plan.leader,
            message: out.plan.round.map(|r| r.message as u16),
            rewards: out.rewards,
            length: steps as u32,
            arrivals: out.arrivals,
        };
        sink.record(&record)?;
        self.episodes += 1;
        for agent in 0..NUM_AGENTS {
            if self.params.solo && agent == 1 {
                continue;
            }
            self.samplers[agent].record(out.plan.goals[agent], out.rewards[agent]);
        }
        if let (Some(game), Some(round)) = (&mut self.game, out.plan.round) {
            game.record_outcome(
                round.leader,
                round.leader_goal,
                round.message,
                out.rewards[round.leader],
            );
            game.record_outcome(
                round.follower,
                round.follower_goal,
                round.message,
                out.rewards[round.follower],
            );
        }
        if let Some(rollouts) = out.rollouts {
            for (buffer, rollout) in buffers.iter_mut().zip(rollouts) {
                buffer.push_episode(rollout);
            }
        }
        Ok(steps)
    }

    /// Collects one batch and applies the updates it triggers.
    pub fn run_one_batch(&mut self, sink: &mut dyn RecordSink) -> Result<BatchReport> {
        let plan_state = self.snapshot();
        let collect = matches!(self.params.policy, PolicyKind::Learned);
        let mut buffers = [RolloutBuffer::new(), RolloutBuffer::new()];
        let mut batch_steps = 0usize;
        let mut batch_episodes = 0usize;
        let mut reward_sum = 0.0;
        let batch_full = |steps: usize, episodes: usize, limit: BatchLimit| match limit {
            BatchLimit::Steps(n) => steps >= n,
            BatchLimit::Episodes(n) => episodes >= n,
        };
        while !batch_full(batch_steps, batch_episodes, self.params.batch) {
            let wave = match self.params.batch {
                BatchLimit::Episodes(n) => self.workers.min(n - batch_episodes).max(1),
                BatchLimit::Steps(_) => self.workers.max(1),
            };
            let mut jobs = Vec::with_capacity(wave);
            for offset in 0..wave {
                let index = self.episodes + offset as u64;
                let plan = self.plan_episode(index, &plan_state)?;
                let rng = self.stream_rng(STREAM_TRAIN_SIM + index);
                jobs.push((plan, rng));
            }
            let outputs = self.simulate_wave(jobs, collect);
            for out in outputs {
                let out = out?;
                if batch_full(batch_steps, batch_episodes, self.params.batch) {
                    // The batch boundary landed inside this wave; drop the
                    // overhang. Those episode indices are re-planned and
                    // re-simulated under the post-update state, exactly as a
                    // single-worker run would have produced them.
                    break;
                }
                reward_sum += out.rewards.iter().sum::<f64>();
                let steps = self.consume_train_episode(out, &mut buffers, sink)?;
                batch_steps += steps;
                batch_episodes += 1;
            }
        }

        let mut update = [None, None];
        if let Some(bundles) = &mut self.bundles {
            for agent in 0..NUM_AGENTS {
                if buffers[agent].num_steps() == 0 {
                    continue;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(self.params.seed);
                rng.set_stream(STREAM_UPDATE + 2 * self.batches + agent as u64);
                update[agent] = Some(ppo_update(
                    &mut bundles[agent],
                    &buffers[agent],
                    &self.params.train,
                    &mut rng,
                )?);
            }
        }
        if let Some(game) = &mut self.game {
            game.apply_update();
        }
        self.batches += 1;
        Ok(BatchReport {
            batch: self.batches,
            episodes: batch_episodes,
            steps: batch_steps,
            mean_reward: reward_sum / (batch_episodes.max(1) as f64 * NUM_AGENTS as f64),
            update,
        })
    }

    /// Sweeps every goal in the space with both agents assigned that goal.
    /// Consumes only evaluation RNG streams and the evaluation episode
    /// counter; model state is untouched.
    pub fn evaluate(&mut self, sink: &mut dyn RecordSink) -> Result<EvalSummary> {
        let per_goal_n = self.params.eval_episodes_per_goal;
        let active_agents = if self.params.solo { 1 } else { NUM_AGENTS };
        let mut per_goal = Vec::with_capacity(self.space.size());
        for goal_idx in 0..self.space.size() {
            let mut successes = 0u32;
            let mut reward_sum = 0.0;
            let mut length_sum = 0u64;
            let mut results: Vec<EpisodeOutput> = Vec::with_capacity(per_goal_n);
            while results.len() < per_goal_n {
                let wave = self.workers.min(per_goal_n - results.len()).max(1);
                let mut jobs = Vec::with_capacity(wave);
                for offset in 0..wave {
                    let index = self.eval_episodes + (results.len() + offset) as u64;
                    let plan = self.eval_plan(goal_idx);
                    let rng = self.stream_rng(STREAM_EVAL_SIM + index);
                    jobs.push((plan, rng));
                }
                for out in self.simulate_wave(jobs, false) {
                    results.push(out?);
                }
            }
            for out in results {
                let success = (0..active_agents).all(|a| out.rewards[a] > 0.0);
                successes += success as u32;
                reward_sum +=
                    out.rewards[..active_agents].iter().sum::<f64>() / active_agents as f64;
                length_sum += out.steps as u64;
                let record = RunRecord {
                    episode: self.eval_episodes,
                    phase: Phase::Eval,
                    env_steps: self.env_steps,
                    batch: self.batches,
                    goals: [
                        self.space.goal(out.plan.goals[0]).bitstring(),
                        self.space.goal(out.plan.goals[1]).bitstring(),
                    ],
                    forced_aligned: false,
                    leader: None,
                    message: None,
                    rewards: out.rewards,
                    length: out.steps as u32,
                    arrivals: out.arrivals,
                };
                sink.record(&record)?;
                self.eval_episodes += 1;
            }
            per_goal.push(GoalEval {
                goal: self.space.goal(goal_idx).bitstring(),
                episodes: per_goal_n as u32,
                success_rate: successes as f64 / per_goal_n as f64,
                mean_reward: reward_sum / per_goal_n as f64,
                mean_length: length_sum as f64 / per_goal_n as f64,
            });
        }
        let success_rate =
            per_goal.iter().map(|g| g.success_rate).sum::<f64>() / per_goal.len() as f64;
        let mean_reward =
            per_goal.iter().map(|g| g.mean_reward).sum::<f64>() / per_goal.len() as f64;
        Ok(EvalSummary {
            batches: self.batches,
            env_steps: self.env_steps,
            per_goal,
            success_rate,
            mean_reward,
        })
    }

    /// Trains to the budget, evaluating periodically (and always after the
    /// final batch), optionally checkpointing alongside each sweep.
    pub fn run(
        &mut self,
        sink: &mut dyn RecordSink,
        checkpoint_dir: Option<&Path>,
    ) -> Result<RunSummary> {
        let mut evals = Vec::new();
        let mut stopped_early = false;
        while !self.budget_exhausted() {
            self.run_one_batch(sink)?;
            let interval = self.params.eval_interval_batches;
            let due = interval > 0 && self.batches.is_multiple_of(interval as u64);
            let last = self.budget_exhausted();
            if due || last {
                let eval = self.evaluate(sink)?;
                let success = eval.success_rate;
                evals.push(eval);
                if let Some(dir) = checkpoint_dir {
                    std::fs::create_dir_all(dir)?;
                    self.checkpoint()
                        .save(&dir.join(format!("batch_{:06}.json", self.batches)))?;
                }
                if let Some(threshold) = self.params.stop_on_success {
                    if success >= threshold && !last {
                        stopped_early = true;
                        break;
                    }
                }
            }
        }
        Ok(RunSummary {
            env_steps: self.env_steps,
            episodes: self.episodes,
            batches: self.batches,
            evals,
            stopped_early,
        })
    }
}

/// Simulates one planned episode. With `collect`, per-step samples for both
/// live agents are returned for training.
#[allow(clippy::too_many_arguments)]
fn run_episode(
    world: &WorldConfig,
    space: &GoalSpace,
    mode: ConditioningMode,
    bundles: Option<&[PolicyBundle; 2]>,
    plan: &EpisodePlan,
    rng: &mut ChaCha8Rng,
    collect: bool,
    solo: bool,
) -> Result<EpisodeOutput> {
    let goals = [
        space.goal(plan.goals[0]).clone(),
        space.goal(plan.goals[1]).clone(),
    ];
    let mut state = env_reset(world, goals.clone(), rng);
    if solo {
        state.agents[1].done = true;
    }
    let mut rollouts = if collect {
        Some([EpisodeRollout::default(), EpisodeRollout::default()])
    } else {
        None
    };
    let mut rewards = [0.0; NUM_AGENTS];
    let mut arrivals = [None, None];
    loop {
        let live = [!state.agents[0].done, !state.agents[1].done];
        let obs = [observe(world, &state, 0), observe(world, &state, 1)];
        let mut actions = [Action::COAST; NUM_AGENTS];
        let mut samples = [None, None];
        for agent in 0..NUM_AGENTS {
            if !live[agent] {
                continue;
            }
            match (bundles, &plan.scripted) {
                (Some(bundles), _) => {
                    let input =
                        mode.build_policy_input(&obs[agent], &goals[agent], &goals[1 - agent]);
                    let sample = bundles[agent].act(&input, rng)?;
                    actions[agent] = sample.action;
                    samples[agent] = Some((input, sample));
                }
                (None, Some(navs)) => {
                    actions[agent] = navs[agent].act(world, &obs[agent]);
                }
                (None, None) => {
                    return Err(Error::InvalidConfig(
                        "episode has neither learned nor scripted controllers".into(),
                    ));
                }
            }
        }
        let out = env_step(world, &mut state, actions)?;
        if let (Some(rollouts), Some(bundles)) = (&mut rollouts, bundles) {
            for agent in 0..NUM_AGENTS {
                if let Some((policy_input, sample)) = samples[agent].take() {
                    let other = 1 - agent;
                    let other_action = live[other].then_some(actions[other]);
                    let value_input = mode.build_value_input(
                        &obs[agent],
                        &obs[other],
                        &goals[agent],
                        &goals[other],
                        other_action,
                    );
                    let value = bundles[agent].value_of(&value_input)?;
                    rollouts[agent].steps.push(StepSample {
                        policy_input,
                        value_input,
                        heads: sample.heads,
                        log_prob: sample.log_prob,
                        value,
                        reward: out.rewards[agent],
                    });
                }
            }
        }
        for agent in 0..NUM_AGENTS {
            rewards[agent] += out.rewards[agent];
            if out.newly_done[agent] {
                arrivals[agent] = covered_landmark(world, &state.agents[agent]).map(|l| l as u8);
            }
        }
        if out.episode_done {
            break;
        }
    }
    Ok(EpisodeOutput {
        plan: plan.clone(),
        steps: state.step_count,
        rewards,
        arrivals,
        rollouts,
    })
}
