//! TOML experiment configuration.
//!
//! A config file carries five optional sections — `[run]`, `[world]`,
//! `[train]`, `[game]`, `[sampler]` — each falling back to the reference
//! constants. Unknown keys are rejected so typos fail loudly. Resolution
//! fills every derived default (time limit, batch size, message-alphabet
//! width) and validates the result, producing concrete [`RunParams`] per
//! seed plus a canonical resolved form whose hash identifies the
//! experiment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::goals::{GoalFilter, GoalSpace};
use crate::nn::fnv1a64;
use crate::run::{BatchLimit, Budget, ConditionName, PolicyKind, RunParams, SamplerSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub condition: ConditionName,
    pub seeds: Vec<u64>,
    /// At most one budget key may be set; the default is five million
    /// environment steps.
    pub budget_env_steps: Option<u64>,
    pub budget_episodes: Option<u64>,
    pub budget_updates: Option<u64>,
    /// Episode-count batches (the message-game convention). Unset means
    /// step-count batches of `train.batch_size_steps`.
    pub batch_episodes: Option<usize>,
    pub align_fraction: f64,
    pub goal_filter: GoalFilter,
    pub eval_interval_batches: usize,
    pub eval_episodes_per_goal: usize,
    pub stop_on_success: Option<f64>,
    pub solo: bool,
    /// Replace learned policies with scripted navigation.
    pub scripted: bool,
    /// With `scripted`: followers answer individual-goal leaders with
    /// covering cooperative goals.
    pub risky_follower: bool,
    pub workers: usize,
    pub out_dir: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            condition: ConditionName::Independent,
            seeds: vec![0],
            budget_env_steps: None,
            budget_episodes: None,
            budget_updates: None,
            batch_episodes: None,
            align_fraction: 0.5,
            goal_filter: GoalFilter::All,
            eval_interval_batches: 10,
            eval_episodes_per_goal: 20,
            stop_on_success: None,
            solo: false,
            scripted: false,
            risky_follower: false,
            workers: 0,
            out_dir: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub num_landmarks: usize,
    pub width: f64,
    pub height: f64,
    pub contact_radius: f64,
    pub turn_rate: f64,
    pub drag: f64,
    pub force_gain: f64,
    pub max_speed: f64,
    /// Derived from the landmark count when unset (250 up to three
    /// landmarks, 500 beyond).
    pub time_limit: Option<usize>,
    pub beta: f64,
}

impl Default for WorldSection {
    fn default() -> Self {
        WorldSection {
            num_landmarks: 3,
            width: 200.0,
            height: 200.0,
            contact_radius: 10.0,
            turn_rate: 0.15,
            drag: 0.9,
            force_gain: 0.5,
            max_speed: 3.0,
            time_limit: None,
            beta: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatches: usize,
    /// Derived from the landmark count when unset (16500 up to three
    /// landmarks, 60000 beyond).
    pub batch_size_steps: Option<usize>,
    pub value_loss_coeff: f64,
    pub entropy_coeff: f64,
    pub hidden: Vec<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            gamma: 0.99,
            gae_lambda: 0.9,
            clip: 0.3,
            learning_rate: 3e-4,
            epochs: 8,
            minibatches: 8,
            batch_size_steps: None,
            value_loss_coeff: 1.0,
            entropy_coeff: 0.0,
            hidden: vec![64, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GameSection {
    /// Derived when unset: goal-space size plus nine.
    pub num_messages: Option<usize>,
    pub temperature: f64,
    pub learning_rate: f64,
}

impl Default for GameSection {
    fn default() -> Self {
        GameSection {
            num_messages: None,
            temperature: 1.0 / 30.0,
            learning_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Uniform,
    LearningProgress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub kind: SamplerKind,
    pub epsilon: f64,
    pub window: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            kind: SamplerKind::Uniform,
            epsilon: 0.1,
            window: 50,
        }
    }
}

/// A parsed experiment file; all sections optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub world: WorldSection,
    pub train: TrainSection,
    pub game: GameSection,
    pub sampler: SamplerSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("config parse error: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Fills every derived default, validates, and returns the concrete
    /// experiment.
    pub fn resolve(&self) -> Result<ResolvedExperiment> {
        let mut resolved = self.clone();
        let l = resolved.world.num_landmarks;
        resolved.world.time_limit =
            Some(
                resolved
                    .world
                    .time_limit
                    .unwrap_or(if l <= 3 { 250 } else { 500 }),
            );
        resolved.train.batch_size_steps = Some(
            resolved
                .train
                .batch_size_steps
                .unwrap_or(if l <= 3 { 16_500 } else { 60_000 }),
        );
        let space = GoalSpace::new(l, resolved.run.goal_filter)?;
        resolved.game.num_messages = Some(resolved.game.num_messages.unwrap_or(space.size() + 9));

        let budgets_set = [
            resolved.run.budget_env_steps.is_some(),
            resolved.run.budget_episodes.is_some(),
            resolved.run.budget_updates.is_some(),
        ]
        .iter()
        .filter(|b| **b)
        .count();
        if budgets_set > 1 {
            return Err(Error::InvalidConfig(
                "set at most one of run.budget_env_steps, run.budget_episodes, run.budget_updates"
                    .into(),
            ));
        }
        if resolved.run.budget_env_steps.is_none() && budgets_set == 0 {
            resolved.run.budget_env_steps = Some(5_000_000);
        }
        if resolved.run.seeds.is_empty() {
            return Err(Error::InvalidConfig("run.seeds must not be empty".into()));
        }
        if resolved.run.risky_follower && !resolved.run.scripted {
            return Err(Error::InvalidConfig(
                "run.risky_follower requires run.scripted".into(),
            ));
        }

        let experiment = ResolvedExperiment { config: resolved };
        // Surface parameter-level problems at resolution time.
        experiment
            .params_for_seed(experiment.config.run.seeds[0])?
            .validate()?;
        Ok(experiment)
    }
}

/// A fully materialized experiment: every derived default filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedExperiment {
    pub config: ExperimentConfig,
}

impl ResolvedExperiment {
    pub fn seeds(&self) -> &[u64] {
        &self.config.run.seeds
    }

    pub fn condition(&self) -> ConditionName {
        self.config.run.condition
    }

    pub fn out_dir(&self) -> &str {
        &self.config.run.out_dir
    }

    /// Concrete run parameters for one seed.
    pub fn params_for_seed(&self, seed: u64) -> Result<RunParams> {
        let c = &self.config;
        let world = crate::env::WorldConfig {
            width: c.world.width,
            height: c.world.height,
            num_landmarks: c.world.num_landmarks,
            contact_radius: c.world.contact_radius,
            turn_rate: c.world.turn_rate,
            drag: c.world.drag,
            force_gain: c.world.force_gain,
            max_speed: c.world.max_speed,
            time_limit: c.world.time_limit.expect("resolved config"),
            beta: c.world.beta,
        };
        let train = crate::ppo::TrainConfig {
            gamma: c.train.gamma,
            gae_lambda: c.train.gae_lambda,
            clip: c.train.clip,
            learning_rate: c.train.learning_rate,
            epochs: c.train.epochs,
            minibatches: c.train.minibatches,
            batch_size_steps: c.train.batch_size_steps.expect("resolved config"),
            value_loss_coeff: c.train.value_loss_coeff,
            entropy_coeff: c.train.entropy_coeff,
            hidden: c.train.hidden.clone(),
        };
        let game = crate::comm::GameConfig {
            num_messages: c.game.num_messages.expect("resolved config"),
            temperature: c.game.temperature,
            learning_rate: c.game.learning_rate,
        };
        let budget = if let Some(n) = c.run.budget_env_steps {
            Budget::EnvSteps(n)
        } else if let Some(n) = c.run.budget_episodes {
            Budget::Episodes(n)
        } else {
            Budget::Updates(c.run.budget_updates.expect("resolved config"))
        };
        let batch = match c.run.batch_episodes {
            Some(n) => BatchLimit::Episodes(n),
            None => BatchLimit::Steps(train.batch_size_steps),
        };
        let sampler = match c.sampler.kind {
            SamplerKind::Uniform => SamplerSpec::Uniform,
            SamplerKind::LearningProgress => SamplerSpec::LearningProgress {
                epsilon: c.sampler.epsilon,
                window: c.sampler.window,
            },
        };
        let policy = if c.run.scripted {
            PolicyKind::ScriptedOracle {
                risky_follower: c.run.risky_follower,
            }
        } else {
            PolicyKind::Learned
        };
        let params = RunParams {
            world,
            goal_filter: c.run.goal_filter,
            condition: c.run.condition,
            align_fraction: c.run.align_fraction,
            train,
            game,
            sampler,
            policy,
            solo: c.run.solo,
            seed,
            budget,
            batch,
            eval_interval_batches: c.run.eval_interval_batches,
            eval_episodes_per_goal: c.run.eval_episodes_per_goal,
            stop_on_success: c.run.stop_on_success,
            workers: c.run.workers,
        };
        params.validate()?;
        Ok(params)
    }

    /// Canonical TOML of the materialized config; what `resolved.toml`
    /// holds.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(&self.config)
            .map_err(|e| Error::InvalidConfig(format!("config serialize error: {e}")))
    }

    /// Stable digest of the resolved experiment (excluding nothing: seeds
    /// and output directory are part of the identity).
    pub fn config_hash(&self) -> Result<u64> {
        Ok(fnv1a64(self.to_toml_string()?.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_resolves_to_reference_defaults() {
        let resolved = ExperimentConfig::from_toml_str("")
            .unwrap()
            .resolve()
            .unwrap();
        let c = &resolved.config;
        assert_eq!(c.world.time_limit, Some(250));
        assert_eq!(c.train.batch_size_steps, Some(16_500));
        assert_eq!(c.game.num_messages, Some(15)); // 6 goals + 9
        assert_eq!(c.run.budget_env_steps, Some(5_000_000));
        let params = resolved.params_for_seed(3).unwrap();
        assert_eq!(params.seed, 3);
        assert_eq!(params.batch, BatchLimit::Steps(16_500));
        assert_eq!(params.budget, Budget::EnvSteps(5_000_000));
        assert_eq!(params.condition, ConditionName::Independent);
    }

    #[test]
    fn six_landmark_defaults_scale_up() {
        let text = "[world]\nnum_landmarks = 6\n";
        let resolved = ExperimentConfig::from_toml_str(text)
            .unwrap()
            .resolve()
            .unwrap();
        let c = &resolved.config;
        assert_eq!(c.world.time_limit, Some(500));
        assert_eq!(c.train.batch_size_steps, Some(60_000));
        assert_eq!(c.game.num_messages, Some(30)); // 21 goals + 9
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("[run]\ncondtion = \"ctde\"\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[wurld]\n").is_err());
    }

    #[test]
    fn at_most_one_budget() {
        let text = "[run]\nbudget_env_steps = 1000\nbudget_episodes = 10\n";
        assert!(ExperimentConfig::from_toml_str(text)
            .unwrap()
            .resolve()
            .is_err());
        let text = "[run]\nbudget_updates = 200\nbatch_episodes = 1000\n";
        let resolved = ExperimentConfig::from_toml_str(text)
            .unwrap()
            .resolve()
            .unwrap();
        let params = resolved.params_for_seed(0).unwrap();
        assert_eq!(params.budget, Budget::Updates(200));
        assert_eq!(params.batch, BatchLimit::Episodes(1000));
    }

    #[test]
    fn full_experiment_file_round_trips() {
        let text = r#"
[run]
condition = "goal_coordination_game"
seeds = [0, 1, 2]
budget_updates = 200
batch_episodes = 1000
scripted = true
eval_interval_batches = 0
out_dir = "runs/game"

[world]
num_landmarks = 6
beta = 4.0

[sampler]
kind = "learning_progress"
epsilon = 0.2
window = 25
"#;
        let resolved = ExperimentConfig::from_toml_str(text)
            .unwrap()
            .resolve()
            .unwrap();
        let params = resolved.params_for_seed(1).unwrap();
        assert_eq!(params.condition, ConditionName::GoalCoordinationGame);
        assert_eq!(
            params.policy,
            PolicyKind::ScriptedOracle {
                risky_follower: false
            }
        );
        assert_eq!(
            params.sampler,
            SamplerSpec::LearningProgress {
                epsilon: 0.2,
                window: 25
            }
        );
        assert_eq!(params.world.beta, 4.0);
        assert_eq!(params.game.num_messages, 30);
        // The resolved form is itself a valid config that resolves to the
        // same thing.
        let text2 = resolved.to_toml_string().unwrap();
        let again = ExperimentConfig::from_toml_str(&text2)
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(again.config, resolved.config);
        assert_eq!(
            again.config_hash().unwrap(),
            resolved.config_hash().unwrap()
        );
    }

    #[test]
    fn hash_tracks_semantic_changes() {
        let a = ExperimentConfig::from_toml_str("")
            .unwrap()
            .resolve()
            .unwrap();
        let b = ExperimentConfig::from_toml_str("[world]\nbeta = 4.0\n")
            .unwrap()
            .resolve()
            .unwrap();
        assert_ne!(a.config_hash().unwrap(), b.config_hash().unwrap());
    }

    #[test]
    fn risky_follower_requires_scripted() {
        let text = "[run]\nrisky_follower = true\n";
        assert!(ExperimentConfig::from_toml_str(text)
            .unwrap()
            .resolve()
            .is_err());
    }
}
