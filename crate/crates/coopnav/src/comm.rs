//! The goal-coordination game.
//!
//! Before each episode one agent is named leader and the other follower. The
//! leader samples a one-shot message from a softmax over its goal's row of
//! its own goal-by-message matrix; the follower samples its episode goal
//! from a softmax over the received message's *column* of its own matrix.
//! Both agents bank `(goal, message, reward)` triples during a batch, and at
//! the batch boundary every visited cell moves toward the batch-mean reward
//! by an exponential moving average; unvisited cells stay untouched.
//!
//! Matrices start at zero, so the initial policy is uniform in both
//! directions and any structure is learned from reward alone.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{sample_index, softmax};
use crate::Result;

/// Constants of the coordination game.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GameConfig {
    pub num_messages: usize,
    /// Softmax temperature for both message and goal sampling.
    pub temperature: f64,
    /// EMA step size for batch updates.
    pub learning_rate: f64,
}

impl GameConfig {
    /// Reference constants: temperature 1/30, EMA rate 0.1, and a message
    /// alphabet nine symbols wider than the goal space (slack avoids the
    /// deadlocks that a square matrix invites; see the deadlock tests).
    pub fn for_goal_count(num_goals: usize) -> Self {
        GameConfig {
            num_messages: num_goals + 9,
            temperature: 1.0 / 30.0,
            learning_rate: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_messages == 0 {
            return Err(crate::Error::InvalidConfig(
                "game.num_messages must be positive".into(),
            ));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(crate::Error::InvalidConfig(format!(
                "game.temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.learning_rate) {
            return Err(crate::Error::InvalidConfig(format!(
                "game.learning_rate must lie in [0, 1], got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One agent's goal-by-message value table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommMatrix {
    values: Array2<f64>,
}

impl CommMatrix {
    pub fn zeros(num_goals: usize, num_messages: usize) -> Self {
        CommMatrix {
            values: Array2::zeros((num_goals, num_messages)),
        }
    }

    pub fn num_goals(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_messages(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Softmax over the goal's row: the leader's message distribution.
    pub fn message_probabilities(&self, goal: usize, temperature: f64) -> Result<Vec<f64>> {
        let row: Vec<f64> = self.values.row(goal).to_vec();
        softmax(&row, temperature)
    }

    /// Softmax over the message's column: the follower's goal distribution.
    pub fn goal_probabilities(&self, message: usize, temperature: f64) -> Result<Vec<f64>> {
        let col: Vec<f64> = self.values.column(message).to_vec();
        softmax(&col, temperature)
    }
}

/// Per-batch sums and visit counts, one cell per (goal, message) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BatchAccumulator {
    sum: Array2<f64>,
    count: Array2<u32>,
}

impl BatchAccumulator {
    fn zeros(num_goals: usize, num_messages: usize) -> Self {
        BatchAccumulator {
            sum: Array2::zeros((num_goals, num_messages)),
            count: Array2::zeros((num_goals, num_messages)),
        }
    }

    fn record(&mut self, goal: usize, message: usize, reward: f64) {
        self.sum[[goal, message]] += reward;
        self.count[[goal, message]] += 1;
    }

    fn reset(&mut self) {
        self.sum.fill(0.0);
        self.count.fill(0);
    }
}

/// Roles and draws for one episode of the game.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub leader: usize,
    pub follower: usize,
    pub leader_goal: usize,
    pub message: usize,
    pub follower_goal: usize,
}

/// Both agents' matrices plus their in-flight batch statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinationGame {
    config: GameConfig,
    matrices: [CommMatrix; 2],
    accumulators: [BatchAccumulator; 2],
}

impl CoordinationGame {
    pub fn new(num_goals: usize, config: GameConfig) -> Result<Self> {
        config.validate()?;
        if num_goals == 0 {
            return Err(crate::Error::InvalidConfig(
                "game needs at least one goal".into(),
            ));
        }
        Ok(CoordinationGame {
            config,
            matrices: [
                CommMatrix::zeros(num_goals, config.num_messages),
                CommMatrix::zeros(num_goals, config.num_messages),
            ],
            accumulators: [
                BatchAccumulator::zeros(num_goals, config.num_messages),
                BatchAccumulator::zeros(num_goals, config.num_messages),
            ],
        })
    }

    pub fn config(&self) -> &GameConfig {
        &self.config
    }

    pub fn matrix(&self, agent: usize) -> &CommMatrix {
        &self.matrices[agent]
    }

    /// Samples the message and the follower's induced goal for one episode,
    /// given the leader's role and goal. Draws exactly two values from `rng`
    /// in a fixed order (message first).
    pub fn plan_round(
        &self,
        leader: usize,
        leader_goal: usize,
        rng: &mut impl Rng,
    ) -> Result<RoundPlan> {
        let follower = 1 - leader;
        let t = self.config.temperature;
        let msg_probs = self.matrices[leader].message_probabilities(leader_goal, t)?;
        let message = sample_index(&msg_probs, rng);
        let goal_probs = self.matrices[follower].goal_probabilities(message, t)?;
        let follower_goal = sample_index(&goal_probs, rng);
        Ok(RoundPlan {
            leader,
            follower,
            leader_goal,
            message,
            follower_goal,
        })
    }

    /// Banks one agent's episode triple for the current batch. Leaders
    /// record their own goal, followers the goal the message induced; both
    /// record the same message and their own reward.
    pub fn record_outcome(&mut self, agent: usize, goal: usize, message: usize, reward: f64) {
        self.accumulators[agent].record(goal, message, reward);
    }

    /// Batch-boundary update: every visited cell moves toward its batch-mean
    /// reward, `v <- (1 - a) * v + a * mean`; unvisited cells are unchanged.
    /// Accumulators reset afterwards.
    pub fn apply_update(&mut self) {
        for (matrix, acc) in self.matrices.iter_mut().zip(&mut self.accumulators) {
            for ((idx, v), &n) in matrix.values.indexed_iter_mut().zip(acc.count.iter()) {
                if n > 0 {
                    let mean = acc.sum[idx] / n as f64;
                    *v = (1.0 - self.config.learning_rate) * *v + self.config.learning_rate * mean;
                }
            }
            acc.reset();
        }
    }

    /// Probability, under the current matrices, that a uniformly drawn
    /// leader goal is echoed back exactly by the follower, averaged over
    /// both role assignments. This is the induced-alignment summary used by
    /// the matrix diagnostics.
    pub fn echo_alignment(&self) -> Result<f64> {
        let g = self.matrices[0].num_goals();
        let t = self.config.temperature;
        let mut total = 0.0;
        for leader in 0..2 {
            let follower = 1 - leader;
            for goal in 0..g {
                let msg_probs = self.matrices[leader].message_probabilities(goal, t)?;
                for (m, &pm) in msg_probs.iter().enumerate() {
                    let goal_probs = self.matrices[follower].goal_probabilities(m, t)?;
                    total += pm * goal_probs[goal];
                }
            }
        }
        Ok(total / (2.0 * g as f64))
    }
}

/// Flips a fair coin for the leader index.
pub fn assign_leader(rng: &mut impl Rng) -> usize {
    rng.gen_range(0..2)
}
