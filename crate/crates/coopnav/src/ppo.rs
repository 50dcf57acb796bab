//! Proximal policy optimization over the two-head action space.
//!
//! Each agent owns a policy network (six logits: two independent 3-way
//! categorical heads for the longitudinal and angular commands) and a value
//! network, both plain MLPs from [`crate::nn`]. Training is the standard
//! clipped-surrogate objective with generalized advantage estimation,
//! batch-level advantage normalization, and Adam.
//!
//! What each network sees is governed by a [`ConditioningMode`]; all modes
//! share one code path and differ only in how inputs are assembled, which
//! keeps "what information does this agent have" a pure data question.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Action;
use crate::goals::GoalVector;
use crate::nn::{log_softmax, sample_index, Adam, Gradients, Mlp};
use crate::{Error, Result};

/// Number of categorical action heads (longitudinal, angular).
pub const NUM_HEADS: usize = 2;
/// Policy output width: two heads of three logits each.
pub const POLICY_OUT: usize = NUM_HEADS * Action::CHOICES_PER_HEAD;

/// What the policy and value networks are conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    /// Policy and value both see own observation and own goal only.
    OwnGoal,
    /// Policy and value both see own observation plus *both* goals. This
    /// leaks the partner's goal into action selection itself.
    BothGoals,
    /// Decentralized policy (own observation, own goal); centralized value
    /// that additionally sees the partner's observation, the partner's goal,
    /// and the partner's action as two one-hot blocks. The agent's own
    /// action is deliberately excluded. A frozen partner contributes the
    /// do-nothing action.
    CtdeFull,
    /// Decentralized policy; value sees own observation plus both goals but
    /// no partner observation or action.
    CtdeGoalsOnly,
}

impl ConditioningMode {
    /// True when the partner's goal reaches the *policy* (not just the value
    /// function), breaking decentralized execution.
    pub fn policy_sees_other_goal(self) -> bool {
        matches!(self, ConditioningMode::BothGoals)
    }

    pub fn policy_input_dim(self, obs_dim: usize, goal_dim: usize) -> usize {
        if self.policy_sees_other_goal() {
            obs_dim + 2 * goal_dim
        } else {
            obs_dim + goal_dim
        }
    }

    pub fn value_input_dim(self, obs_dim: usize, goal_dim: usize) -> usize {
        match self {
            ConditioningMode::OwnGoal => obs_dim + goal_dim,
            ConditioningMode::BothGoals => obs_dim + 2 * goal_dim,
            ConditioningMode::CtdeFull => 2 * obs_dim + 2 * goal_dim + POLICY_OUT,
            ConditioningMode::CtdeGoalsOnly => obs_dim + 2 * goal_dim,
        }
    }

    pub fn build_policy_input(
        self,
        obs: &[f64],
        own_goal: &GoalVector,
        other_goal: &GoalVector,
    ) -> Vec<f64> {
        let mut out =
            Vec::with_capacity(self.policy_input_dim(obs.len(), own_goal.num_landmarks()));
        out.extend_from_slice(obs);
        own_goal.append_input(&mut out);
        if self.policy_sees_other_goal() {
            other_goal.append_input(&mut out);
        }
        out
    }

    /// Assembles the value-network input. `other_action` is the partner's
    /// action this step; `None` (partner frozen) encodes as the do-nothing
    /// action, which is what a frozen agent physically takes.
    pub fn build_value_input(
        self,
        obs: &[f64],
        other_obs: &[f64],
        own_goal: &GoalVector,
        other_goal: &GoalVector,
        other_action: Option<Action>,
    ) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.value_input_dim(obs.len(), own_goal.num_landmarks()));
        out.extend_from_slice(obs);
        match self {
            ConditioningMode::OwnGoal => {
                own_goal.append_input(&mut out);
            }
            ConditioningMode::BothGoals | ConditioningMode::CtdeGoalsOnly => {
                own_goal.append_input(&mut out);
                other_goal.append_input(&mut out);
            }
            ConditioningMode::CtdeFull => {
                out.extend_from_slice(other_obs);
                own_goal.append_input(&mut out);
                other_goal.append_input(&mut out);
                let heads = other_action.unwrap_or(Action::COAST).head_indices();
                for &head in heads.iter() {
                    for j in 0..Action::CHOICES_PER_HEAD {
                        out.push(if head == j { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        out
    }
}

/// Optimization constants for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    /// Clipping radius of the surrogate ratio.
    pub clip: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatches: usize,
    /// Environment steps collected per update.
    pub batch_size_steps: usize,
    pub value_loss_coeff: f64,
    pub entropy_coeff: f64,
    pub hidden: Vec<usize>,
}

impl TrainConfig {
    /// Reference constants: γ=0.99, λ=0.9, clip 0.3, Adam at 3e-4, 8 epochs
    /// of 8 minibatches, value coefficient 1, no entropy bonus, two tanh
    /// layers of 64. Batch size is 16500 steps for three landmarks and
    /// 60000 for larger worlds.
    pub fn for_landmarks(num_landmarks: usize) -> Self {
        TrainConfig {
            gamma: 0.99,
            gae_lambda: 0.9,
            clip: 0.3,
            learning_rate: 3e-4,
            epochs: 8,
            minibatches: 8,
            batch_size_steps: if num_landmarks <= 3 { 16_500 } else { 60_000 },
            value_loss_coeff: 1.0,
            entropy_coeff: 0.0,
            hidden: vec![64, 64],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::InvalidConfig(
                "train.gamma and train.gae_lambda must lie in [0, 1]".into(),
            ));
        }
        if !(self.clip.is_finite() && self.clip > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "train.clip must be positive, got {}",
                self.clip
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(
                "train.learning_rate must be positive".into(),
            ));
        }
        if self.epochs == 0 || self.minibatches == 0 || self.batch_size_steps == 0 {
            return Err(Error::InvalidConfig(
                "train.epochs, train.minibatches, and train.batch_size_steps must be positive"
                    .into(),
            ));
        }
        if self.value_loss_coeff < 0.0 || self.entropy_coeff < 0.0 {
            return Err(Error::InvalidConfig(
                "train loss coefficients must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One agent's policy/value networks plus optimizer state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyBundle {
    pub mode: ConditioningMode,
    pub policy: Mlp,
    pub value: Mlp,
    pub policy_opt: Adam,
    pub value_opt: Adam,
}

/// A sampled action with its bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActSample {
    pub action: Action,
    pub heads: [usize; NUM_HEADS],
    pub log_prob: f64,
}

impl PolicyBundle {
    /// Fresh networks. The policy's output layer is scaled down by 100x so
    /// the initial action distribution is near-uniform regardless of input.
    pub fn new(
        obs_dim: usize,
        goal_dim: usize,
        mode: ConditioningMode,
        cfg: &TrainConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let mut policy_sizes = vec![mode.policy_input_dim(obs_dim, goal_dim)];
        policy_sizes.extend_from_slice(&cfg.hidden);
        policy_sizes.push(POLICY_OUT);
        let mut value_sizes = vec![mode.value_input_dim(obs_dim, goal_dim)];
        value_sizes.extend_from_slice(&cfg.hidden);
        value_sizes.push(1);
        let policy = Mlp::with_output_scale(&policy_sizes, 0.01, rng);
        let value = Mlp::new(&value_sizes, rng);
        let policy_opt = Adam::new(&policy, cfg.learning_rate);
        let value_opt = Adam::new(&value, cfg.learning_rate);
        PolicyBundle {
            mode,
            policy,
            value,
            policy_opt,
            value_opt,
        }
    }

    /// Samples both heads and returns the summed log-probability.
    pub fn act(&self, policy_input: &[f64], rng: &mut impl Rng) -> Result<ActSample> {
        let logits = self.policy.forward(policy_input)?;
        let mut heads = [0usize; NUM_HEADS];
        let mut log_prob = 0.0;
        for h in 0..NUM_HEADS {
            let lp = log_softmax(&logits[3 * h..3 * h + 3]);
            let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
            let a = sample_index(&probs, rng);
            heads[h] = a;
            log_prob += lp[a];
        }
        Ok(ActSample {
            action: Action::from_head_indices(heads[0], heads[1]),
            heads,
            log_prob,
        })
    }

    pub fn value_of(&self, value_input: &[f64]) -> Result<f64> {
        Ok(self.value.forward(value_input)?[0])
    }

    /// Stable digest over both networks' parameters; optimizer state is
    /// excluded (it cannot change unless the parameters do).
    pub fn digest(&self) -> u64 {
        let mut bytes = Vec::with_capacity(16);
        bytes.extend_from_slice(&self.policy.state_digest().to_le_bytes());
        bytes.extend_from_slice(&self.value.state_digest().to_le_bytes());
        crate::nn::fnv1a64(&bytes)
    }
}

/// One environment step as stored for training.
#[derive(Debug, Clone)]
pub struct StepSample {
    pub policy_input: Vec<f64>,
    pub value_input: Vec<f64>,
    pub heads: [usize; NUM_HEADS],
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
}

/// All steps one agent took in one episode, in order.
#[derive(Debug, Clone, Default)]
pub struct EpisodeRollout {
    pub steps: Vec<StepSample>,
}

/// Episodes collected since the last update, per agent.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub episodes: Vec<EpisodeRollout>,
}

impl RolloutBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }

    pub fn push_episode(&mut self, episode: EpisodeRollout) {
        if !episode.steps.is_empty() {
            self.episodes.push(episode);
        }
    }

    pub fn clear(&mut self) {
        self.episodes.clear();
    }
}

/// Generalized advantage estimation for one episode, bootstrapping zero
/// value past the terminal step (episodes here always end, either by payout
/// or the time limit). Returns `(advantages, returns)` with
/// `returns = advantages + values`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(rewards.len(), values.len(), "compute_gae: length mismatch");
    let n = rewards.len();
    let mut advantages = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_value - values[t];
        running = delta + gamma * lambda * running;
        advantages[t] = running;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    (advantages, returns)
}

/// A rollout buffer flattened into contiguous arrays, with advantages
/// already normalized to zero mean and unit variance over the whole batch.
#[derive(Debug, Clone)]
pub struct FlatBatch {
    pub policy_inputs: Array2<f64>,
    pub value_inputs: Array2<f64>,
    pub heads: Vec<[usize; NUM_HEADS]>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl FlatBatch {
    pub fn from_buffer(buffer: &RolloutBuffer, gamma: f64, lambda: f64) -> Result<Self> {
        let n = buffer.num_steps();
        if n == 0 {
            return Err(Error::InsufficientData {
                op: "FlatBatch::from_buffer",
                details: "empty rollout buffer".into(),
            });
        }
        let first = &buffer.episodes[0].steps[0];
        let (dp, dv) = (first.policy_input.len(), first.value_input.len());
        let mut policy_inputs = Array2::zeros((n, dp));
        let mut value_inputs = Array2::zeros((n, dv));
        let mut heads = Vec::with_capacity(n);
        let mut old_log_probs = Vec::with_capacity(n);
        let mut advantages = Vec::with_capacity(n);
        let mut returns = Vec::with_capacity(n);
        let mut row = 0;
        for episode in &buffer.episodes {
            let rewards: Vec<f64> = episode.steps.iter().map(|s| s.reward).collect();
            let values: Vec<f64> = episode.steps.iter().map(|s| s.value).collect();
            let (adv, ret) = compute_gae(&rewards, &values, gamma, lambda);
            for (step, (a, r)) in episode.steps.iter().zip(adv.iter().zip(&ret)) {
                policy_inputs
                    .row_mut(row)
                    .iter_mut()
                    .zip(&step.policy_input)
                    .for_each(|(dst, &src)| *dst = src);
                value_inputs
                    .row_mut(row)
                    .iter_mut()
                    .zip(&step.value_input)
                    .for_each(|(dst, &src)| *dst = src);
                heads.push(step.heads);
                old_log_probs.push(step.log_prob);
                advantages.push(*a);
                returns.push(*r);
                row += 1;
            }
        }
        let mean = advantages.iter().sum::<f64>() / n as f64;
        let var = advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        for a in &mut advantages {
            *a = (*a - mean) / (std + 1e-8);
        }
        Ok(FlatBatch {
            policy_inputs,
            value_inputs,
            heads,
            old_log_probs,
            advantages,
            returns,
        })
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }
}

/// Per-minibatch diagnostics.
#[derive(Debug, Clone, Copy, Default)]
pub struct MinibatchStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub samples: usize,
}

fn head_log_probs(logits: &Array2<f64>, row: usize, head: usize) -> [f64; 3] {
    let base = 3 * head;
    let slice = [
        logits[[row, base]],
        logits[[row, base + 1]],
        logits[[row, base + 2]],
    ];
    let lp = log_softmax(&slice);
    [lp[0], lp[1], lp[2]]
}

/// Gradients of the total PPO loss over one minibatch, for the policy and
/// value networks respectively.
///
/// The loss is `mean(-min(r·A, clip(r)·A)) + c_v · mean((V - R)²) -
/// c_h · mean(H)` with `r` the likelihood ratio against the stored
/// log-probabilities and `H` the summed entropy of both heads. Logit
/// gradients go through the unclipped branch exactly when it attains the
/// minimum, matching the subgradient a finite-difference check sees away
/// from ties.
pub fn minibatch_gradients(
    policy: &Mlp,
    value: &Mlp,
    batch: &FlatBatch,
    indices: &[usize],
    cfg: &TrainConfig,
) -> (Gradients, Gradients, MinibatchStats) {
    let m = indices.len();
    assert!(m > 0, "minibatch_gradients: empty index set");
    let px = batch.policy_inputs.select(Axis(0), indices);
    let vx = batch.value_inputs.select(Axis(0), indices);
    let pcache = policy.forward_batch_cached(&px);
    let vcache = value.forward_batch_cached(&vx);
    let mut dlogits = Array2::zeros((m, POLICY_OUT));
    let mut dvalues = Array2::zeros((m, 1));
    let mut stats = MinibatchStats {
        samples: m,
        ..Default::default()
    };
    let mf = m as f64;
    for (i, &k) in indices.iter().enumerate() {
        let mut new_lp = 0.0;
        let mut lps = [[0.0; 3]; NUM_HEADS];
        for h in 0..NUM_HEADS {
            lps[h] = head_log_probs(pcache.output(), i, h);
            new_lp += lps[h][batch.heads[k][h]];
        }
        let ratio = (new_lp - batch.old_log_probs[k]).exp();
        let adv = batch.advantages[k];
        let surr_raw = ratio * adv;
        let surr_clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * adv;
        stats.policy_loss -= surr_raw.min(surr_clipped);
        if (ratio - 1.0).abs() > cfg.clip {
            stats.clip_fraction += 1.0;
        }
        let coef = if surr_raw <= surr_clipped {
            adv * ratio
        } else {
            0.0
        };
        for h in 0..NUM_HEADS {
            let head_entropy: f64 = lps[h].iter().map(|&lp| -lp.exp() * lp).sum();
            stats.entropy += head_entropy;
            for j in 0..3 {
                let p = lps[h][j].exp();
                let onehot = if batch.heads[k][h] == j { 1.0 } else { 0.0 };
                let mut g = coef * (p - onehot);
                if cfg.entropy_coeff != 0.0 {
                    g += cfg.entropy_coeff * p * (lps[h][j] + head_entropy);
                }
                dlogits[[i, 3 * h + j]] = g / mf;
            }
        }
        let v = vcache.output()[[i, 0]];
        let diff = v - batch.returns[k];
        stats.value_loss += diff * diff;
        dvalues[[i, 0]] = cfg.value_loss_coeff * 2.0 * diff / mf;
    }
    stats.policy_loss /= mf;
    stats.value_loss /= mf;
    stats.entropy /= mf;
    stats.clip_fraction /= mf;
    let policy_grads = policy.backward_batch(&pcache, &dlogits);
    let value_grads = value.backward_batch(&vcache, &dvalues);
    (policy_grads, value_grads, stats)
}

/// The scalar PPO loss over a minibatch; the quantity
/// [`minibatch_gradients`] differentiates. Used by gradient checks.
pub fn total_loss(
    policy: &Mlp,
    value: &Mlp,
    batch: &FlatBatch,
    indices: &[usize],
    cfg: &TrainConfig,
) -> f64 {
    let m = indices.len() as f64;
    let px = batch.policy_inputs.select(Axis(0), indices);
    let vx = batch.value_inputs.select(Axis(0), indices);
    let logits = policy
        .forward_batch(&px)
        .expect("total_loss: policy forward failed");
    let values = value
        .forward_batch(&vx)
        .expect("total_loss: value forward failed");
    let mut loss = 0.0;
    for (i, &k) in indices.iter().enumerate() {
        let mut new_lp = 0.0;
        let mut ent = 0.0;
        for h in 0..NUM_HEADS {
            let lp = head_log_probs(&logits, i, h);
            new_lp += lp[batch.heads[k][h]];
            ent += lp.iter().map(|&l| -l.exp() * l).sum::<f64>();
        }
        let ratio = (new_lp - batch.old_log_probs[k]).exp();
        let adv = batch.advantages[k];
        let surr = (ratio * adv).min(ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * adv);
        let diff = values[[i, 0]] - batch.returns[k];
        loss += -surr + cfg.value_loss_coeff * diff * diff - cfg.entropy_coeff * ent;
    }
    loss / m
}

/// Aggregated statistics of one full update.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub num_steps: usize,
}

/// Runs the full PPO update on one agent's buffer: flatten and normalize,
/// then `epochs` passes over freshly shuffled minibatches, stepping Adam on
/// both networks per minibatch. Statistics are sample-weighted means over
/// all minibatches processed.
pub fn ppo_update(
    bundle: &mut PolicyBundle,
    buffer: &RolloutBuffer,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<UpdateStats> {
    let batch = FlatBatch::from_buffer(buffer, cfg.gamma, cfg.gae_lambda)?;
    let n = batch.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut totals = UpdateStats {
        num_steps: n,
        ..Default::default()
    };
    let mut weighted = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for k in 0..cfg.minibatches {
            let start = k * n / cfg.minibatches;
            let end = (k + 1) * n / cfg.minibatches;
            if start == end {
                continue;
            }
            let idx = &order[start..end];
            let (pg, vg, st) = minibatch_gradients(&bundle.policy, &bundle.value, &batch, idx, cfg);
            bundle.policy_opt.step(&mut bundle.policy, &pg);
            bundle.value_opt.step(&mut bundle.value, &vg);
            totals.policy_loss += st.policy_loss * st.samples as f64;
            totals.value_loss += st.value_loss * st.samples as f64;
            totals.entropy += st.entropy * st.samples as f64;
            totals.clip_fraction += st.clip_fraction * st.samples as f64;
            weighted += st.samples;
        }
    }
    let w = weighted as f64;
    totals.policy_loss /= w;
    totals.value_loss /= w;
    totals.entropy /= w;
    totals.clip_fraction /= w;
    Ok(totals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn goal_pair(l: usize) -> (GoalVector, GoalVector) {
        (
            GoalVector::individual(l, 0),
            GoalVector::cooperative(l, 1, 2),
        )
    }

    #[test]
    fn conditioning_dims_cover_all_modes() {
        let (obs, goal) = (16, 6);
        use ConditioningMode::*;
        assert_eq!(OwnGoal.policy_input_dim(obs, goal), 22);
        assert_eq!(OwnGoal.value_input_dim(obs, goal), 22);
        assert_eq!(BothGoals.policy_input_dim(obs, goal), 28);
        assert_eq!(BothGoals.value_input_dim(obs, goal), 28);
        assert_eq!(CtdeFull.policy_input_dim(obs, goal), 22);
        assert_eq!(CtdeFull.value_input_dim(obs, goal), 2 * 16 + 2 * 6 + 6);
        assert_eq!(CtdeGoalsOnly.policy_input_dim(obs, goal), 22);
        assert_eq!(CtdeGoalsOnly.value_input_dim(obs, goal), 28);
    }

    #[test]
    fn policy_input_ignores_partner_goal_except_in_both_goals_mode() {
        let obs: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        let (own, other_a) = goal_pair(4);
        let other_b = GoalVector::individual(4, 3);
        for mode in [
            ConditioningMode::OwnGoal,
            ConditioningMode::CtdeFull,
            ConditioningMode::CtdeGoalsOnly,
        ] {
            let a = mode.build_policy_input(&obs, &own, &other_a);
            let b = mode.build_policy_input(&obs, &own, &other_b);
            assert_eq!(
                a, b,
                "{mode:?} policy input must not depend on the partner goal"
            );
        }
        let a = ConditioningMode::BothGoals.build_policy_input(&obs, &own, &other_a);
        let b = ConditioningMode::BothGoals.build_policy_input(&obs, &own, &other_b);
        assert_ne!(a, b);
    }

    #[test]
    fn ctde_value_input_encodes_partner_action_with_coast_fallback() {
        let obs: Vec<f64> = vec![0.25; 8];
        let other_obs: Vec<f64> = vec![0.75; 8];
        let (own, other) = goal_pair(4);
        let mode = ConditioningMode::CtdeFull;
        let with_coast =
            mode.build_value_input(&obs, &other_obs, &own, &other, Some(Action::COAST));
        let frozen = mode.build_value_input(&obs, &other_obs, &own, &other, None);
        assert_eq!(
            with_coast, frozen,
            "a frozen partner reads as the do-nothing action"
        );
        let moving =
            mode.build_value_input(&obs, &other_obs, &own, &other, Some(Action::new(1, -1)));
        assert_ne!(with_coast, moving);
        // The trailing six entries are the two one-hot blocks.
        let tail = &moving[moving.len() - 6..];
        assert_eq!(tail, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn gae_matches_an_explicit_discounted_sum() {
        let rewards = [1.0, 0.0, 2.0, -0.5];
        let values = [0.5, -0.2, 0.3, 0.1];
        let (gamma, lambda) = (0.9, 0.8);
        let (adv, ret) = compute_gae(&rewards, &values, gamma, lambda);
        // Independent formulation: A_t = Σ_k (γλ)^k δ_{t+k}.
        let n = rewards.len();
        for t in 0..n {
            let mut expect = 0.0;
            for k in 0..(n - t) {
                let nv = if t + k + 1 < n {
                    values[t + k + 1]
                } else {
                    0.0
                };
                let delta = rewards[t + k] + gamma * nv - values[t + k];
                expect += (gamma * lambda).powi(k as i32) * delta;
            }
            assert!(
                (adv[t] - expect).abs() < 1e-12,
                "t={t}: {} vs {expect}",
                adv[t]
            );
            assert!((ret[t] - (adv[t] + values[t])).abs() < 1e-15);
        }
    }

    #[test]
    fn undiscounted_gae_lambda_one_is_monte_carlo_minus_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..50 {
            let n = rng.gen_range(1..40);
            let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (adv, ret) = compute_gae(&rewards, &values, 1.0, 1.0);
            for t in 0..n {
                let mc: f64 = rewards[t..].iter().sum();
                assert!((adv[t] - (mc - values[t])).abs() < 1e-9);
                assert!((ret[t] - mc).abs() < 1e-9);
            }
        }
    }

    /// Builds a realistic synthetic batch around a bundle: actions sampled
    /// from the policy, stored log-probs perturbed so ratios spread around 1
    /// and both clip branches occur.
    fn synthetic_batch(
        bundle: &PolicyBundle,
        n: usize,
        dp: usize,
        dv: usize,
        rng: &mut ChaCha8Rng,
    ) -> RolloutBuffer {
        let mut buffer = RolloutBuffer::new();
        let mut episode = EpisodeRollout::default();
        for _ in 0..n {
            let policy_input: Vec<f64> = (0..dp).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let value_input: Vec<f64> = (0..dv).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let sample = bundle.act(&policy_input, rng).unwrap();
            episode.steps.push(StepSample {
                policy_input,
                value_input,
                heads: sample.heads,
                log_prob: sample.log_prob + rng.gen_range(-0.4..0.4),
                value: rng.gen_range(-0.5..0.5),
                reward: rng.gen_range(-1.0..1.0),
            });
            if episode.steps.len() == 7 {
                buffer.push_episode(std::mem::take(&mut episode));
            }
        }
        buffer.push_episode(episode);
        buffer
    }

    /// Largest distance from any sample's ratio to a clip kink; instances
    /// too close to a kink are skipped by the gradient check.
    fn min_kink_distance(bundle: &PolicyBundle, batch: &FlatBatch, clip: f64) -> f64 {
        let logits = bundle.policy.forward_batch(&batch.policy_inputs).unwrap();
        let mut min_dist = f64::INFINITY;
        for k in 0..batch.len() {
            let mut new_lp = 0.0;
            for h in 0..NUM_HEADS {
                let lp = head_log_probs(&logits, k, h);
                new_lp += lp[batch.heads[k][h]];
            }
            let ratio = (new_lp - batch.old_log_probs[k]).exp();
            min_dist = min_dist
                .min((ratio - (1.0 - clip)).abs())
                .min((ratio - (1.0 + clip)).abs());
        }
        min_dist
    }

    #[test]
    fn analytic_gradients_match_central_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let mut accepted = 0;
        let mut attempts = 0;
        while accepted < 20 {
            attempts += 1;
            assert!(attempts < 80, "too many near-kink instances skipped");
            let mut cfg = TrainConfig::for_landmarks(3);
            cfg.hidden = vec![8, 6];
            cfg.entropy_coeff = if accepted % 2 == 0 { 0.0 } else { 0.02 };
            let mut bundle =
                PolicyBundle::new(4, 3, ConditioningMode::CtdeGoalsOnly, &cfg, &mut rng);
            // Move off the near-uniform init so probabilities are generic.
            for l in 0..bundle.policy.layer_count() {
                bundle
                    .policy
                    .weight_mut(l)
                    .mapv_inplace(|w| w + 0.3 * (w * 997.0).sin());
            }
            let dp = bundle.policy.input_dim();
            let dv = bundle.value.input_dim();
            let buffer = synthetic_batch(&bundle, 12, dp, dv, &mut rng);
            let batch = FlatBatch::from_buffer(&buffer, cfg.gamma, cfg.gae_lambda).unwrap();
            if min_kink_distance(&bundle, &batch, cfg.clip) < 1e-3 {
                continue;
            }
            accepted += 1;
            let indices: Vec<usize> = (0..batch.len()).collect();
            let (pg, vg, _) =
                minibatch_gradients(&bundle.policy, &bundle.value, &batch, &indices, &cfg);
            // Probe a spread of parameters in both networks.
            for trial in 0..30 {
                let on_policy = trial % 2 == 0;
                let (net, grads): (&Mlp, &Gradients) = if on_policy {
                    (&bundle.policy, &pg)
                } else {
                    (&bundle.value, &vg)
                };
                let layer = rng.gen_range(0..net.layer_count());
                let (rows, cols) = net.weight(layer).dim();
                let (r, c) = (rng.gen_range(0..rows), rng.gen_range(0..cols));
                let analytic = grads.dw[layer][[r, c]];
                let mut probe = bundle.clone();
                let target = if on_policy {
                    &mut probe.policy
                } else {
                    &mut probe.value
                };
                let w0 = target.weight(layer)[[r, c]];
                let h = 1e-6 * w0.abs().max(1.0);
                target.weight_mut(layer)[[r, c]] = w0 + h;
                let up = total_loss(&probe.policy, &probe.value, &batch, &indices, &cfg);
                let target = if on_policy {
                    &mut probe.policy
                } else {
                    &mut probe.value
                };
                target.weight_mut(layer)[[r, c]] = w0 - h;
                let down = total_loss(&probe.policy, &probe.value, &batch, &indices, &cfg);
                let numeric = (up - down) / (2.0 * h);
                let err = (analytic - numeric).abs();
                let scale = analytic.abs().max(numeric.abs()).max(1e-4);
                assert!(
                    err / scale < 1e-4,
                    "grad mismatch ({}, layer {layer}, [{r},{c}]): analytic {analytic:e} vs numeric {numeric:e}",
                    if on_policy { "policy" } else { "value" },
                );
            }
        }
    }

    #[test]
    fn update_is_deterministic_given_the_rng() {
        let mut cfg = TrainConfig::for_landmarks(3);
        cfg.hidden = vec![8];
        cfg.epochs = 2;
        cfg.minibatches = 3;
        let mut init_rng = ChaCha8Rng::seed_from_u64(63);
        let bundle = PolicyBundle::new(6, 3, ConditioningMode::OwnGoal, &cfg, &mut init_rng);
        let mut data_rng = ChaCha8Rng::seed_from_u64(64);
        let buffer = synthetic_batch(
            &bundle,
            40,
            bundle.policy.input_dim(),
            bundle.value.input_dim(),
            &mut data_rng,
        );

        let run = |seed: u64| {
            let mut b = bundle.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let stats = ppo_update(&mut b, &buffer, &cfg, &mut rng).unwrap();
            (b.digest(), stats.policy_loss, stats.value_loss)
        };
        let (d1, p1, v1) = run(9);
        let (d2, p2, v2) = run(9);
        assert_eq!(d1, d2);
        assert_eq!(p1, p2);
        assert_eq!(v1, v2);
        let (d3, _, _) = run(10);
        assert_ne!(
            d1, d3,
            "different shuffles must traverse different minibatches"
        );
    }

    #[test]
    fn update_shifts_probability_toward_rewarded_actions() {
        let mut cfg = TrainConfig::for_landmarks(3);
        cfg.hidden = vec![16];
        cfg.epochs = 4;
        cfg.minibatches = 2;
        cfg.learning_rate = 3e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let mut bundle = PolicyBundle::new(4, 3, ConditioningMode::OwnGoal, &cfg, &mut rng);
        let input: Vec<f64> = vec![0.3, -0.2, 0.8, 0.1, 1.0, 0.0, 0.0];

        let prob_of = |b: &PolicyBundle, heads: [usize; 2]| {
            let logits = b.policy.forward(&input).unwrap();
            let p0 = log_softmax(&logits[0..3])[heads[0]].exp();
            let p1 = log_softmax(&logits[3..6])[heads[1]].exp();
            p0 * p1
        };
        let before = prob_of(&bundle, [2, 0]);

        // Single-step episodes; only action (2, 0) pays.
        let mut buffer = RolloutBuffer::new();
        for _ in 0..200 {
            let sample = bundle.act(&input, &mut rng).unwrap();
            let reward = if sample.heads == [2, 0] { 1.0 } else { 0.0 };
            buffer.push_episode(EpisodeRollout {
                steps: vec![StepSample {
                    policy_input: input.clone(),
                    value_input: input.clone(),
                    heads: sample.heads,
                    log_prob: sample.log_prob,
                    value: 0.0,
                    reward,
                }],
            });
        }
        for _ in 0..3 {
            ppo_update(&mut bundle, &buffer, &cfg, &mut rng).unwrap();
        }
        let after = prob_of(&bundle, [2, 0]);
        assert!(
            after > before + 0.05,
            "P(rewarded action) should rise: {before:.4} -> {after:.4}"
        );
    }

    #[test]
    fn fresh_policy_is_near_uniform_and_act_is_consistent() {
        let cfg = TrainConfig::for_landmarks(3);
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let bundle = PolicyBundle::new(16, 6, ConditioningMode::OwnGoal, &cfg, &mut rng);
        let input: Vec<f64> = (0..22).map(|i| (i as f64 * 0.37).sin()).collect();
        let logits = bundle.policy.forward(&input).unwrap();
        for h in 0..2 {
            let lp = log_softmax(&logits[3 * h..3 * h + 3]);
            let ent: f64 = lp.iter().map(|&l| -l.exp() * l).sum();
            assert!(
                ent > 3f64.ln() - 1e-3,
                "head {h} entropy {ent} far from uniform"
            );
        }
        // exp(log_prob) equals the product of the two head probabilities.
        for _ in 0..50 {
            let s = bundle.act(&input, &mut rng).unwrap();
            let p0 = log_softmax(&logits[0..3])[s.heads[0]].exp();
            let p1 = log_softmax(&logits[3..6])[s.heads[1]].exp();
            assert!((s.log_prob.exp() - p0 * p1).abs() < 1e-12);
            assert_eq!(s.action.head_indices(), s.heads);
        }
    }

    #[test]
    fn empty_buffer_is_rejected() {
        let cfg = TrainConfig::for_landmarks(3);
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let mut bundle = PolicyBundle::new(4, 3, ConditioningMode::OwnGoal, &cfg, &mut rng);
        let buffer = RolloutBuffer::new();
        assert!(matches!(
            ppo_update(&mut bundle, &buffer, &cfg, &mut rng),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn train_config_validation() {
        let mut cfg = TrainConfig::for_landmarks(6);
        assert_eq!(cfg.batch_size_steps, 60_000);
        cfg.validate().unwrap();
        cfg.gamma = 1.2;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::for_landmarks(3);
        assert_eq!(cfg.batch_size_steps, 16_500);
        cfg.minibatches = 0;
        assert!(cfg.validate().is_err());
    }
}
