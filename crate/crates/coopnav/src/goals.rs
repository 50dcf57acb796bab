//! Goal vectors, the canonical goal space, goal samplers, and the alignment
//! controller.
//!
//! A goal is an L-bit vector over the landmarks with exactly one bit set (an
//! *individual* goal: the landmark must be visited by at least one agent) or
//! exactly two bits set (a *cooperative* goal: both landmarks must be covered
//! simultaneously). The canonical ordering puts the L individual goals first
//! (by bit index), then the L·(L−1)/2 cooperative goals in lexicographic bit
//! order, so the full space has `L + L(L−1)/2` entries.

use std::collections::VecDeque;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// An L-bit goal with one (individual) or two (cooperative) bits set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GoalVector {
    bits: Vec<bool>,
}

impl GoalVector {
    /// Individual goal: visit landmark `landmark`.
    pub fn individual(num_landmarks: usize, landmark: usize) -> Self {
        assert!(
            landmark < num_landmarks,
            "individual goal: landmark {landmark} out of range {num_landmarks}"
        );
        let mut bits = vec![false; num_landmarks];
        bits[landmark] = true;
        GoalVector { bits }
    }

    /// Cooperative goal: cover landmarks `a` and `b` simultaneously.
    pub fn cooperative(num_landmarks: usize, a: usize, b: usize) -> Self {
        assert!(
            a < num_landmarks && b < num_landmarks && a != b,
            "cooperative goal: bad landmark pair ({a}, {b}) for {num_landmarks} landmarks"
        );
        let mut bits = vec![false; num_landmarks];
        bits[a] = true;
        bits[b] = true;
        GoalVector { bits }
    }

    pub fn num_landmarks(&self) -> usize {
        self.bits.len()
    }

    pub fn is_cooperative(&self) -> bool {
        self.bits.iter().filter(|&&b| b).count() == 2
    }

    /// Indices of the set bits, ascending.
    pub fn set_bits(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn contains(&self, landmark: usize) -> bool {
        self.bits.get(landmark).copied().unwrap_or(false)
    }

    /// True when every bit of `other` is also set here.
    pub fn is_superset_of(&self, other: &GoalVector) -> bool {
        self.bits.len() == other.bits.len()
            && other.bits.iter().zip(&self.bits).all(|(&o, &s)| !o || s)
    }

    /// Serialized form, e.g. `"100100"` for landmarks {0, 3} of six.
    pub fn bitstring(&self) -> String {
        self.bits
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect()
    }

    /// Parses a bitstring; the result must have one or two bits set.
    pub fn from_bitstring(s: &str) -> Result<Self> {
        let mut bits = Vec::with_capacity(s.len());
        for c in s.chars() {
            match c {
                '0' => bits.push(false),
                '1' => bits.push(true),
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "goal bitstring {s:?} contains invalid character {other:?}"
                    )))
                }
            }
        }
        let set = bits.iter().filter(|&&b| b).count();
        if bits.is_empty() || !(1..=2).contains(&set) {
            return Err(Error::InvalidConfig(format!(
                "goal bitstring {s:?} must set exactly one or two bits, has {set}"
            )));
        }
        Ok(GoalVector { bits })
    }

    /// Appends the bits as 0.0/1.0 features to a network input buffer.
    pub fn append_input(&self, out: &mut Vec<f64>) {
        out.extend(self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }));
    }
}

impl std::fmt::Display for GoalVector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.bitstring())
    }
}

/// Which part of the goal space a run draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalFilter {
    All,
    CooperativeOnly,
    IndividualOnly,
}

impl GoalFilter {
    pub fn as_str(self) -> &'static str {
        match self {
            GoalFilter::All => "all",
            GoalFilter::CooperativeOnly => "cooperative_only",
            GoalFilter::IndividualOnly => "individual_only",
        }
    }
}

impl std::fmt::Display for GoalFilter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for GoalFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(GoalFilter::All),
            "cooperative_only" => Ok(GoalFilter::CooperativeOnly),
            "individual_only" => Ok(GoalFilter::IndividualOnly),
            _ => Err(Error::InvalidConfig(format!("unknown goal filter '{s}'"))),
        }
    }
}

/// The enumerated goal space for `L` landmarks, optionally filtered.
///
/// Indices are positions in the canonical order restricted to the filter, so
/// with [`GoalFilter::All`] the individual goals occupy `[0, L)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalSpace {
    num_landmarks: usize,
    filter: GoalFilter,
    goals: Vec<GoalVector>,
}

impl GoalSpace {
    pub fn new(num_landmarks: usize, filter: GoalFilter) -> Result<Self> {
        if num_landmarks < 2 {
            return Err(Error::InvalidConfig(format!(
                "goal space needs at least 2 landmarks, got {num_landmarks}"
            )));
        }
        let mut goals = Vec::new();
        if filter != GoalFilter::CooperativeOnly {
            for i in 0..num_landmarks {
                goals.push(GoalVector::individual(num_landmarks, i));
            }
        }
        if filter != GoalFilter::IndividualOnly {
            for a in 0..num_landmarks {
                for b in (a + 1)..num_landmarks {
                    goals.push(GoalVector::cooperative(num_landmarks, a, b));
                }
            }
        }
        Ok(GoalSpace {
            num_landmarks,
            filter,
            goals,
        })
    }

    /// The unfiltered space of all `L + L(L−1)/2` goals.
    pub fn full(num_landmarks: usize) -> Result<Self> {
        Self::new(num_landmarks, GoalFilter::All)
    }

    pub fn num_landmarks(&self) -> usize {
        self.num_landmarks
    }

    pub fn filter(&self) -> GoalFilter {
        self.filter
    }

    pub fn size(&self) -> usize {
        self.goals.len()
    }

    pub fn goal(&self, index: usize) -> &GoalVector {
        &self.goals[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &GoalVector)> {
        self.goals.iter().enumerate()
    }

    pub fn index_of(&self, goal: &GoalVector) -> Option<usize> {
        self.goals.iter().position(|g| g == goal)
    }

    /// One uniform draw over the whole (filtered) space.
    pub fn sample_uniform(&self, rng: &mut dyn RngCore) -> usize {
        rng.gen_range(0..self.goals.len())
    }
}

/// `p_i = ε/K + (1−ε)·|LP_i| / Σ_j |LP_j|`, falling back to uniform over K
/// when every learning-progress magnitude is zero.
pub fn lp_probabilities(epsilon: f64, abs_lp: &[f64]) -> Vec<f64> {
    let k = abs_lp.len() as f64;
    let total: f64 = abs_lp.iter().sum();
    abs_lp
        .iter()
        .map(|&m| {
            let focused = if total > 0.0 { m / total } else { 1.0 / k };
            epsilon / k + (1.0 - epsilon) * focused
        })
        .collect()
}

/// Per-goal state backing [`Sampler::LearningProgress`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct LpGoalState {
    /// Most recent rewards, capped at the window length.
    recent: VecDeque<f64>,
    /// Competence (trailing mean) after each episode, capped at window + 1
    /// entries so learning progress can span a full window.
    competence: VecDeque<f64>,
}

impl LpGoalState {
    fn record(&mut self, reward: f64, window: usize) {
        self.recent.push_back(reward);
        if self.recent.len() > window {
            self.recent.pop_front();
        }
        let mean = self.recent.iter().sum::<f64>() / self.recent.len() as f64;
        self.competence.push_back(mean);
        if self.competence.len() > window + 1 {
            self.competence.pop_front();
        }
    }

    /// Difference between the newest competence and the competence a full
    /// window ago; zero until enough points exist.
    fn learning_progress(&self, window: usize) -> f64 {
        if self.competence.len() == window + 1 {
            self.competence.back().unwrap() - self.competence.front().unwrap()
        } else {
            0.0
        }
    }
}

/// Absolute-learning-progress goal sampler.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LpSampler {
    epsilon: f64,
    window: usize,
    per_goal: Vec<LpGoalState>,
}

impl LpSampler {
    pub fn new(num_goals: usize, epsilon: f64, window: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::InvalidConfig(format!(
                "lp epsilon must lie in [0, 1], got {epsilon}"
            )));
        }
        if window == 0 {
            return Err(Error::InvalidConfig("lp window must be positive".into()));
        }
        Ok(LpSampler {
            epsilon,
            window,
            per_goal: vec![LpGoalState::default(); num_goals],
        })
    }

    pub fn record(&mut self, goal: usize, reward: f64) {
        let window = self.window;
        self.per_goal[goal].record(reward, window);
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let abs: Vec<f64> = self
            .per_goal
            .iter()
            .map(|s| s.learning_progress(self.window).abs())
            .collect();
        lp_probabilities(self.epsilon, &abs)
    }
}

/// A per-agent goal sampler: the training distribution each agent draws its
/// own goals from. Samplers only ever observe that agent's own outcomes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Sampler {
    Uniform { num_goals: usize },
    LearningProgress(LpSampler),
}

impl Sampler {
    pub fn uniform(space: &GoalSpace) -> Self {
        Sampler::Uniform {
            num_goals: space.size(),
        }
    }

    pub fn learning_progress(space: &GoalSpace, epsilon: f64, window: usize) -> Result<Self> {
        Ok(Sampler::LearningProgress(LpSampler::new(
            space.size(),
            epsilon,
            window,
        )?))
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> usize {
        match self {
            Sampler::Uniform { num_goals } => rng.gen_range(0..*num_goals),
            Sampler::LearningProgress(lp) => {
                crate::nn::sample_index(&lp.probabilities(), &mut &mut *rng)
            }
        }
    }

    /// Feeds back the sampling agent's own episode reward for `goal`.
    pub fn record(&mut self, goal: usize, reward: f64) {
        if let Sampler::LearningProgress(lp) = self {
            lp.record(goal, reward);
        }
    }

    pub fn probabilities(&self) -> Vec<f64> {
        match self {
            Sampler::Uniform { num_goals } => vec![1.0 / *num_goals as f64; *num_goals],
            Sampler::LearningProgress(lp) => lp.probabilities(),
        }
    }
}

/// Outcome of one goal assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GoalAssignment {
    pub goals: [usize; 2],
    /// True when the controller forced both agents onto one uniform draw.
    pub forced_aligned: bool,
}

/// Interpolates between independent per-agent sampling and centralized
/// assignment: with probability `fraction` one uniform draw over the whole
/// space is given to both agents, otherwise each agent samples its own goal.
///
/// `fraction = 0` is fully independent sampling; `fraction = 1` is the
/// centralized condition. Both are this same code path.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AlignmentController {
    fraction: f64,
}

impl AlignmentController {
    pub fn new(fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidConfig(format!(
                "alignment fraction must lie in [0, 1], got {fraction}"
            )));
        }
        Ok(AlignmentController { fraction })
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    pub fn assign(
        &self,
        space: &GoalSpace,
        samplers: &[Sampler; 2],
        rng: &mut dyn RngCore,
    ) -> GoalAssignment {
        let forced = rng.gen::<f64>() < self.fraction;
        if forced {
            let g = space.sample_uniform(rng);
            GoalAssignment {
                goals: [g, g],
                forced_aligned: true,
            }
        } else {
            GoalAssignment {
                goals: [samplers[0].sample(rng), samplers[1].sample(rng)],
                forced_aligned: false,
            }
        }
    }
}
