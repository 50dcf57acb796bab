//! The cooperative landmarks world.
//!
//! Two agents move in a bounded rectangular room whose walls carry `L`
//! evenly spaced landmarks. Motion is unicycle-style with momentum: discrete
//! longitudinal and angular commands in {-1, 0, +1} drive speed and heading.
//! Each agent carries a goal over the landmarks (see [`crate::goals`]): an
//! individual goal pays `1/beta` when its landmark is covered by *anyone*, a
//! cooperative goal pays `1` when both its landmarks are covered in the same
//! step. On reward the agent freezes: it stops acting but remains physically
//! present and keeps counting toward landmark coverage.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::goals::GoalVector;
use crate::{Error, Result};

pub const NUM_AGENTS: usize = 2;
/// Entities in an observation before the landmarks: four walls + other agent.
pub const FIXED_ENTITIES: usize = 5;

/// Geometry, kinematics, and reward constants for one world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub width: f64,
    pub height: f64,
    pub num_landmarks: usize,
    /// An agent covers a landmark when within this distance of it.
    pub contact_radius: f64,
    /// Heading change per step per unit of angular command, radians.
    pub turn_rate: f64,
    /// Multiplicative speed retention per step.
    pub drag: f64,
    /// Speed gained per step per unit of longitudinal command.
    pub force_gain: f64,
    /// Speed magnitude cap.
    pub max_speed: f64,
    /// Steps before an episode terminates regardless of progress.
    pub time_limit: usize,
    /// Individual-goal rewards are `1/beta`; cooperative rewards are `1`.
    pub beta: f64,
}

impl WorldConfig {
    /// The reference world: a 200x200 room, contact radius 10, turn rate
    /// 0.15, drag 0.9, force gain 0.5, speed cap 3, and a time limit of 250
    /// steps for three landmarks or 500 for larger layouts.
    pub fn for_landmarks(num_landmarks: usize) -> Self {
        WorldConfig {
            width: 200.0,
            height: 200.0,
            num_landmarks,
            contact_radius: 10.0,
            turn_rate: 0.15,
            drag: 0.9,
            force_gain: 0.5,
            max_speed: 3.0,
            time_limit: if num_landmarks <= 3 { 250 } else { 500 },
            beta: 2.0,
        }
    }

    pub fn diagonal(&self) -> f64 {
        self.width.hypot(self.height)
    }

    /// Landmarks evenly spaced along the room perimeter, counterclockwise
    /// from the origin corner: bottom, right, top, then left wall.
    pub fn landmark_positions(&self) -> Vec<[f64; 2]> {
        let (w, h) = (self.width, self.height);
        let perimeter = 2.0 * (w + h);
        (0..self.num_landmarks)
            .map(|k| {
                let mut s = k as f64 * perimeter / self.num_landmarks as f64;
                if s < w {
                    return [s, 0.0];
                }
                s -= w;
                if s < h {
                    return [w, s];
                }
                s -= h;
                if s < w {
                    return [w - s, h];
                }
                s -= w;
                [0.0, h - s]
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("width", self.width),
            ("height", self.height),
            ("contact_radius", self.contact_radius),
            ("turn_rate", self.turn_rate),
            ("force_gain", self.force_gain),
            ("max_speed", self.max_speed),
            ("beta", self.beta),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "world.{name} must be positive, got {v}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.drag) {
            return Err(Error::InvalidConfig(format!(
                "world.drag must lie in [0, 1), got {}",
                self.drag
            )));
        }
        if self.time_limit == 0 {
            return Err(Error::InvalidConfig(
                "world.time_limit must be positive".into(),
            ));
        }
        if self.num_landmarks < 2 {
            return Err(Error::InvalidConfig(format!(
                "world.num_landmarks must be at least 2, got {}",
                self.num_landmarks
            )));
        }
        // No single position may cover two landmarks at once; otherwise
        // cooperative goals would stop requiring two agents.
        let pos = self.landmark_positions();
        for a in 0..pos.len() {
            for b in (a + 1)..pos.len() {
                let d = (pos[a][0] - pos[b][0]).hypot(pos[a][1] - pos[b][1]);
                if d <= 2.0 * self.contact_radius {
                    return Err(Error::InvalidConfig(format!(
                        "landmarks {a} and {b} are {d:.2} apart, closer than twice the contact radius"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One discrete control: longitudinal thrust and turn command, each -1/0/+1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    longitudinal: i8,
    angular: i8,
}

impl Action {
    /// Values each command head can take.
    pub const CHOICES_PER_HEAD: usize = 3;
    /// The do-nothing action; also what a frozen agent effectively takes.
    pub const COAST: Action = Action {
        longitudinal: 0,
        angular: 0,
    };

    pub fn new(longitudinal: i8, angular: i8) -> Self {
        assert!(
            (-1..=1).contains(&longitudinal) && (-1..=1).contains(&angular),
            "action commands must be -1, 0, or +1, got ({longitudinal}, {angular})"
        );
        Action {
            longitudinal,
            angular,
        }
    }

    /// Maps categorical head indices (0, 1, 2) to commands (-1, 0, +1).
    pub fn from_head_indices(longitudinal: usize, angular: usize) -> Self {
        assert!(longitudinal < 3 && angular < 3, "head index out of range");
        Action {
            longitudinal: longitudinal as i8 - 1,
            angular: angular as i8 - 1,
        }
    }

    pub fn head_indices(&self) -> [usize; 2] {
        [
            (self.longitudinal + 1) as usize,
            (self.angular + 1) as usize,
        ]
    }

    pub fn longitudinal(&self) -> f64 {
        self.longitudinal as f64
    }

    pub fn angular(&self) -> f64 {
        self.angular as f64
    }
}

/// Pose and termination status of one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub pos: [f64; 2],
    /// Radians, wrapped to [0, 2π).
    pub heading: f64,
    /// Signed scalar speed along the heading.
    pub speed: f64,
    /// Set once the agent's goal paid out; frozen thereafter.
    pub done: bool,
}

/// Full episode state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub agents: [AgentState; NUM_AGENTS],
    pub goals: [GoalVector; NUM_AGENTS],
    pub step_count: usize,
}

/// Per-step outcome of [`env_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub rewards: [f64; NUM_AGENTS],
    /// True only on the step an agent's goal first paid out.
    pub newly_done: [bool; NUM_AGENTS],
    pub dones: [bool; NUM_AGENTS],
    pub episode_done: bool,
}

/// Wraps an angle to [-π, π).
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// Samples a fresh episode: agents placed uniformly without touching any
/// landmark, headings uniform, at rest, with the given goals.
pub fn env_reset(
    cfg: &WorldConfig,
    goals: [GoalVector; NUM_AGENTS],
    rng: &mut impl Rng,
) -> EnvState {
    for g in &goals {
        assert_eq!(
            g.num_landmarks(),
            cfg.num_landmarks,
            "goal width must match the world's landmark count"
        );
    }
    let landmarks = cfg.landmark_positions();
    fn place(cfg: &WorldConfig, landmarks: &[[f64; 2]], rng: &mut impl Rng) -> [f64; 2] {
        loop {
            let pos = [
                rng.gen_range(0.0..=cfg.width),
                rng.gen_range(0.0..=cfg.height),
            ];
            let clear = landmarks
                .iter()
                .all(|lm| (pos[0] - lm[0]).hypot(pos[1] - lm[1]) > cfg.contact_radius);
            if clear {
                return pos;
            }
        }
    }
    let agents = [(); NUM_AGENTS].map(|_| AgentState {
        pos: place(cfg, &landmarks, rng),
        heading: rng.gen_range(0.0..std::f64::consts::TAU),
        speed: 0.0,
        done: false,
    });
    EnvState {
        agents,
        goals,
        step_count: 0,
    }
}

/// True when every landmark set in `goal` has at least one agent (frozen or
/// not) within the contact radius, all in the current step.
pub fn goal_satisfied(cfg: &WorldConfig, state: &EnvState, goal: &GoalVector) -> bool {
    let landmarks = cfg.landmark_positions();
    goal.set_bits().iter().all(|&lm| {
        state.agents.iter().any(|a| {
            (a.pos[0] - landmarks[lm][0]).hypot(a.pos[1] - landmarks[lm][1]) <= cfg.contact_radius
        })
    })
}

/// Index of the landmark the agent currently covers, if any. Landmark
/// spacing guarantees at most one.
pub fn covered_landmark(cfg: &WorldConfig, agent: &AgentState) -> Option<usize> {
    cfg.landmark_positions()
        .iter()
        .position(|lm| (agent.pos[0] - lm[0]).hypot(agent.pos[1] - lm[1]) <= cfg.contact_radius)
}

/// Advances the world one step.
///
/// Both live agents move first (heading, then speed with drag and clamping,
/// then position clamped to the walls); afterwards every live agent's goal is
/// checked against the *post-move* configuration, so two agents completing a
/// cooperative goal are rewarded in the same step. Frozen agents ignore their
/// actions. Stepping past the time limit is an error.
pub fn env_step(
    cfg: &WorldConfig,
    state: &mut EnvState,
    actions: [Action; NUM_AGENTS],
) -> Result<StepOutcome> {
    if state.step_count >= cfg.time_limit {
        return Err(Error::EpisodeTerminated {
            step: state.step_count,
            limit: cfg.time_limit,
        });
    }
    for (agent, action) in state.agents.iter_mut().zip(actions) {
        if agent.done {
            continue;
        }
        agent.heading =
            (agent.heading + action.angular() * cfg.turn_rate).rem_euclid(std::f64::consts::TAU);
        agent.speed = (cfg.drag * agent.speed + cfg.force_gain * action.longitudinal())
            .clamp(-cfg.max_speed, cfg.max_speed);
        agent.pos[0] = (agent.pos[0] + agent.speed * agent.heading.cos()).clamp(0.0, cfg.width);
        agent.pos[1] = (agent.pos[1] + agent.speed * agent.heading.sin()).clamp(0.0, cfg.height);
    }
    state.step_count += 1;

    let mut rewards = [0.0; NUM_AGENTS];
    let mut newly_done = [false; NUM_AGENTS];
    for i in 0..NUM_AGENTS {
        if state.agents[i].done {
            continue;
        }
        if goal_satisfied(cfg, state, &state.goals[i]) {
            rewards[i] = if state.goals[i].is_cooperative() {
                1.0
            } else {
                1.0 / cfg.beta
            };
            newly_done[i] = true;
        }
    }
    for (agent, done) in state.agents.iter_mut().zip(newly_done) {
        if done {
            agent.done = true;
        }
    }
    let dones = [state.agents[0].done, state.agents[1].done];
    let episode_done = (dones[0] && dones[1]) || state.step_count >= cfg.time_limit;
    Ok(StepOutcome {
        rewards,
        newly_done,
        dones,
        episode_done,
    })
}

/// Observation length for a world with `num_landmarks` landmarks.
pub fn observation_len(num_landmarks: usize) -> usize {
    2 * (FIXED_ENTITIES + num_landmarks)
}

/// Offset of landmark `k`'s (distance, angle) pair within an observation.
pub fn landmark_obs_offset(k: usize) -> usize {
    2 * (FIXED_ENTITIES + k)
}

/// Egocentric observation for one agent: for each entity, its distance
/// normalized by the room diagonal and its relative bearing mapped affinely
/// from [-π, π) to [0, 1), so an entity dead ahead reads 0.5.
///
/// Entity order: the perpendicular foot points on the left, top, right, and
/// bottom walls, then the other agent, then the landmarks in index order.
pub fn observe(cfg: &WorldConfig, state: &EnvState, agent_idx: usize) -> Vec<f64> {
    let me = &state.agents[agent_idx];
    let other = &state.agents[1 - agent_idx];
    let diag = cfg.diagonal();
    let mut out = Vec::with_capacity(observation_len(cfg.num_landmarks));
    let mut push_entity = |target: [f64; 2]| {
        let (dx, dy) = (target[0] - me.pos[0], target[1] - me.pos[1]);
        let dist = dx.hypot(dy);
        let bearing = wrap_angle(dy.atan2(dx) - me.heading);
        out.push(dist / diag);
        out.push((bearing + std::f64::consts::PI) / std::f64::consts::TAU);
    };
    push_entity([0.0, me.pos[1]]); // left wall
    push_entity([me.pos[0], cfg.height]); // top wall
    push_entity([cfg.width, me.pos[1]]); // right wall
    push_entity([me.pos[0], 0.0]); // bottom wall
    push_entity(other.pos);
    for lm in cfg.landmark_positions() {
        push_entity(lm);
    }
    out
}
