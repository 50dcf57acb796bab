//! Scripted greedy navigation.
//!
//! A [`ScriptedNav`] drives one agent straight at a chosen landmark using
//! only the agent's own observation vector: it decodes the landmark's
//! relative bearing, turns toward it, and throttles only while roughly
//! aligned (momentum plus the turn-rate cap would otherwise produce wide
//! orbits around the target). Scripted controllers serve as behavioral
//! upper-bound references and as the actors inside oracle runs.

use crate::env::{landmark_obs_offset, Action, WorldConfig};
use crate::goals::GoalVector;

/// Largest heading error, in radians, at which the controller still thrusts.
const THRUST_CONE: f64 = 1.0;

/// A controller committed to one target landmark for an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScriptedNav {
    target: usize,
}

impl ScriptedNav {
    pub fn toward(target: usize) -> Self {
        ScriptedNav { target }
    }

    /// Picks this agent's landmark for a shared goal: the sole landmark of
    /// an individual goal, or a fixed split of a cooperative pair (agent 0
    /// takes the lower-indexed landmark, agent 1 the higher). The split lets
    /// two scripted agents complete any cooperative goal without talking.
    pub fn for_goal(goal: &GoalVector, agent_idx: usize) -> Self {
        let bits = goal.set_bits();
        let target = match bits.len() {
            1 => bits[0],
            2 => bits[agent_idx.min(1)],
            n => panic!("goals carry 1 or 2 landmarks, got {n}"),
        };
        ScriptedNav { target }
    }

    /// Target for a follower answering an individual-goal leader with a
    /// cooperative superset goal: the landmark the leader is *not* covering.
    pub fn complement_of(leader_goal: &GoalVector, follower_goal: &GoalVector) -> Self {
        let leader_bits = leader_goal.set_bits();
        assert_eq!(leader_bits.len(), 1, "leader goal must be individual");
        let target = follower_goal
            .set_bits()
            .into_iter()
            .find(|&b| b != leader_bits[0])
            .expect("follower goal must contain a landmark beyond the leader's");
        ScriptedNav { target }
    }

    pub fn target(&self) -> usize {
        self.target
    }

    /// Greedy command from the agent's own observation.
    pub fn act(&self, cfg: &WorldConfig, obs: &[f64]) -> Action {
        let angle_norm = obs[landmark_obs_offset(self.target) + 1];
        let delta = (angle_norm - 0.5) * std::f64::consts::TAU;
        // Dead band of half a turn step avoids oscillating across zero.
        let angular = if delta > cfg.turn_rate / 2.0 {
            1
        } else if delta < -cfg.turn_rate / 2.0 {
            -1
        } else {
            0
        };
        let longitudinal = if delta.abs() < THRUST_CONE { 1 } else { 0 };
        Action::new(longitudinal, angular)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{env_reset, env_step, observe, WorldConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn goal_splits_are_deterministic_and_disjoint() {
        let coop = GoalVector::cooperative(6, 2, 5);
        assert_eq!(ScriptedNav::for_goal(&coop, 0).target(), 2);
        assert_eq!(ScriptedNav::for_goal(&coop, 1).target(), 5);
        let solo = GoalVector::individual(6, 4);
        assert_eq!(ScriptedNav::for_goal(&solo, 0).target(), 4);
        assert_eq!(ScriptedNav::for_goal(&solo, 1).target(), 4);
    }

    #[test]
    fn complement_picks_the_unshared_landmark() {
        let leader = GoalVector::individual(3, 0);
        let follower = GoalVector::cooperative(3, 0, 2);
        assert_eq!(ScriptedNav::complement_of(&leader, &follower).target(), 2);
        let follower = GoalVector::cooperative(3, 1, 0);
        assert_eq!(ScriptedNav::complement_of(&leader, &follower).target(), 1);
    }

    #[test]
    fn turn_command_points_toward_target() {
        let cfg = WorldConfig::for_landmarks(3);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let goals = [
            GoalVector::from_bitstring("001").unwrap(),
            GoalVector::from_bitstring("010").unwrap(),
        ];
        let mut s = env_reset(&cfg, goals, &mut rng);
        s.agents[0].pos = [100.0, 100.0];
        let lm = cfg.landmark_positions()[2];
        let bearing = (lm[1] - 100.0).atan2(lm[0] - 100.0);
        let nav = ScriptedNav::toward(2);

        s.agents[0].heading = bearing + 1.2; // target off to the right
        let act = nav.act(&cfg, &observe(&cfg, &s, 0));
        assert_eq!(act.angular(), -1.0);
        assert_eq!(act.longitudinal(), 0.0, "no thrust while badly misaligned");

        s.agents[0].heading = bearing - 0.5; // off to the left, within cone
        let act = nav.act(&cfg, &observe(&cfg, &s, 0));
        assert_eq!(act.angular(), 1.0);
        assert_eq!(act.longitudinal(), 1.0);

        s.agents[0].heading = bearing; // dead on
        let act = nav.act(&cfg, &observe(&cfg, &s, 0));
        assert_eq!(act.angular(), 0.0);
        assert_eq!(act.longitudinal(), 1.0);
    }

    #[test]
    fn two_scripted_agents_complete_a_cooperative_goal_quickly() {
        let cfg = WorldConfig::for_landmarks(3);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let goal = GoalVector::cooperative(3, 0, 2);
        for _ in 0..50 {
            let mut s = env_reset(&cfg, [goal.clone(), goal.clone()], &mut rng);
            let navs = [
                ScriptedNav::for_goal(&goal, 0),
                ScriptedNav::for_goal(&goal, 1),
            ];
            let mut paid = [0.0, 0.0];
            for _ in 0..cfg.time_limit / 2 {
                let actions = [
                    navs[0].act(&cfg, &observe(&cfg, &s, 0)),
                    navs[1].act(&cfg, &observe(&cfg, &s, 1)),
                ];
                let out = env_step(&cfg, &mut s, actions).unwrap();
                paid[0] += out.rewards[0];
                paid[1] += out.rewards[1];
                if out.episode_done {
                    break;
                }
            }
            assert_eq!(paid, [1.0, 1.0], "cooperative split must pay both agents");
        }
    }
}
