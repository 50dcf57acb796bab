//! Analysis of episode records: alignment, specialization, risk-taking,
//! and seed-level aggregation (interquartile means with stratified
//! bootstrap confidence intervals).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::goals::GoalVector;
use crate::run::RunRecord;
use crate::{Error, Result};

/// Interquartile mean: drops `floor(n/4)` values from each end of the
/// sorted sample, then averages the rest. For fewer than four values this
/// is the plain mean. Errors on an empty slice.
pub fn iqm(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InsufficientData {
            op: "iqm",
            details: "empty sample".into(),
        });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("iqm: non-finite value"));
    let trim = sorted.len() / 4;
    let kept = &sorted[trim..sorted.len() - trim];
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Goal-alignment summary over a set of episodes.
///
/// An episode counts toward the denominator when at least one agent holds a
/// cooperative goal, and toward the numerator when both hold the *same*
/// cooperative goal. Episodes where both goals are individual say nothing
/// about coordination on joint tasks and are excluded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStats {
    pub aligned_cooperative: u64,
    pub cooperative_involved: u64,
    pub value: f64,
    /// True when no episode involved a cooperative goal (value forced to 0).
    pub degenerate: bool,
}

pub fn alignment(records: &[RunRecord]) -> AlignmentStats {
    let mut aligned = 0u64;
    let mut involved = 0u64;
    for r in records {
        let coop0 = r.goals[0].matches('1').count() == 2;
        let coop1 = r.goals[1].matches('1').count() == 2;
        if coop0 || coop1 {
            involved += 1;
            if coop0 && coop1 && r.goals[0] == r.goals[1] {
                aligned += 1;
            }
        }
    }
    AlignmentStats {
        aligned_cooperative: aligned,
        cooperative_involved: involved,
        value: if involved == 0 {
            0.0
        } else {
            aligned as f64 / involved as f64
        },
        degenerate: involved == 0,
    }
}

/// Alignment broken down by reference goal. The reference agent is the
/// leader when one exists (message-game and risky episodes), agent 0
/// otherwise; an episode counts as matched when the other agent holds an
/// identical goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerGoalAlignment {
    pub goal: String,
    pub matched: u64,
    pub total: u64,
    pub value: f64,
}

pub fn per_goal_alignment(records: &[RunRecord]) -> Vec<PerGoalAlignment> {
    let mut order: Vec<String> = Vec::new();
    let mut matched: Vec<u64> = Vec::new();
    let mut total: Vec<u64> = Vec::new();
    for r in records {
        let reference = r.leader.unwrap_or(0) as usize;
        let goal = &r.goals[reference];
        let idx = match order.iter().position(|g| g == goal) {
            Some(i) => i,
            None => {
                order.push(goal.clone());
                matched.push(0);
                total.push(0);
                order.len() - 1
            }
        };
        total[idx] += 1;
        if r.goals[0] == r.goals[1] {
            matched[idx] += 1;
        }
    }
    order
        .into_iter()
        .enumerate()
        .map(|(i, goal)| PerGoalAlignment {
            goal,
            matched: matched[i],
            total: total[i],
            value: matched[i] as f64 / total[i] as f64,
        })
        .collect()
}

/// How consistently one agent lands on one particular landmark of a
/// cooperative goal it holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecializationRow {
    pub agent: usize,
    pub goal: String,
    /// The landmark this agent most often covers for this goal.
    pub preferred_landmark: usize,
    pub preferred_visits: u64,
    pub total_visits: u64,
    /// `preferred_visits / total_visits`; at least 0.5 by construction
    /// since a cooperative goal names two landmarks.
    pub value: f64,
}

/// Specialization per (agent, cooperative goal): of the episodes where the
/// agent held that goal and was covering one of its two landmarks at
/// payout, the fraction spent on its most-visited of the two.
pub fn specialization(records: &[RunRecord]) -> Vec<SpecializationRow> {
    #[derive(Default, Clone)]
    struct Tally {
        per_landmark: std::collections::BTreeMap<usize, u64>,
    }
    let mut keys: Vec<(usize, String)> = Vec::new();
    let mut tallies: Vec<Tally> = Vec::new();
    for r in records {
        for agent in 0..2 {
            let goal = &r.goals[agent];
            if goal.matches('1').count() != 2 {
                continue;
            }
            let Some(arrival) = r.arrivals[agent] else {
                continue;
            };
            let arrival = arrival as usize;
            if goal.as_bytes()[arrival] != b'1' {
                continue;
            }
            let key = (agent, goal.clone());
            let idx = match keys.iter().position(|k| *k == key) {
                Some(i) => i,
                None => {
                    keys.push(key);
                    tallies.push(Tally::default());
                    keys.len() - 1
                }
            };
            *tallies[idx].per_landmark.entry(arrival).or_insert(0) += 1;
        }
    }
    keys.into_iter()
        .zip(tallies)
        .map(|((agent, goal), tally)| {
            let total: u64 = tally.per_landmark.values().sum();
            let (&preferred, &visits) = tally
                .per_landmark
                .iter()
                .max_by_key(|(lm, count)| (**count, std::cmp::Reverse(**lm)))
                .expect("tally has at least one landmark");
            SpecializationRow {
                agent,
                goal,
                preferred_landmark: preferred,
                preferred_visits: visits,
                total_visits: total,
                value: visits as f64 / total as f64,
            }
        })
        .collect()
}

/// Counts of risk-taking follower behavior: episodes where the leader held
/// an individual goal and the follower answered with a cooperative goal
/// containing the leader's landmark. The follower then only gets paid if
/// the leader's landmark actually ends up covered — it bets on the leader.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskyFollowerStats {
    pub risky: u64,
    /// Episodes with a leader whose goal was individual.
    pub leader_individual: u64,
    /// All episodes with an assigned leader.
    pub with_leader: u64,
    /// `risky / with_leader`.
    pub rate_overall: f64,
    /// `risky / leader_individual`.
    pub rate_given_individual: f64,
}

pub fn risky_follower(records: &[RunRecord]) -> RiskyFollowerStats {
    let mut risky = 0u64;
    let mut leader_individual = 0u64;
    let mut with_leader = 0u64;
    for r in records {
        let Some(leader) = r.leader else { continue };
        with_leader += 1;
        let leader = leader as usize;
        let lg = match GoalVector::from_bitstring(&r.goals[leader]) {
            Ok(g) => g,
            Err(_) => continue,
        };
        let fg = match GoalVector::from_bitstring(&r.goals[1 - leader]) {
            Ok(g) => g,
            Err(_) => continue,
        };
        if lg.is_cooperative() {
            continue;
        }
        leader_individual += 1;
        if fg.is_cooperative() && fg.is_superset_of(&lg) {
            risky += 1;
        }
    }
    RiskyFollowerStats {
        risky,
        leader_individual,
        with_leader,
        rate_overall: if with_leader == 0 {
            0.0
        } else {
            risky as f64 / with_leader as f64
        },
        rate_given_individual: if leader_individual == 0 {
            0.0
        } else {
            risky as f64 / leader_individual as f64
        },
    }
}

/// An aggregate score with a bootstrap confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    /// Interquartile mean of all raw values, pooled across strata and seeds.
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub iterations: u32,
    /// Set when only one seed was available: the interval is meaningless.
    pub degenerate: bool,
}

/// Stratified bootstrap over seeds.
///
/// `scores[stratum][seed]` holds one score per (stratum, seed); strata are
/// typically goals and every stratum must carry the same number of seeds.
/// Each iteration resamples seeds with replacement *within every stratum
/// independently*, pools the resampled values, and takes the interquartile
/// mean; the interval spans the 2.5th to 97.5th percentile of those
/// statistics, widened if necessary to contain the point estimate.
pub fn stratified_bootstrap(
    scores: &[Vec<f64>],
    iterations: u32,
    rng: &mut impl Rng,
) -> Result<BootstrapSummary> {
    if scores.is_empty() || scores.iter().any(|s| s.is_empty()) {
        return Err(Error::InsufficientData {
            op: "stratified_bootstrap",
            details: "every stratum needs at least one seed score".into(),
        });
    }
    let n_seeds = scores[0].len();
    if scores.iter().any(|s| s.len() != n_seeds) {
        return Err(Error::ShapeMismatch {
            op: "stratified_bootstrap",
            details: "strata carry differing seed counts".into(),
        });
    }
    let pooled: Vec<f64> = scores.iter().flatten().copied().collect();
    let point = iqm(&pooled)?;
    if n_seeds == 1 {
        return Ok(BootstrapSummary {
            point,
            ci_low: point,
            ci_high: point,
            iterations: 0,
            degenerate: true,
        });
    }
    let mut stats = Vec::with_capacity(iterations as usize);
    let mut resampled = Vec::with_capacity(pooled.len());
    for _ in 0..iterations {
        resampled.clear();
        for stratum in scores {
            for _ in 0..n_seeds {
                resampled.push(stratum[rng.gen_range(0..n_seeds)]);
            }
        }
        stats.push(iqm(&resampled)?);
    }
    stats.sort_by(|a, b| a.partial_cmp(b).expect("bootstrap stat non-finite"));
    let quantile = |q: f64| -> f64 {
        let pos = q * (stats.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        stats[lo] * (1.0 - frac) + stats[hi] * frac
    };
    Ok(BootstrapSummary {
        point,
        ci_low: quantile(0.025).min(point),
        ci_high: quantile(0.975).max(point),
        iterations,
        degenerate: false,
    })
}
