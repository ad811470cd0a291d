//! Evaluation metrics over episode logs: performance, behavior, and
//! game-theoretic scores, computed purely from recorded episodes.
//!
//! Every closed form here is normative for this simulator and documented in
//! docs/metrics.md so scores stay comparable across runs. New metrics
//! register by name without touching the existing ones.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::Action;
use crate::engine::log::EpisodeLog;
use crate::vehicle::ControlCommand;

/// Jerk normalizer j0, m/s^3.
const JERK_NORM: f64 = 2.0;
/// Steering-rate normalizer r0, rad/s.
const STEER_RATE_NORM: f64 = 0.2;
/// Speed bucket width for the stochasticity conditioning, m/s.
const SPEED_BUCKET: f64 = 2.0;
/// Neighbor radius for the stochasticity conditioning, m.
const NEIGHBOR_RADIUS: f64 = 50.0;
/// Deceleration that counts as giving way, m/s^2.
const GIVE_WAY_DECEL: f64 = -1.0;
/// Cut-in gap threshold parameters (IDM s0 and T).
const CUT_IN_S0: f64 = 2.0;
const CUT_IN_T: f64 = 1.5;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no episode logs supplied")]
    Empty,
}

/// Per-agent metric values plus the population mean, for every metric name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub episodes: usize,
    /// metric -> population value (mean over agents).
    pub population: BTreeMap<String, f64>,
    /// agent -> metric -> value.
    pub per_agent: BTreeMap<String, BTreeMap<String, f64>>,
}

impl MetricsReport {
    pub fn value(&self, metric: &str) -> f64 {
        self.population.get(metric).copied().unwrap_or(0.0)
    }

    /// "collision/completion" cell in the results-table format.
    pub fn table_cell(&self) -> String {
        format!(
            "{}/{}",
            format_rate(self.value("collision_rate")),
            format_rate(self.value("completion_rate"))
        )
    }
}

/// Trim a rate for table cells: 0 -> "0", 1 -> "1", 0.25 -> "0.25".
pub fn format_rate(v: f64) -> String {
    let rounded = (v * 100.0).round() / 100.0;
    let mut s = format!("{rounded}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    s
}

type MetricFn = Box<dyn Fn(&[EpisodeLog]) -> BTreeMap<String, f64> + Send + Sync>;

/// Named metric registry. `standard()` installs the full built-in suite.
pub struct MetricsRegistry {
    metrics: BTreeMap<String, MetricFn>,
}

impl MetricsRegistry {
    pub fn empty() -> Self {
        MetricsRegistry {
            metrics: BTreeMap::new(),
        }
    }

    pub fn standard() -> Self {
        let mut r = MetricsRegistry::empty();
        r.register("collision_rate", |logs| per_agent_rate(logs, episode_collided));
        r.register("completion_rate", |logs| per_agent_rate(logs, episode_completed));
        r.register("generalization", generalization);
        r.register("safety", |logs| {
            per_agent_rate(logs, episode_collided)
                .into_iter()
                .map(|(a, v)| (a, 1.0 - v))
                .collect()
        });
        r.register("agility", agility);
        r.register("stability", stability);
        r.register("control_diversity", control_diversity);
        r.register("stochasticity", stochasticity);
        r.register("cut_in_ratio", cut_in_ratio);
        r.register("giving_way_ratio", giving_way_ratio);
        r.register("overtaking_ratio", overtaking_ratio);
        r
    }

    pub fn register(
        &mut self,
        name: &str,
        f: impl Fn(&[EpisodeLog]) -> BTreeMap<String, f64> + Send + Sync + 'static,
    ) {
        self.metrics.insert(name.to_string(), Box::new(f));
    }

    pub fn names(&self) -> Vec<&str> {
        self.metrics.keys().map(|s| s.as_str()).collect()
    }

    pub fn compute(&self, logs: &[EpisodeLog]) -> Result<MetricsReport, MetricsError> {
        if logs.is_empty() {
            return Err(MetricsError::Empty);
        }
        let mut per_agent: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        let mut population: BTreeMap<String, f64> = BTreeMap::new();
        for (name, f) in &self.metrics {
            let values = f(logs);
            if values.is_empty() {
                population.insert(name.clone(), 0.0);
                continue;
            }
            let mean = values.values().sum::<f64>() / values.len() as f64;
            population.insert(name.clone(), mean);
            for (agent, v) in values {
                per_agent.entry(agent).or_default().insert(name.clone(), v);
            }
        }
        Ok(MetricsReport {
            episodes: logs.len(),
            population,
            per_agent,
        })
    }
}

/// The Table-style performance triple.
pub fn performance_metrics(logs: &[EpisodeLog]) -> Result<(f64, f64, f64), MetricsError> {
    if logs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let collision = mean_over_agents(&per_agent_rate(logs, episode_collided));
    let completion = mean_over_agents(&per_agent_rate(logs, episode_completed));
    let general = mean_over_agents(&generalization(logs));
    Ok((collision, completion, general))
}

/// The behavior six-tuple.
pub fn behavior_metrics(
    logs: &[EpisodeLog],
) -> Result<(f64, f64, f64, f64, f64, f64), MetricsError> {
    if logs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let safety = 1.0 - mean_over_agents(&per_agent_rate(logs, episode_collided));
    Ok((
        safety,
        mean_over_agents(&agility(logs)),
        mean_over_agents(&stability(logs)),
        mean_over_agents(&control_diversity(logs)),
        mean_over_agents(&stochasticity(logs)),
        mean_over_agents(&cut_in_ratio(logs)),
    ))
}

/// The game-theoretic pair.
pub fn game_metrics(logs: &[EpisodeLog]) -> Result<(f64, f64), MetricsError> {
    if logs.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok((
        mean_over_agents(&giving_way_ratio(logs)),
        mean_over_agents(&overtaking_ratio(logs)),
    ))
}

fn mean_over_agents(values: &BTreeMap<String, f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.values().sum::<f64>() / values.len() as f64
}

fn agents_of(log: &EpisodeLog) -> Vec<String> {
    log.header.agents.keys().cloned().collect()
}

fn episode_collided(log: &EpisodeLog, agent: &str) -> bool {
    log.steps
        .iter()
        .any(|s| s.events.get(agent).is_some_and(|e| e.collision))
}

fn episode_completed(log: &EpisodeLog, agent: &str) -> bool {
    log.steps
        .iter()
        .any(|s| s.events.get(agent).is_some_and(|e| e.reached_goal))
}

/// Fraction of episodes where the predicate fires, per agent.
fn per_agent_rate(
    logs: &[EpisodeLog],
    predicate: fn(&EpisodeLog, &str) -> bool,
) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for log in logs {
        for agent in agents_of(log) {
            let c = counts.entry(agent.clone()).or_insert((0, 0));
            c.1 += 1;
            if predicate(log, &agent) {
                c.0 += 1;
            }
        }
    }
    counts
        .into_iter()
        .map(|(a, (hits, total))| (a, hits as f64 / total.max(1) as f64))
        .collect()
}

/// Mean over scenario variants of (variant completion / best-variant
/// completion). One variant scores 1; an all-zero batch scores 0.
fn generalization(logs: &[EpisodeLog]) -> BTreeMap<String, f64> {
    let mut by_scenario: BTreeMap<String, Vec<&EpisodeLog>> = BTreeMap::new();
    for log in logs {
        by_scenario
            .entry(log.header.scenario.clone())
            .or_default()
            .push(log);
    }
    let mut agents: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
    for log in logs {
        agents.extend(agents_of(log));
    }
    let mut out = BTreeMap::new();
    for agent in agents {
        if by_scenario.len() == 1 {
            out.insert(agent, 1.0);
            continue;
        }
        let completions: Vec<f64> = by_scenario
            .values()
            .map(|group| {
                let total = group.len().max(1);
                let done = group
                    .iter()
                    .filter(|l| episode_completed(l, &agent))
                    .count();
                done as f64 / total as f64
            })
            .collect();
        let best = completions.iter().cloned().fold(0.0, f64::max);
        let value = if best <= 0.0 {
            0.0
        } else {
            completions.iter().map(|c| c / best).sum::<f64>() / completions.len() as f64
        };
        out.insert(agent, value.clamp(0.0, 1.0));
    }
    out
}

/// Mean speed over the lane limit, clamped to [0, 1].
fn agility(logs: &[EpisodeLog]) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for log in logs {
        for agent in agents_of(log) {
            for step in &log.steps {
                if let Some(v) = step.vehicles.iter().find(|v| v.id.as_str() == agent) {
                    if v.lane_limit > 0.0 {
                        let e = sums.entry(agent.clone()).or_insert((0.0, 0));
                        e.0 += (v.speed / v.lane_limit).clamp(0.0, 1.0);
                        e.1 += 1;
                    }
                }
            }
        }
    }
    sums.into_iter()
        .map(|(a, (sum, n))| (a, if n > 0 { sum / n as f64 } else { 0.0 }))
        .collect()
}

/// 1 / (1 + mean|jerk|/j0 + mean|steering rate|/r0).
fn stability(logs: &[EpisodeLog]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for log in logs {
        let dt = log.header.dt;
        for agent in agents_of(log) {
            let mut prev: Option<(f64, f64)> = None;
            for step in &log.steps {
                if let Some(v) = step.vehicles.iter().find(|v| v.id.as_str() == agent) {
                    if let Some((pa, ps)) = prev {
                        let jerk = (v.accel - pa) / dt;
                        let steer_rate = (v.steering - ps) / dt;
                        let e = acc.entry(agent.clone()).or_insert((0.0, 0.0, 0));
                        e.0 += jerk.abs();
                        e.1 += steer_rate.abs();
                        e.2 += 1;
                    }
                    prev = Some((v.accel, v.steering));
                } else {
                    prev = None;
                }
            }
        }
    }
    acc.into_iter()
        .map(|(a, (jerk, steer, n))| {
            let value = if n > 0 {
                let mj = jerk / n as f64;
                let ms = steer / n as f64;
                1.0 / (1.0 + mj / JERK_NORM + ms / STEER_RATE_NORM)
            } else {
                1.0
            };
            (a, value)
        })
        .collect()
}

fn lateral_command(cmd: &ControlCommand) -> bool {
    match cmd {
        ControlCommand::LaneFollowing { lane_change, .. } => *lane_change != 0,
        ControlCommand::Continuous { steering, .. } => steering.abs() > 0.05,
        ControlCommand::ActuatorDynamic { steering_rate, .. } => steering_rate.abs() > 0.05,
        ControlCommand::Trajectory { .. } => false,
    }
}

/// Fraction of steps with a lateral control action.
fn control_diversity(logs: &[EpisodeLog]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for log in logs {
        for agent in agents_of(log) {
            for step in &log.steps {
                if let Some(cmd) = step.commands.get(&agent) {
                    let e = acc.entry(agent.clone()).or_insert((0, 0));
                    e.1 += 1;
                    if lateral_command(cmd) {
                        e.0 += 1;
                    }
                }
            }
        }
    }
    acc.into_iter()
        .map(|(a, (lat, total))| (a, if total > 0 { lat as f64 / total as f64 } else { 0.0 }))
        .collect()
}

/// Canonical histogram key for an action (floats quantized).
fn action_key(action: &Action) -> String {
    match action {
        Action::Discrete(d) => format!("{d:?}"),
        Action::Command(ControlCommand::LaneFollowing {
            target_speed,
            lane_change,
        }) => format!("LF:{:.1}:{lane_change}", (target_speed * 2.0).round() / 2.0),
        Action::Command(ControlCommand::Continuous {
            throttle,
            brake,
            steering,
        }) => format!(
            "C:{:.1}:{:.1}:{:.1}",
            (throttle * 10.0).round() / 10.0,
            (brake * 10.0).round() / 10.0,
            (steering * 10.0).round() / 10.0
        ),
        Action::Command(ControlCommand::ActuatorDynamic {
            throttle,
            brake,
            steering_rate,
        }) => format!(
            "A:{:.1}:{:.1}:{:.1}",
            (throttle * 10.0).round() / 10.0,
            (brake * 10.0).round() / 10.0,
            (steering_rate * 10.0).round() / 10.0
        ),
        Action::Command(ControlCommand::Trajectory { points }) => format!("T:{}", points.len()),
    }
}

/// Mean normalized entropy of the action histogram conditioned on
/// (speed bucket, neighbor-count bucket). Deterministic policies score 0.
fn stochasticity(logs: &[EpisodeLog]) -> BTreeMap<String, f64> {
    // agent -> bucket -> action key -> count
    type Histogram = BTreeMap<(u32, u32), BTreeMap<String, usize>>;
    let mut hist: BTreeMap<String, Histogram> = BTreeMap::new();
    for log in logs {
        for agent in agents_of(log) {
            for step in &log.steps {
                let Some(action) = step.actions.get(&agent) else {
                    continue;
                };
                let Some(v) = step.vehicles.iter().find(|v| v.id.as_str() == agent) else {
                    continue;
                };
                let neighbor_count = step
                    .vehicles
                    .iter()
                    .filter(|o| {
                        o.id.as_str() != agent
                            && ((o.x - v.x).powi(2) + (o.y - v.y).powi(2)).sqrt()
                                <= NEIGHBOR_RADIUS
                    })
                    .count() as u32;
                let bucket = ((v.speed / SPEED_BUCKET).floor() as u32, neighbor_count);
                *hist
                    .entry(agent.clone())
                    .or_default()
                    .entry(bucket)
                    .or_default()
                    .entry(action_key(action))
                    .or_insert(0) += 1;
            }
        }
    }
    hist.into_iter()
        .map(|(agent, buckets)| {
            let mut weighted = 0.0;
            let mut total = 0usize;
            for actions in buckets.values() {
                let n: usize = actions.values().sum();
                let k = actions.len();
                let h = if k <= 1 {
                    0.0
                } else {
                    let raw: f64 = actions
                        .values()
                        .map(|c| {
                            let p = *c as f64 / n as f64;
                            -p * p.ln()
                        })
                        .sum();
                    raw / (k as f64).ln()
                };
                weighted += h * n as f64;
                total += n;
            }
            (
                agent,
                if total > 0 {
                    weighted / total as f64
                } else {
                    0.0
                },
            )
        })
        .collect()
}

/// Ego lane change detected from the log: the nearest-lane id changes while a
/// lateral command was active within the last second.
fn cut_in_ratio(logs: &[EpisodeLog]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for log in logs {
        let dt = log.header.dt.max(1e-6);
        let recent = (1.0 / dt).ceil() as usize;
        for agent in agents_of(log) {
            let entry = acc.entry(agent.clone()).or_insert((0, 0));
            let mut prev_lane: Option<String> = None;
            let mut lateral_ages: Vec<bool> = Vec::new();
            for step in &log.steps {
                let lateral_now = step.commands.get(&agent).is_some_and(lateral_command);
                lateral_ages.push(lateral_now);
                let Some(v) = step.vehicles.iter().find(|v| v.id.as_str() == agent) else {
                    prev_lane = None;
                    continue;
                };
                let lane = v.lane.as_str().to_string();
                if let Some(prev) = &prev_lane {
                    let recently_lateral = lateral_ages
                        .iter()
                        .rev()
                        .take(recent)
                        .any(|l| *l);
                    if *prev != lane && recently_lateral {
                        entry.1 += 1;
                        // nearest follower on the new lane
                        let heading = v.heading;
                        let follower = step
                            .vehicles
                            .iter()
                            .filter(|o| o.id.as_str() != agent && o.lane.as_str() == lane)
                            .filter_map(|o| {
                                let dx = o.x - v.x;
                                let dy = o.y - v.y;
                                let along = dx * heading.cos() + dy * heading.sin();
                                if along < 0.0 {
                                    Some((-along - (o.length + v.length) * 0.5, o.speed))
                                } else {
                                    None
                                }
                            })
                            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                        if let Some((gap, speed)) = follower {
                            if gap < CUT_IN_S0 + speed * CUT_IN_T {
                                entry.0 += 1;
                            }
                        }
                    }
                }
                prev_lane = Some(lane);
            }
        }
    }
    acc.into_iter()
        .map(|(a, (cuts, changes))| {
            (a, if changes > 0 { cuts as f64 / changes as f64 } else { 0.0 })
        })
        .collect()
}

/// Contiguous interaction windows per (agent, other); a window gives way when
/// the agent decelerated at least 1 m/s^2 and the other cleared first.
fn giving_way_ratio(logs: &[EpisodeLog]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for log in logs {
        for agent in agents_of(log) {
            let entry = acc.entry(agent.clone()).or_insert((0, 0));
            // other id -> (open, decelerated, last_cleared)
            let mut open: BTreeMap<String, (bool, bool)> = BTreeMap::new();
            for step in &log.steps {
                let decel_now = step
                    .vehicles
                    .iter()
                    .find(|v| v.id.as_str() == agent)
                    .is_some_and(|v| v.accel <= GIVE_WAY_DECEL);
                let current: BTreeMap<String, bool> = step
                    .interactions
                    .get(&agent)
                    .map(|list| {
                        list.iter()
                            .map(|i| (i.other.as_str().to_string(), i.other_cleared))
                            .collect()
                    })
                    .unwrap_or_default();
                // close windows that ended
                let closed: Vec<String> = open
                    .keys()
                    .filter(|k| !current.contains_key(*k))
                    .cloned()
                    .collect();
                for k in closed {
                    let (decelerated, cleared) = open.remove(&k).unwrap();
                    entry.1 += 1;
                    if decelerated && cleared {
                        entry.0 += 1;
                    }
                }
                for (other, cleared) in current {
                    let e = open.entry(other).or_insert((false, false));
                    e.0 |= decel_now;
                    e.1 = cleared;
                }
            }
            for (_, (decelerated, cleared)) in open {
                entry.1 += 1;
                if decelerated && cleared {
                    entry.0 += 1;
                }
            }
        }
    }
    acc.into_iter()
        .map(|(a, (given, total))| {
            (a, if total > 0 { given as f64 / total as f64 } else { 0.0 })
        })
        .collect()
}

/// Fraction of encountered same-direction vehicles the agent moved from
/// behind to ahead of within one episode.
fn overtaking_ratio(logs: &[EpisodeLog]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for log in logs {
        for agent in agents_of(log) {
            // other -> (seen_behind_of_other, overtaken)
            let mut encountered: BTreeMap<String, (bool, bool)> = BTreeMap::new();
            for step in &log.steps {
                let Some(v) = step.vehicles.iter().find(|v| v.id.as_str() == agent) else {
                    continue;
                };
                for o in &step.vehicles {
                    if o.id.as_str() == agent {
                        continue;
                    }
                    let dist = ((o.x - v.x).powi(2) + (o.y - v.y).powi(2)).sqrt();
                    let heading_diff =
                        crate::math::angle_between(v.heading, o.heading);
                    if heading_diff > std::f64::consts::FRAC_PI_2 {
                        continue; // oncoming traffic is not an overtaking peer
                    }
                    let along = (o.x - v.x) * v.heading.cos() + (o.y - v.y) * v.heading.sin();
                    let e = if dist <= 15.0 {
                        Some(encountered.entry(o.id.as_str().to_string()).or_insert((false, false)))
                    } else {
                        encountered.get_mut(o.id.as_str())
                    };
                    if let Some(e) = e {
                        if along > 0.0 {
                            e.0 = true; // the other is ahead: we are behind it
                        } else if e.0 && along < -(o.length + v.length) * 0.5 {
                            e.1 = true; // moved from behind to fully ahead
                        }
                    }
                }
            }
            let entry = acc.entry(agent.clone()).or_insert((0, 0));
            entry.1 += encountered.len();
            entry.0 += encountered.values().filter(|(_, done)| *done).count();
        }
    }
    acc.into_iter()
        .map(|(a, (passed, total))| {
            (a, if total > 0 { passed as f64 / total as f64 } else { 0.0 })
        })
        .collect()
}

/// One results-table CSV row per scenario group, Table-4 style.
pub fn table_csv(groups: &BTreeMap<String, MetricsReport>) -> String {
    let mut out = String::from("scenario,collision_rate,completion_rate,cell\n");
    for (scenario, report) in groups {
        out.push_str(&format!(
            "{scenario},{},{},{}\n",
            format_rate(report.value("collision_rate")),
            format_rate(report.value("completion_rate")),
            report.table_cell()
        ));
    }
    out
}

/// Radar-plot series: one entry per scenario group with the population
/// behavior metrics.
pub fn radar_series(groups: &BTreeMap<String, MetricsReport>) -> serde_json::Value {
    let series: Vec<serde_json::Value> = groups
        .iter()
        .map(|(scenario, report)| {
            serde_json::json!({
                "scenario": scenario,
                "metrics": {
                    "safety": report.value("safety"),
                    "agility": report.value("agility"),
                    "stability": report.value("stability"),
                    "control_diversity": report.value("control_diversity"),
                    "stochasticity": report.value("stochasticity"),
                }
            })
        })
        .collect();
    serde_json::Value::Array(series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bubbles::ControlOwner;
    use crate::engine::log::{
        AgentInfoRecord, InteractionRecord, LogHeader, RewardRecord, StepRecord, VehicleRecord,
    };
    use crate::sensing::EventFlags;

    fn header(scenario: &str, agents: &[&str]) -> LogHeader {
        LogHeader {
            format: 1,
            kind: "header".into(),
            scenario: scenario.into(),
            seed: 0,
            dt: 0.1,
            map: "m.json".into(),
            agents: agents
                .iter()
                .map(|a| (a.to_string(), "keep_lane".to_string()))
                .collect(),
            config_hash: "0".into(),
        }
    }

    fn vehicle(id: &str, x: f64, speed: f64) -> VehicleRecord {
        VehicleRecord {
            id: id.into(),
            x,
            y: 0.0,
            heading: 0.0,
            speed,
            accel: 0.0,
            steering: 0.0,
            length: 4.6,
            width: 1.8,
            owner: ControlOwner::EgoAgent(id.to_string()),
            lane: "l0".into(),
            lane_limit: 13.9,
            dist_center: 0.0,
        }
    }

    fn blank_step(step: u64) -> StepRecord {
        StepRecord {
            kind: "step".into(),
            step,
            time: step as f64 * 0.1,
            vehicles: vec![],
            actions: BTreeMap::new(),
            commands: BTreeMap::new(),
            rewards: BTreeMap::new(),
            dones: BTreeMap::new(),
            events: BTreeMap::new(),
            infos: BTreeMap::new(),
            handovers: vec![],
            spawns: vec![],
            despawns: vec![],
            lane_changes: vec![],
            interactions: BTreeMap::new(),
            collisions: vec![],
            anomalies: vec![],
        }
    }

    /// Episode whose single agent either collides, completes, or times out.
    fn outcome_episode(outcome: &str) -> EpisodeLog {
        let mut step = blank_step(0);
        step.vehicles.push(vehicle("a0", 0.0, 10.0));
        let mut events = EventFlags::default();
        match outcome {
            "collision" => events.collision = true,
            "complete" => events.reached_goal = true,
            _ => events.timeout = true,
        }
        step.events.insert("a0".into(), events);
        step.rewards.insert(
            "a0".into(),
            RewardRecord {
                raw: 1.0,
                shaped: 1.0,
            },
        );
        step.infos.insert(
            "a0".into(),
            AgentInfoRecord {
                control: Default::default(),
                substituted: false,
                progress: 1.0,
                wrong_way_count: 0,
            },
        );
        EpisodeLog {
            header: header("test", &["a0"]),
            steps: vec![step],
        }
    }

    fn batch(collisions: usize, completions: usize, timeouts: usize) -> Vec<EpisodeLog> {
        let mut logs = Vec::new();
        for _ in 0..collisions {
            logs.push(outcome_episode("collision"));
        }
        for _ in 0..completions {
            logs.push(outcome_episode("complete"));
        }
        for _ in 0..timeouts {
            logs.push(outcome_episode("timeout"));
        }
        logs
    }

    #[test]
    fn collision_and_completion_rates_are_definition_arithmetic() {
        let logs = batch(2, 7, 1);
        let (collision, completion, _) = performance_metrics(&logs).unwrap();
        assert!((collision - 0.2).abs() < 1e-12);
        assert!((completion - 0.7).abs() < 1e-12);
    }

    #[test]
    fn perfect_batch_formats_as_0_slash_1() {
        let logs = batch(0, 10, 0);
        let report = MetricsRegistry::standard().compute(&logs).unwrap();
        assert_eq!(report.table_cell(), "0/1");
        let mut groups = BTreeMap::new();
        groups.insert("two_way".to_string(), report);
        let csv = table_csv(&groups);
        assert!(csv.contains("two_way,0,1,0/1"), "{csv}");
    }

    #[test]
    fn rates_need_not_sum_to_one() {
        let logs = batch(0, 7, 3);
        let (collision, completion, _) = performance_metrics(&logs).unwrap();
        assert_eq!(collision, 0.0);
        assert!((completion - 0.7).abs() < 1e-12);
    }

    #[test]
    fn safety_is_the_exact_complement_of_collision_rate() {
        let logs = batch(3, 5, 2);
        let report = MetricsRegistry::standard().compute(&logs).unwrap();
        assert_eq!(
            report.value("safety") + report.value("collision_rate"),
            1.0,
            "exact complement"
        );
    }

    /// Constant 10 m/s straight cruise on a 13.9 limit: agility 10/13.9,
    /// stability exactly 1 (zero jerk, zero steering rate), diversity 0,
    /// stochasticity 0 (single action per bucket).
    fn straight_cruise_log(steps: u64) -> EpisodeLog {
        let mut log = EpisodeLog {
            header: header("cruise", &["a0"]),
            steps: vec![],
        };
        for i in 0..steps {
            let mut step = blank_step(i);
            step.vehicles.push(vehicle("a0", i as f64, 10.0));
            step.actions.insert(
                "a0".into(),
                Action::Command(ControlCommand::LaneFollowing {
                    target_speed: 13.9,
                    lane_change: 0,
                }),
            );
            step.commands.insert(
                "a0".into(),
                ControlCommand::LaneFollowing {
                    target_speed: 13.9,
                    lane_change: 0,
                },
            );
            step.events.insert("a0".into(), EventFlags::default());
            log.steps.push(step);
        }
        log
    }

    #[test]
    fn synthetic_cruise_matches_analytic_values() {
        let logs = vec![straight_cruise_log(100)];
        let (_, agility, stability, diversity, stochasticity, cut_in) =
            behavior_metrics(&logs).unwrap();
        assert!((agility - 10.0 / 13.9).abs() < 1e-9, "agility {agility}");
        assert!((agility - 0.72).abs() < 0.005);
        assert_eq!(stability, 1.0, "zero jerk and steering rate");
        assert_eq!(diversity, 0.0, "never steers");
        assert_eq!(stochasticity, 0.0, "deterministic policy");
        assert_eq!(cut_in, 0.0, "no lane changes");
    }

    #[test]
    fn stochastic_actions_score_positive_entropy() {
        let mut log = straight_cruise_log(100);
        // alternate two actions in the same bucket
        for (i, step) in log.steps.iter_mut().enumerate() {
            if i % 2 == 0 {
                step.actions.insert(
                    "a0".into(),
                    Action::Discrete(crate::agents::DiscreteAction::SlowDown),
                );
            }
        }
        let report = MetricsRegistry::standard().compute(&[log]).unwrap();
        let s = report.value("stochasticity");
        assert!((s - 1.0).abs() < 1e-9, "two equally likely actions: {s}");
    }

    #[test]
    fn giving_way_counts_windows() {
        // 4 windows against 4 other vehicles; agent decelerates and the other
        // clears in 3 of them
        let mut log = EpisodeLog {
            header: header("windows", &["a0"]),
            steps: vec![],
        };
        for w in 0..4u64 {
            for i in 0..5u64 {
                let mut step = blank_step(w * 10 + i);
                let mut me = vehicle("a0", 0.0, 5.0);
                let gives = w < 3;
                me.accel = if gives && i >= 1 { -2.0 } else { 0.0 };
                step.vehicles.push(me);
                step.vehicles.push(vehicle(&format!("t{w}"), 8.0, 6.0));
                step.interactions.insert(
                    "a0".into(),
                    vec![InteractionRecord {
                        other: format!("t{w}").as_str().into(),
                        kind: "crossing".into(),
                        other_cleared: gives && i >= 3,
                    }],
                );
                step.events.insert("a0".into(), EventFlags::default());
                log.steps.push(step);
            }
            // gap step closes the window
            log.steps.push(blank_step(w * 10 + 9));
        }
        let (giving_way, _) = game_metrics(&[log]).unwrap();
        assert!((giving_way - 0.75).abs() < 1e-9, "giving way {giving_way}");
    }

    #[test]
    fn lone_agent_has_no_windows() {
        let logs = vec![straight_cruise_log(50)];
        let (giving_way, overtaking) = game_metrics(&logs).unwrap();
        assert_eq!(giving_way, 0.0);
        assert_eq!(overtaking, 0.0);
    }

    #[test]
    fn overtaking_counts_passed_vehicles() {
        // agent meets 5 slower vehicles, ends up ahead of 2
        let mut log = EpisodeLog {
            header: header("overtake", &["a0"]),
            steps: vec![],
        };
        for i in 0..200u64 {
            let mut step = blank_step(i);
            let me_x = i as f64 * 1.0; // 10 m/s
            step.vehicles.push(vehicle("a0", me_x, 10.0));
            for k in 0..5 {
                // all start ahead within 15 m; the first two crawl and get passed
                let speed = if k < 2 { 0.2 } else { 30.0 };
                let x0 = 6.0 + k as f64 * 2.0;
                let x = x0 + i as f64 * 0.1 * speed;
                step.vehicles.push(vehicle(&format!("t{k}"), x, speed));
            }
            step.events.insert("a0".into(), EventFlags::default());
            log.steps.push(step);
        }
        let (_, overtaking) = game_metrics(&[log]).unwrap();
        assert!((overtaking - 0.4).abs() < 1e-9, "overtaking {overtaking}");
    }

    #[test]
    fn reports_are_permutation_invariant() {
        let mut logs = batch(2, 6, 2);
        let report_a = MetricsRegistry::standard().compute(&logs).unwrap();
        logs.reverse();
        logs.swap(1, 5);
        let report_b = MetricsRegistry::standard().compute(&logs).unwrap();
        assert_eq!(report_a, report_b);
    }

    #[test]
    fn custom_metrics_register_by_name() {
        let mut registry = MetricsRegistry::standard();
        registry.register("step_count", |logs| {
            let mut out = BTreeMap::new();
            for log in logs {
                for agent in log.header.agents.keys() {
                    *out.entry(agent.clone()).or_insert(0.0) += log.steps.len() as f64;
                }
            }
            out
        });
        let logs = vec![straight_cruise_log(42)];
        let report = registry.compute(&logs).unwrap();
        assert_eq!(report.value("step_count"), 42.0);
        // existing metrics untouched
        assert_eq!(report.value("stability"), 1.0);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(
            MetricsRegistry::standard().compute(&[]),
            Err(MetricsError::Empty)
        ));
        assert!(performance_metrics(&[]).is_err());
    }

    #[test]
    fn rate_formatting_trims_zeros() {
        assert_eq!(format_rate(0.0), "0");
        assert_eq!(format_rate(1.0), "1");
        assert_eq!(format_rate(0.25), "0.25");
        assert_eq!(format_rate(0.7), "0.7");
        assert_eq!(format_rate(0.3333333), "0.33");
    }
}
