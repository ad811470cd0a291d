//! Scenario composition: the declarative scenario format, binding against a
//! map, and actor sampling.
//!
//! Scenario files are JSON (`"format": 1`). Positions are written as
//! `(edge, lane_index, offset)` triples; lane index 0 is the edge's first
//! (rightmost) lane. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bubbles::BubbleSpec;
use crate::map::{LanePosition, MapError, RoadNetwork, Route};
use crate::math::Vec2;
use crate::sensing::RewardWeights;
use crate::traffic::{BoundFlow, TrafficActorSpec};

/// (edge, lane index, offset along the lane) — the scenario position syntax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triple(pub String, pub usize, pub f64);

impl Triple {
    pub fn resolve(&self, network: &RoadNetwork) -> Result<LanePosition, MapError> {
        network.resolve_triple(&self.0, self.1, self.2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissionSpec {
    pub agent_id: String,
    pub start: Triple,
    pub goal: Triple,
    #[serde(default = "default_goal_radius")]
    pub goal_radius: f64,
}

fn default_goal_radius() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteDoc {
    pub begin: Triple,
    pub end: Triple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowDoc {
    pub route: RouteDoc,
    /// Vehicles per second.
    pub rate: f64,
    /// Actor name -> mix weight.
    pub actors: BTreeMap<String, f64>,
}

/// Parsed declarative scenario, unbound until matched with a road network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub format: u32,
    /// Map document path, relative to the scenario file.
    pub map: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_steps")]
    pub max_episode_steps: u32,
    #[serde(default)]
    pub missions: Vec<MissionSpec>,
    #[serde(default)]
    pub actors: BTreeMap<String, TrafficActorSpec>,
    #[serde(default)]
    pub flows: Vec<FlowDoc>,
    #[serde(default)]
    pub bubbles: Vec<BubbleSpec>,
    #[serde(default)]
    pub reward_weights: RewardWeights,
}

fn default_max_steps() -> u32 {
    600
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("unsupported scenario format {0}")]
    Format(u32),
    #[error("flow {0}: negative rate")]
    NegativeRate(usize),
    #[error("flow {0}: actor weights must be non-negative with a positive sum")]
    ZeroWeights(usize),
    #[error("flow {0} references unknown actor `{1}`")]
    UnknownActor(usize, String),
    #[error("actor `{0}`: {1}")]
    Actor(String, String),
    #[error("bubble: {0}")]
    Bubble(String),
    #[error("mission `{0}`: {1}")]
    Mission(String, String),
    #[error("mission `{0}` is unreachable: no route from start to goal")]
    UnreachableMission(String),
    #[error("duplicate agent id `{0}`")]
    DuplicateAgent(String),
    #[error("map: {0}")]
    Map(#[from] MapError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Parse and validate a scenario document (unbound).
pub fn parse_scenario(document: &str) -> Result<ScenarioSpec, ScenarioError> {
    let spec: ScenarioSpec =
        serde_json::from_str(document).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    if spec.format != 1 {
        return Err(ScenarioError::Format(spec.format));
    }
    let mut seen = std::collections::BTreeSet::new();
    for m in &spec.missions {
        if !seen.insert(&m.agent_id) {
            return Err(ScenarioError::DuplicateAgent(m.agent_id.clone()));
        }
    }
    for (name, actor) in &spec.actors {
        actor
            .validate()
            .map_err(|e| ScenarioError::Actor(name.clone(), e))?;
    }
    for (i, flow) in spec.flows.iter().enumerate() {
        if flow.rate < 0.0 {
            return Err(ScenarioError::NegativeRate(i));
        }
        let mut sum = 0.0;
        for (name, w) in &flow.actors {
            if *w < 0.0 {
                return Err(ScenarioError::ZeroWeights(i));
            }
            if !spec.actors.contains_key(name) {
                return Err(ScenarioError::UnknownActor(i, name.clone()));
            }
            sum += w;
        }
        if sum <= 0.0 {
            return Err(ScenarioError::ZeroWeights(i));
        }
    }
    for b in &spec.bubbles {
        b.validate().map_err(ScenarioError::Bubble)?;
    }
    Ok(spec)
}

/// Canonical serialization: parse(serialize(parse(doc))) is a fixpoint.
pub fn serialize_scenario(spec: &ScenarioSpec) -> String {
    serde_json::to_string_pretty(spec).expect("scenario serializes")
}

/// A mission with every triple resolved and its route cached.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundMission {
    pub agent_id: String,
    pub start: LanePosition,
    pub goal: LanePosition,
    pub goal_point: Vec2,
    pub goal_radius: f64,
    pub route: Route,
}

/// Scenario bound to a loaded road network.
#[derive(Debug, Clone)]
pub struct BoundScenario {
    pub spec: ScenarioSpec,
    pub name: String,
    pub network: Arc<RoadNetwork>,
    pub missions: Vec<BoundMission>,
    pub flows: Vec<BoundFlow>,
}

/// Resolve every triple, compute and cache mission routes, geo-validate
/// bubbles. Binding the same spec twice yields identical results.
pub fn bind_scenario(
    spec: &ScenarioSpec,
    name: &str,
    network: Arc<RoadNetwork>,
) -> Result<BoundScenario, ScenarioError> {
    let mut missions = Vec::with_capacity(spec.missions.len());
    for m in &spec.missions {
        let start = m
            .start
            .resolve(&network)
            .map_err(|e| ScenarioError::Mission(m.agent_id.clone(), e.to_string()))?;
        let goal = m
            .goal
            .resolve(&network)
            .map_err(|e| ScenarioError::Mission(m.agent_id.clone(), e.to_string()))?;
        let route = network
            .route_between(&start, &goal)
            .map_err(|_| ScenarioError::UnreachableMission(m.agent_id.clone()))?;
        let goal_lane = network.lane(&goal.lane_id).expect("goal lane exists");
        let goal_point = goal_lane.pose_at(goal.s, 0.0).position;
        missions.push(BoundMission {
            agent_id: m.agent_id.clone(),
            start,
            goal,
            goal_point,
            goal_radius: m.goal_radius,
            route,
        });
    }

    let mut flows = Vec::with_capacity(spec.flows.len());
    for (i, f) in spec.flows.iter().enumerate() {
        let begin = f.route.begin.resolve(&network)?;
        let end = f.route.end.resolve(&network)?;
        let route = network
            .route_between(&begin, &end)
            .map_err(|_| ScenarioError::Mission(format!("flow {i}"), "unroutable".into()))?;
        let mix: Vec<(String, f64)> = f.actors.iter().map(|(k, v)| (k.clone(), *v)).collect();
        flows.push(BoundFlow {
            route,
            rate: f.rate,
            mix,
        });
    }

    for b in &spec.bubbles {
        let center = Vec2::new(b.center[0], b.center[1]);
        let near = network.nearest_lane_position(center);
        let lane = network.lane(&near.lane_id).expect("lane exists");
        let anchor = lane.pose_at(near.s, 0.0).position;
        let reach = b.half_extents[0].max(b.half_extents[1]) + b.airlock_margin;
        if center.distance(anchor) > reach {
            return Err(ScenarioError::Bubble(format!(
                "bubble {}: geometry does not lie on the map (nearest lane {:.1} m away)",
                b.id,
                center.distance(anchor)
            )));
        }
    }

    Ok(BoundScenario {
        spec: spec.clone(),
        name: name.to_string(),
        network,
        missions,
        flows,
    })
}

/// Load a scenario file plus its map (path relative to the scenario file) and
/// bind them.
pub fn load_bundle(path: &Path) -> Result<BoundScenario, ScenarioError> {
    let document = std::fs::read_to_string(path)?;
    let spec = parse_scenario(&document)?;
    let map_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&spec.map);
    let map_doc = std::fs::read_to_string(&map_path)?;
    let network = Arc::new(RoadNetwork::load(&map_doc)?);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".to_string());
    bind_scenario(&spec, &name, network)
}

/// Weighted draw of an actor name; deterministic given the rng state.
pub fn sample_actor<'a>(
    mix: &'a [(String, f64)],
    rng: &mut ChaCha8Rng,
) -> &'a str {
    let total: f64 = mix.iter().map(|(_, w)| w).sum();
    let draw: f64 = rng.gen();
    let mut acc = 0.0;
    for (name, w) in mix {
        acc += w / total;
        if draw < acc {
            return name;
        }
    }
    &mix.last().expect("non-empty mix").0
}
