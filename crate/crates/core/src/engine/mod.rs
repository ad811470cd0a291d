//! Core orchestration: provider stepping order, collision and event
//! detection, the reset/step environment API, and episode recording.
//!
//! The step order is normative: (1) collect social-agent actions, (2) apply
//! ego + social commands, (3) step background traffic, (4) bubble transitions
//! and reconciliation, (5) collisions, (6) events, (7) despawns, (8) sensing,
//! stacking and rewards, (9) episode record append.

pub mod collision;
pub mod log;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::agents::{
    build_agent, discrete_action_adapter, Action, AgentError, AgentInstance, AgentInterface,
    PolicyContext, Zoo,
};
use crate::bubbles::{
    classify_zone, reconcile_to_agent, reconcile_to_traffic, AgentPool, BubbleRuntime,
    ControlOwner, HandoverEvent, OwnerKind, Transition, TrafficPersona, Zone,
};
use crate::map::{LaneId, RoadNetwork, Route};
use crate::math::Vec2;
use crate::scenario::{BoundMission, BoundScenario, ScenarioError};
use crate::sensing::{
    compute_reward, sense_frame, EventFlags, FrameHistory, SensedVehicle, StackedObservation,
};
use crate::traffic::{Blocker, IdmParams, TrafficProvider};
use crate::vehicle::{apply_command, ControlCommand, ControlInfo, VehicleId, VehicleModel, VehicleState};
use crate::DT;

use collision::detect_collisions;
use log::{
    AgentInfoRecord, EpisodeLog, InteractionRecord, LogHeader, RewardRecord, SpawnRecord,
    StepRecord, VehicleRecord,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("missing action for live ego agent `{0}`")]
    MissingEgoAction(String),
    #[error("action supplied for unknown or finished agent `{0}`")]
    UnknownEgo(String),
    #[error("missions `{0}` and `{1}` have overlapping start positions")]
    OverlappingStarts(String, String),
    #[error("no ego setup supplied for mission `{0}`")]
    MissionUnassigned(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

/// Engine tunables.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub dt: f64,
    pub remote: crate::agents::RemoteConfig,
    /// Consecutive steps of reversed heading before wrong_way fires.
    pub wrong_way_steps: u32,
    /// Interaction-window radius for game metrics, m.
    pub interaction_radius: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            dt: DT,
            remote: crate::agents::RemoteConfig::default(),
            wrong_way_steps: 5,
            interaction_radius: 15.0,
        }
    }
}

/// How one ego agent is wired into the simulation.
#[derive(Debug, Clone)]
pub struct EgoSetup {
    pub interface: AgentInterface,
    /// Human-readable policy reference for the log header.
    pub policy_label: String,
}

/// Ego action plus whether the caller substituted it (remote timeout).
#[derive(Debug, Clone)]
pub struct EgoInput {
    pub action: Action,
    pub substituted: bool,
}

impl From<Action> for EgoInput {
    fn from(action: Action) -> Self {
        EgoInput {
            action,
            substituted: false,
        }
    }
}

#[derive(Debug)]
struct EgoRuntime {
    mission_idx: usize,
    interface: AgentInterface,
    target_speed: f64,
    progress: f64,
    wrong_way_count: u32,
    history: FrameHistory,
    done: bool,
}

#[derive(Debug)]
struct SocialRuntime {
    instance_id: String,
    persona: TrafficPersona,
    route: Route,
    target_speed: f64,
    history: FrameHistory,
}

#[derive(Debug)]
enum Kind {
    Ego(EgoRuntime),
    Traffic,
    Social(SocialRuntime),
}

#[derive(Debug)]
pub struct SimVehicle {
    pub state: VehicleState,
    kind: Kind,
}

impl SimVehicle {
    pub fn owner(&self) -> ControlOwner {
        match &self.kind {
            Kind::Ego(_) => ControlOwner::EgoAgent(self.state.id.as_str().to_string()),
            Kind::Traffic => ControlOwner::TrafficProvider,
            Kind::Social(s) => ControlOwner::SocialAgent(s.instance_id.clone()),
        }
    }

    fn owner_kind(&self) -> OwnerKind<'_> {
        match &self.kind {
            Kind::Ego(_) => OwnerKind::Ego,
            Kind::Traffic => OwnerKind::Traffic,
            Kind::Social(s) => OwnerKind::Social(&s.instance_id),
        }
    }
}

/// Complete simulation state: clock, vehicles, ownership, bubbles, rng.
#[derive(Debug)]
pub struct World {
    pub step_index: u64,
    pub vehicles: BTreeMap<VehicleId, SimVehicle>,
}

impl World {
    /// Simulation time; exactly step_index * dt.
    pub fn time(&self, dt: f64) -> f64 {
        self.step_index as f64 * dt
    }

    /// Ownership map view; keys always equal the vehicle keys.
    pub fn ownership(&self) -> BTreeMap<VehicleId, ControlOwner> {
        self.vehicles
            .iter()
            .map(|(id, v)| (id.clone(), v.owner()))
            .collect()
    }
}

/// Per-agent outcome of one step.
#[derive(Debug, Clone)]
pub struct AgentStepResult {
    pub observation: StackedObservation,
    /// Shaped reward.
    pub reward: f64,
    pub raw_reward: f64,
    pub done: bool,
    pub events: EventFlags,
    pub control: ControlInfo,
    pub progress: f64,
    /// Context a stateless policy needs next step.
    pub context: PolicyContext,
}

/// Event detection for one ego at the end of a step.
#[allow(clippy::too_many_arguments)]
pub fn detect_events(
    network: &RoadNetwork,
    state: &VehicleState,
    mission: &BoundMission,
    collided: bool,
    wrong_way_count: u32,
    wrong_way_threshold: u32,
    completed_steps: u64,
    max_steps: u32,
) -> EventFlags {
    let nearest = network.nearest_lane_position(state.position);
    let off_road = nearest.t.abs() > network.off_road_margin(&nearest.lane_id);
    let reached_goal = state.position.distance(mission.goal_point) <= mission.goal_radius;
    let wrong_way = wrong_way_count >= wrong_way_threshold;
    let timeout = completed_steps >= max_steps as u64 && !reached_goal;
    EventFlags {
        collision: collided,
        off_road,
        reached_goal,
        wrong_way,
        timeout,
    }
}

struct EnginePool<'a> {
    zoo: &'a Zoo,
    agents: &'a mut BTreeMap<String, AgentInstance>,
    counter: &'a mut u64,
    remote: &'a crate::agents::RemoteConfig,
    bubble_id: String,
    anomalies: &'a mut Vec<String>,
}

impl AgentPool for EnginePool<'_> {
    fn reserve(&mut self, agent_ref: &str, vehicle: &VehicleId) -> Option<String> {
        let spec = match self.zoo.resolve(agent_ref) {
            Ok(s) => s,
            Err(e) => {
                self.anomalies
                    .push(format!("bubble {}: {e}", self.bubble_id));
                return None;
            }
        };
        *self.counter += 1;
        let instance_id = format!("{}:{}:{}", self.bubble_id, agent_ref, self.counter);
        match build_agent(&spec, self.zoo, instance_id.clone(), self.remote) {
            Ok(agent) => {
                self.agents.insert(instance_id.clone(), agent);
                Some(instance_id)
            }
            Err(e) => {
                self.anomalies
                    .push(format!("bubble {}: agent build for {vehicle} failed: {e}", self.bubble_id));
                None
            }
        }
    }

    fn release(&mut self, instance: &str) {
        if let Some(mut agent) = self.agents.remove(instance) {
            agent.close();
        }
    }
}

/// One running episode.
pub struct Simulation {
    pub scenario: BoundScenario,
    pub config: EngineConfig,
    pub world: World,
    pub log: EpisodeLog,
    zoo: Arc<Zoo>,
    traffic: TrafficProvider,
    bubbles: Vec<BubbleRuntime>,
    agents: BTreeMap<String, AgentInstance>,
    instance_counter: u64,
    reserved_histories: BTreeMap<VehicleId, FrameHistory>,
    rng: ChaCha8Rng,
    idm: IdmParams,
    /// Egos that finished and left the world.
    finished: BTreeMap<VehicleId, ()>,
}

impl Simulation {
    /// Place egos at their mission starts, seed the rng, emit the first
    /// observations.
    pub fn reset(
        scenario: &BoundScenario,
        seed: u64,
        egos: &BTreeMap<String, EgoSetup>,
        zoo: Arc<Zoo>,
        config: EngineConfig,
    ) -> Result<(Self, BTreeMap<String, AgentStepResult>), EngineError> {
        // every mission needs an ego setup
        for m in &scenario.missions {
            if !egos.contains_key(&m.agent_id) {
                return Err(EngineError::MissionUnassigned(m.agent_id.clone()));
            }
        }
        // bubble agent refs must resolve now, not mid-episode
        for b in &scenario.spec.bubbles {
            zoo.resolve(&b.agent)
                .map_err(|e| EngineError::Scenario(ScenarioError::Bubble(e.to_string())))?;
        }

        let network = scenario.network.clone();
        let mut vehicles = BTreeMap::new();
        for (idx, mission) in scenario.missions.iter().enumerate() {
            let lane = network.lane(&mission.start.lane_id).expect("bound lane");
            let pose = lane.pose_at(mission.start.s, mission.start.t);
            let setup = &egos[&mission.agent_id];
            let model = VehicleModel::default();
            let state = VehicleState::new(mission.agent_id.as_str(), pose, 0.0, &model);
            vehicles.insert(
                VehicleId::new(mission.agent_id.clone()),
                SimVehicle {
                    state,
                    kind: Kind::Ego(EgoRuntime {
                        mission_idx: idx,
                        interface: setup.interface.clone(),
                        target_speed: lane.speed_limit,
                        progress: 0.0,
                        wrong_way_count: 0,
                        history: FrameHistory::default(),
                        done: false,
                    }),
                },
            );
        }

        // overlapping mission starts are a scenario error
        let ids: Vec<VehicleId> = vehicles.keys().cloned().collect();
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                if vehicles[a]
                    .state
                    .footprint()
                    .overlaps(&vehicles[b].state.footprint())
                {
                    return Err(EngineError::OverlappingStarts(
                        a.as_str().to_string(),
                        b.as_str().to_string(),
                    ));
                }
            }
        }

        let agents_header: BTreeMap<String, String> = scenario
            .missions
            .iter()
            .map(|m| (m.agent_id.clone(), egos[&m.agent_id].policy_label.clone()))
            .collect();
        let canonical = crate::scenario::serialize_scenario(&scenario.spec);
        let agent_list = agents_header
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(",");
        let header = LogHeader {
            format: log::LOG_FORMAT,
            kind: "header".into(),
            scenario: scenario.name.clone(),
            seed,
            dt: config.dt,
            map: scenario.spec.map.clone(),
            agents: agents_header,
            config_hash: log::config_hash(&[&canonical, &seed.to_string(), &agent_list]),
        };

        let mut sim = Simulation {
            scenario: scenario.clone(),
            config,
            world: World {
                step_index: 0,
                vehicles,
            },
            log: EpisodeLog {
                header,
                steps: Vec::new(),
            },
            zoo,
            traffic: TrafficProvider::new(scenario.flows.clone()),
            bubbles: {
                let mut specs = scenario.spec.bubbles.clone();
                specs.sort_by(|a, b| a.id.cmp(&b.id));
                specs.into_iter().map(BubbleRuntime::new).collect()
            },
            agents: BTreeMap::new(),
            instance_counter: 0,
            reserved_histories: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            idm: IdmParams::default(),
            finished: BTreeMap::new(),
        };

        // first observations (no step record yet)
        let mut initial = BTreeMap::new();
        let sensed = sim.sensed_vehicles();
        let ego_ids: Vec<VehicleId> = sim.ego_ids();
        for id in &ego_ids {
            let (frame, ctx) = {
                let v = &sim.world.vehicles[id];
                let Kind::Ego(rt) = &v.kind else { unreachable!() };
                let mission = &sim.scenario.missions[rt.mission_idx];
                let frame = sense_frame(
                    &sim.scenario.network,
                    &v.state,
                    &sensed,
                    Some(&mission.route),
                    mission.goal_point,
                    &rt.interface.sensors,
                );
                let ctx = sim.context_for(&v.state, rt.target_speed);
                (frame, ctx)
            };
            let v = sim.world.vehicles.get_mut(id).unwrap();
            let Kind::Ego(rt) = &mut v.kind else {
                unreachable!()
            };
            rt.history.push(frame);
            let obs = rt.history.stack().expect("one frame pushed");
            initial.insert(
                id.as_str().to_string(),
                AgentStepResult {
                    observation: obs,
                    reward: 0.0,
                    raw_reward: 0.0,
                    done: false,
                    events: EventFlags::default(),
                    control: ControlInfo::default(),
                    progress: 0.0,
                    context: ctx,
                },
            );
        }
        Ok((sim, initial))
    }

    pub fn all_done(&self) -> bool {
        self.scenario.missions.iter().all(|m| {
            let id = VehicleId::new(m.agent_id.clone());
            self.finished.contains_key(&id)
                || matches!(
                    self.world.vehicles.get(&id),
                    Some(SimVehicle {
                        kind: Kind::Ego(rt),
                        ..
                    }) if rt.done
                )
        })
    }

    pub fn live_egos(&self) -> Vec<String> {
        self.ego_runtimes()
            .filter(|(_, rt)| !rt.done)
            .map(|(id, _)| id.as_str().to_string())
            .collect()
    }

    fn ego_ids(&self) -> Vec<VehicleId> {
        self.world
            .vehicles
            .iter()
            .filter(|(_, v)| matches!(v.kind, Kind::Ego(_)))
            .map(|(id, _)| id.clone())
            .collect()
    }

    fn ego_runtimes(&self) -> impl Iterator<Item = (&VehicleId, &EgoRuntime)> {
        self.world.vehicles.iter().filter_map(|(id, v)| match &v.kind {
            Kind::Ego(rt) => Some((id, rt)),
            _ => None,
        })
    }

    fn sensed_vehicles(&self) -> Vec<SensedVehicle> {
        self.world
            .vehicles
            .values()
            .map(|v| SensedVehicle::from_state(&v.state))
            .collect()
    }

    fn context_for(&self, state: &VehicleState, target_speed: f64) -> PolicyContext {
        let nearest = self.scenario.network.nearest_lane_position(state.position);
        let limit = self
            .scenario
            .network
            .lane(&nearest.lane_id)
            .map(|l| l.speed_limit)
            .unwrap_or(13.9);
        PolicyContext {
            lane_speed_limit: limit,
            speed: state.speed,
            current_target_speed: target_speed,
            time_headway: self.idm.time_headway,
        }
    }

    fn blocker_for(&self, id: &VehicleId, v: &SimVehicle) -> Blocker {
        let network = &self.scenario.network;
        let nearest = network.nearest_lane_position(v.state.position);
        let route = match &v.kind {
            Kind::Ego(rt) => Some(&self.scenario.missions[rt.mission_idx].route),
            Kind::Social(rt) => Some(&rt.route),
            Kind::Traffic => None,
        };
        let junction = if let Some(j) = network.junction_of(&nearest.lane_id) {
            Some((j, nearest.lane_id.clone(), 0.0))
        } else if let Some(route) = route {
            // approaching: the route's next lane is a junction lane
            route
                .lane_ids
                .iter()
                .position(|l| *l == nearest.lane_id)
                .and_then(|i| route.lane_ids.get(i + 1))
                .and_then(|next| network.junction_of(next).map(|j| (j, next.clone())))
                .and_then(|(j, jlane)| {
                    let lane = network.lane(&nearest.lane_id).expect("lane");
                    let dist = lane.length() - nearest.s - v.state.length * 0.5;
                    if dist <= 30.0 && v.state.speed > 0.3 {
                        Some((j, jlane, dist.max(0.1)))
                    } else if dist <= 30.0 {
                        // stopped ego at the line still occupies the approach
                        Some((j, jlane, dist.max(0.1)))
                    } else {
                        None
                    }
                })
        } else {
            None
        };
        Blocker {
            id: id.clone(),
            lane: nearest.lane_id,
            s: nearest.s,
            speed: v.state.speed,
            length: v.state.length,
            junction,
        }
    }

    /// Remaining route lanes for interaction analysis: (lanes, index of the
    /// current lane within the full route).
    fn remaining_route(&self, id: &VehicleId, v: &SimVehicle) -> Option<(Vec<LaneId>, usize)> {
        let network = &self.scenario.network;
        match &v.kind {
            Kind::Traffic => self.traffic.vehicles.get(id).map(|tv| {
                (
                    tv.route.lane_ids[tv.lane_idx..].to_vec(),
                    tv.lane_idx,
                )
            }),
            Kind::Social(rt) => {
                let nearest = network.nearest_lane_position(v.state.position);
                let idx = rt.route.lane_ids.iter().position(|l| *l == nearest.lane_id)?;
                Some((rt.route.lane_ids[idx..].to_vec(), idx))
            }
            Kind::Ego(rt) => {
                let mission = &self.scenario.missions[rt.mission_idx];
                let nearest = network.nearest_lane_position(v.state.position);
                let idx = mission
                    .route
                    .lane_ids
                    .iter()
                    .position(|l| *l == nearest.lane_id)
                    .unwrap_or(0);
                Some((mission.route.lane_ids[idx..].to_vec(), idx))
            }
        }
    }

    /// Interaction windows around one ego: nearby vehicles with crossing or
    /// merging remaining routes.
    fn interactions_for(&self, ego_id: &VehicleId) -> Vec<InteractionRecord> {
        let network = &self.scenario.network;
        let ego = &self.world.vehicles[ego_id];
        let Some((ego_remaining, _)) = self.remaining_route(ego_id, ego) else {
            return Vec::new();
        };
        let ego_current = network.nearest_lane_position(ego.state.position).lane_id;
        let mut out = Vec::new();
        for (oid, other) in &self.world.vehicles {
            if oid == ego_id {
                continue;
            }
            if ego.state.position.distance(other.state.position) > self.config.interaction_radius {
                continue;
            }
            let Some((other_remaining, _)) = self.remaining_route(oid, other) else {
                continue;
            };
            let other_current = network.nearest_lane_position(other.state.position).lane_id;

            // crossing: conflicting junction lanes in the remaining routes
            let mut crossing = false;
            let mut crossing_cleared = true;
            for a in &ego_remaining {
                if network.junction_of(a).is_none() {
                    continue;
                }
                for (bi, b) in other_remaining.iter().enumerate() {
                    if network.lanes_conflict(a, b) {
                        crossing = true;
                        // cleared once the other is past its conflicting lane
                        if bi > 0 || *b == other_current {
                            crossing_cleared = false;
                        }
                    }
                }
            }
            // also conflicts the other has already passed
            if !crossing {
                // check the other's full route for an already-passed conflict
                if let Some(tv) = self.traffic.vehicles.get(oid) {
                    for a in &ego_remaining {
                        if network.junction_of(a).is_none() {
                            continue;
                        }
                        for (bi, b) in tv.route.lane_ids.iter().enumerate() {
                            if network.lanes_conflict(a, b) && bi < tv.lane_idx {
                                crossing = true;
                            }
                        }
                    }
                }
            }

            // merging: a shared future lane approached from different lanes
            let merging = other_current != ego_current
                && ego_remaining
                    .iter()
                    .skip(1)
                    .any(|l| other_remaining.contains(l));

            if crossing {
                out.push(InteractionRecord {
                    other: oid.clone(),
                    kind: "crossing".into(),
                    other_cleared: crossing_cleared,
                });
            } else if merging {
                let shared_behind = false; // merging windows close by distance
                out.push(InteractionRecord {
                    other: oid.clone(),
                    kind: "merging".into(),
                    other_cleared: shared_behind,
                });
            }
        }
        out
    }

    /// Advance one fixed timestep. `ego_inputs` must contain an action for
    /// every live ego.
    pub fn step(
        &mut self,
        ego_inputs: &BTreeMap<String, EgoInput>,
    ) -> Result<BTreeMap<String, AgentStepResult>, EngineError> {
        let network = self.scenario.network.clone();
        let dt = self.config.dt;
        let time = self.world.time(dt);
        let mut anomalies: Vec<String> = Vec::new();

        // input validation
        for id in self.live_egos() {
            if !ego_inputs.contains_key(&id) {
                return Err(EngineError::MissingEgoAction(id));
            }
        }
        for key in ego_inputs.keys() {
            let vid = VehicleId::new(key.clone());
            match self.world.vehicles.get(&vid) {
                Some(SimVehicle {
                    kind: Kind::Ego(rt),
                    ..
                }) if !rt.done => {}
                _ => return Err(EngineError::UnknownEgo(key.clone())),
            }
        }

        let mut actions_log: BTreeMap<String, Action> = BTreeMap::new();
        let mut commands_log: BTreeMap<String, ControlCommand> = BTreeMap::new();
        let mut infos: BTreeMap<String, AgentInfoRecord> = BTreeMap::new();

        // (1) social-agent actions from last step's observations
        let social_ids: Vec<VehicleId> = self
            .world
            .vehicles
            .iter()
            .filter(|(_, v)| matches!(v.kind, Kind::Social(_)))
            .map(|(id, _)| id.clone())
            .collect();
        let mut social_actions: BTreeMap<VehicleId, (Action, bool)> = BTreeMap::new();
        let sensed_now = self.sensed_vehicles();
        for id in &social_ids {
            let (obs, ctx, instance_id) = {
                let v = &self.world.vehicles[id];
                let Kind::Social(rt) = &v.kind else {
                    unreachable!()
                };
                let obs = match rt.history.stack() {
                    Some(s) => s,
                    None => {
                        // captured without airlock warmup: sense on demand
                        let frame = sense_frame(
                            &network,
                            &v.state,
                            &sensed_now,
                            Some(&rt.route),
                            v.state.position,
                            &self.agents[&rt.instance_id].interface.sensors,
                        );
                        StackedObservation {
                            frames: [frame.clone(), frame.clone(), frame],
                        }
                    }
                };
                let ctx = self.context_for(&v.state, rt.target_speed);
                (obs, ctx, rt.instance_id.clone())
            };
            let agent = self.agents.get_mut(&instance_id).expect("instance exists");
            let (action, substituted) = agent.act(self.world.step_index, &obs, &ctx);
            social_actions.insert(id.clone(), (action, substituted));
        }

        // (2) apply ego + social commands
        let ego_ids = self.ego_ids();
        for id in &ego_ids {
            let (done, ctx, mission_route) = {
                let v = &self.world.vehicles[id];
                let Kind::Ego(rt) = &v.kind else { unreachable!() };
                (
                    rt.done,
                    self.context_for(&v.state, rt.target_speed),
                    self.scenario.missions[rt.mission_idx].route.clone(),
                )
            };
            if done {
                continue;
            }
            let input = &ego_inputs[id.as_str()];
            let command = match &input.action {
                Action::Discrete(d) => discrete_action_adapter(*d, &ctx),
                Action::Command(c) => c.clone(),
            };
            let v = self.world.vehicles.get_mut(id).unwrap();
            let model = VehicleModel::default();
            let (next, control) = match apply_command(
                &v.state,
                &model,
                &network,
                &command,
                Some(&mission_route),
                dt,
            ) {
                Ok(r) => r,
                Err(e) => {
                    // off-road vehicles coast straight with full brake
                    anomalies.push(format!("{id}: {e}"));
                    let (next, control) = crate::vehicle::integrate_continuous(
                        &v.state, &model, 0.0, 1.0, 0.0, dt,
                    );
                    (next, control)
                }
            };
            v.state = next;
            if let Kind::Ego(rt) = &mut v.kind {
                if let ControlCommand::LaneFollowing { target_speed, .. } = command {
                    rt.target_speed = target_speed;
                }
            }
            actions_log.insert(id.as_str().to_string(), input.action.clone());
            commands_log.insert(id.as_str().to_string(), command);
            infos.insert(
                id.as_str().to_string(),
                AgentInfoRecord {
                    control,
                    substituted: input.substituted,
                    progress: 0.0,
                    wrong_way_count: 0,
                },
            );
        }
        for (id, (action, substituted)) in &social_actions {
            let (ctx, route, model) = {
                let v = &self.world.vehicles[id];
                let Kind::Social(rt) = &v.kind else {
                    unreachable!()
                };
                (
                    self.context_for(&v.state, rt.target_speed),
                    rt.route.clone(),
                    rt.persona.actor.vehicle.clone(),
                )
            };
            let command = match action {
                Action::Discrete(d) => discrete_action_adapter(*d, &ctx),
                Action::Command(c) => c.clone(),
            };
            let v = self.world.vehicles.get_mut(id).unwrap();
            match apply_command(&v.state, &model, &network, &command, Some(&route), dt) {
                Ok((next, control)) => {
                    v.state = next;
                    if let Kind::Social(rt) = &mut v.kind {
                        if let ControlCommand::LaneFollowing { target_speed, .. } = command {
                            rt.target_speed = target_speed;
                        }
                    }
                    infos.insert(
                        id.as_str().to_string(),
                        AgentInfoRecord {
                            control,
                            substituted: *substituted,
                            progress: 0.0,
                            wrong_way_count: 0,
                        },
                    );
                }
                Err(e) => {
                    anomalies.push(format!("{id}: social control failed: {e}"));
                }
            }
            actions_log.insert(id.as_str().to_string(), action.clone());
            commands_log.insert(id.as_str().to_string(), command);
        }

        // (3) background traffic
        let blockers: Vec<Blocker> = self
            .world
            .vehicles
            .iter()
            .filter(|(_, v)| !matches!(v.kind, Kind::Traffic))
            .map(|(id, v)| self.blocker_for(id, v))
            .collect();
        let traffic_events = self.traffic.step(
            &network,
            time,
            dt,
            &blockers,
            &mut self.rng,
            &self.scenario.spec.actors,
        );
        let mut spawn_records = Vec::new();
        for id in &traffic_events.spawned {
            let tv = &self.traffic.vehicles[id];
            let pose = tv.pose(&network);
            let mut state = VehicleState::new(id.as_str(), pose, tv.speed, &tv.actor.vehicle);
            state.accel = tv.accel;
            self.world.vehicles.insert(
                id.clone(),
                SimVehicle {
                    state,
                    kind: Kind::Traffic,
                },
            );
            spawn_records.push(SpawnRecord {
                id: id.clone(),
                actor: tv.actor_name.clone(),
                route: tv.route.lane_ids.clone(),
                desired_speed: tv.desired_speed,
            });
        }
        let mut despawns: Vec<VehicleId> = Vec::new();
        for id in &traffic_events.despawned {
            self.world.vehicles.remove(id);
            despawns.push(id.clone());
        }
        // sync traffic poses into the world
        for (id, tv) in &self.traffic.vehicles {
            if let Some(v) = self.world.vehicles.get_mut(id) {
                let pose = tv.pose(&network);
                v.state.position = pose.position;
                v.state.heading = pose.heading;
                v.state.speed = tv.speed;
                v.state.accel = tv.accel;
                v.state.steering = 0.0;
            }
        }

        // (4) bubble transitions + reconciliation
        let mut handovers: Vec<HandoverEvent> = Vec::new();
        for bi in 0..self.bubbles.len() {
            let views: Vec<(VehicleId, Vec2, OwnerKind)> = self
                .world
                .vehicles
                .iter()
                .map(|(id, v)| (id.clone(), v.state.position, v.owner_kind()))
                .collect();
            let transitions = {
                let bubble = &mut self.bubbles[bi];
                let mut pool = EnginePool {
                    zoo: &self.zoo,
                    agents: &mut self.agents,
                    counter: &mut self.instance_counter,
                    remote: &self.config.remote,
                    bubble_id: bubble.spec.id.clone(),
                    anomalies: &mut anomalies,
                };
                bubble.step_transitions(time, &views, &mut pool)
            };
            for tr in transitions {
                match tr {
                    Transition::Acquire { vehicle, instance } => {
                        let Some(tv) = self.traffic.release(&vehicle) else {
                            anomalies.push(format!("{vehicle}: acquire of non-traffic vehicle"));
                            continue;
                        };
                        let pose = tv.pose(&network);
                        let persona = TrafficPersona {
                            actor_name: tv.actor_name.clone(),
                            actor: tv.actor.clone(),
                            dest: tv.dest.clone(),
                            desired_speed: tv.desired_speed,
                        };
                        let state =
                            reconcile_to_agent(&vehicle, pose, tv.speed, &tv.actor.vehicle);
                        let history = self
                            .reserved_histories
                            .remove(&vehicle)
                            .unwrap_or_default();
                        let v = self.world.vehicles.get_mut(&vehicle).expect("vehicle");
                        let from = v.owner();
                        v.state = state;
                        v.kind = Kind::Social(SocialRuntime {
                            instance_id: instance.clone(),
                            persona,
                            route: tv.route.clone(),
                            target_speed: tv.desired_speed,
                            history,
                        });
                        handovers.push(HandoverEvent {
                            vehicle_id: vehicle.clone(),
                            from_owner: from,
                            to_owner: ControlOwner::SocialAgent(instance),
                            time,
                            pose,
                        });
                    }
                    Transition::Release { vehicle, instance } => {
                        let Some(v) = self.world.vehicles.get_mut(&vehicle) else {
                            continue;
                        };
                        let Kind::Social(rt) = &v.kind else {
                            continue;
                        };
                        let persona = rt.persona.clone();
                        let pose_before = v.state.pose();
                        match reconcile_to_traffic(&network, &v.state, &persona, time) {
                            Ok(tv) => {
                                let pose = tv.pose(&network);
                                v.state.position = pose.position;
                                v.state.heading = pose.heading;
                                v.state.steering = 0.0;
                                v.state.accel = 0.0;
                                v.kind = Kind::Traffic;
                                self.traffic.adopt(tv);
                                handovers.push(HandoverEvent {
                                    vehicle_id: vehicle.clone(),
                                    from_owner: ControlOwner::SocialAgent(instance),
                                    to_owner: ControlOwner::TrafficProvider,
                                    time,
                                    pose: pose_before,
                                });
                            }
                            Err(e) => {
                                anomalies.push(e.to_string());
                                self.world.vehicles.remove(&vehicle);
                                despawns.push(vehicle.clone());
                            }
                        }
                    }
                    Transition::CapacityBlocked { vehicle } => {
                        anomalies.push(format!(
                            "bubble {}: {vehicle} blocked by capacity",
                            self.bubbles[bi].spec.id
                        ));
                    }
                }
            }
        }

        // (5) collisions
        let footprints: Vec<(VehicleId, crate::math::Obb)> = self
            .world
            .vehicles
            .iter()
            .map(|(id, v)| (id.clone(), v.state.footprint()))
            .collect();
        let collisions = detect_collisions(&footprints);
        let mut collided: std::collections::BTreeSet<VehicleId> = std::collections::BTreeSet::new();
        for (a, b) in &collisions {
            collided.insert(a.clone());
            collided.insert(b.clone());
        }

        // (6) events per ego (wrong-way counters update first)
        let completed_steps = self.world.step_index + 1;
        let max_steps = self.scenario.spec.max_episode_steps;
        let mut events_map: BTreeMap<String, EventFlags> = BTreeMap::new();
        for id in &ego_ids {
            let v = match self.world.vehicles.get(id) {
                Some(v) => v,
                None => continue,
            };
            let Kind::Ego(rt) = &v.kind else { unreachable!() };
            if rt.done {
                continue;
            }
            let nearest = network.nearest_lane_position(v.state.position);
            let err = crate::map::heading_error(&network, &v.state.pose(), &nearest);
            let count = if err.abs() > std::f64::consts::FRAC_PI_2 {
                rt.wrong_way_count + 1
            } else {
                0
            };
            let mission = &self.scenario.missions[rt.mission_idx];
            let events = detect_events(
                &network,
                &v.state,
                mission,
                collided.contains(id),
                count,
                self.config.wrong_way_steps,
                completed_steps,
                max_steps,
            );
            let v = self.world.vehicles.get_mut(id).unwrap();
            let Kind::Ego(rt) = &mut v.kind else {
                unreachable!()
            };
            rt.wrong_way_count = count;
            events_map.insert(id.as_str().to_string(), events);
        }

        // (7) despawn crashed traffic / social vehicles
        for id in collided.clone() {
            let Some(v) = self.world.vehicles.get(&id) else {
                continue;
            };
            match &v.kind {
                Kind::Traffic => {
                    self.traffic.release(&id);
                    self.world.vehicles.remove(&id);
                    despawns.push(id.clone());
                }
                Kind::Social(rt) => {
                    let instance = rt.instance_id.clone();
                    if let Some(mut agent) = self.agents.remove(&instance) {
                        agent.close();
                    }
                    for bubble in &mut self.bubbles {
                        bubble.owned.remove(&id);
                    }
                    self.world.vehicles.remove(&id);
                    despawns.push(id.clone());
                    anomalies.push(format!("{id}: crashed under agent control; despawned"));
                }
                Kind::Ego(_) => {}
            }
        }

        // (8) sensing, stacking, rewards; social + reserved warmup frames
        let sensed = self.sensed_vehicles();
        let weights = self.scenario.spec.reward_weights;
        let mut results: BTreeMap<String, AgentStepResult> = BTreeMap::new();
        let mut interactions: BTreeMap<String, Vec<InteractionRecord>> = BTreeMap::new();
        for id in &ego_ids {
            let Some(v) = self.world.vehicles.get(id) else {
                continue;
            };
            let Kind::Ego(rt) = &v.kind else { unreachable!() };
            if rt.done {
                continue;
            }
            let mission = &self.scenario.missions[rt.mission_idx];
            let frame = sense_frame(
                &network,
                &v.state,
                &sensed,
                Some(&mission.route),
                mission.goal_point,
                &rt.interface.sensors,
            );
            let prev_progress = rt.progress;
            let new_progress = network
                .project_onto_route(&mission.route, v.state.position)
                .map(|(p, _)| p)
                .unwrap_or(prev_progress);
            let events = events_map
                .get(id.as_str())
                .copied()
                .unwrap_or_default();
            let (raw, shaped) = compute_reward(prev_progress, new_progress, &events, &weights);
            let done = events.any_terminal();
            let ctx = self.context_for(&v.state, rt.target_speed);
            let inter = self.interactions_for(id);
            if !inter.is_empty() {
                interactions.insert(id.as_str().to_string(), inter);
            }

            let v = self.world.vehicles.get_mut(id).unwrap();
            let Kind::Ego(rt) = &mut v.kind else {
                unreachable!()
            };
            rt.history.push(frame);
            rt.progress = new_progress;
            rt.done = done;
            let obs = rt.history.stack().expect("history non-empty");
            let wrong_way_count = rt.wrong_way_count;
            let info = infos.entry(id.as_str().to_string()).or_insert(AgentInfoRecord {
                control: ControlInfo::default(),
                substituted: false,
                progress: 0.0,
                wrong_way_count: 0,
            });
            info.progress = new_progress;
            info.wrong_way_count = wrong_way_count;
            results.insert(
                id.as_str().to_string(),
                AgentStepResult {
                    observation: obs,
                    reward: shaped,
                    raw_reward: raw,
                    done,
                    events,
                    control: info.control,
                    progress: new_progress,
                    context: ctx,
                },
            );
        }
        // social sensing for next step's actions
        let social_now: Vec<VehicleId> = self
            .world
            .vehicles
            .iter()
            .filter(|(_, v)| matches!(v.kind, Kind::Social(_)))
            .map(|(id, _)| id.clone())
            .collect();
        for id in &social_now {
            let frame = {
                let v = &self.world.vehicles[id];
                let Kind::Social(rt) = &v.kind else {
                    unreachable!()
                };
                sense_frame(
                    &network,
                    &v.state,
                    &sensed,
                    Some(&rt.route),
                    v.state.position,
                    &self.agents[&rt.instance_id].interface.sensors,
                )
            };
            let v = self.world.vehicles.get_mut(id).unwrap();
            let Kind::Social(rt) = &mut v.kind else {
                unreachable!()
            };
            rt.history.push(frame);
        }
        // airlock warmup frames for reserved vehicles
        let mut reserved: Vec<(VehicleId, String)> = Vec::new();
        for bubble in &self.bubbles {
            for (vid, instance) in &bubble.reserved {
                reserved.push((vid.clone(), instance.clone()));
            }
        }
        for (vid, instance) in reserved {
            let Some(v) = self.world.vehicles.get(&vid) else {
                continue;
            };
            let sensors = self.agents[&instance].interface.sensors.clone();
            let frame = sense_frame(&network, &v.state, &sensed, None, v.state.position, &sensors);
            self.reserved_histories.entry(vid).or_default().push(frame);
        }
        self.reserved_histories.retain(|vid, _| {
            self.bubbles
                .iter()
                .any(|b| b.reserved.contains_key(vid))
        });

        // (9) record + clock
        let vehicles_record: Vec<VehicleRecord> = self
            .world
            .vehicles
            .iter()
            .map(|(id, v)| {
                let nearest = network.nearest_lane_position(v.state.position);
                let limit = network
                    .lane(&nearest.lane_id)
                    .map(|l| l.speed_limit)
                    .unwrap_or(0.0);
                VehicleRecord {
                    id: id.clone(),
                    x: v.state.position.x,
                    y: v.state.position.y,
                    heading: v.state.heading,
                    speed: v.state.speed,
                    accel: v.state.accel,
                    steering: v.state.steering,
                    length: v.state.length,
                    width: v.state.width,
                    owner: v.owner(),
                    lane: nearest.lane_id.clone(),
                    lane_limit: limit,
                    dist_center: nearest.t,
                }
            })
            .collect();
        let dones: BTreeMap<String, bool> = results
            .iter()
            .map(|(k, r)| (k.clone(), r.done))
            .collect();
        let rewards: BTreeMap<String, RewardRecord> = results
            .iter()
            .map(|(k, r)| {
                (
                    k.clone(),
                    RewardRecord {
                        raw: r.raw_reward,
                        shaped: r.reward,
                    },
                )
            })
            .collect();
        self.log.steps.push(StepRecord {
            kind: "step".into(),
            step: self.world.step_index,
            time,
            vehicles: vehicles_record,
            actions: actions_log,
            commands: commands_log,
            rewards,
            dones,
            events: events_map,
            infos,
            handovers,
            spawns: spawn_records,
            despawns,
            lane_changes: traffic_events.lane_changes,
            interactions,
            collisions,
            anomalies,
        });
        self.world.step_index += 1;

        // done egos leave the world after their final record
        let done_ids: Vec<VehicleId> = self
            .world
            .vehicles
            .iter()
            .filter_map(|(id, v)| match &v.kind {
                Kind::Ego(rt) if rt.done => Some(id.clone()),
                _ => None,
            })
            .collect();
        for id in done_ids {
            self.world.vehicles.remove(&id);
            self.finished.insert(id, ());
        }

        Ok(results)
    }

    /// Zone of a point for every bubble, by bubble id. Exposed for the demo.
    pub fn bubble_zones(&self, point: Vec2) -> Vec<(String, Zone)> {
        self.bubbles
            .iter()
            .map(|b| (b.spec.id.clone(), classify_zone(&b.spec, point)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Pose;

    fn straight_scenario(flows: bool) -> BoundScenario {
        let map = serde_json::json!({
            "format": 1,
            "lanes": {
                "e_0": {"centerline": [[0.0,0.0],[300.0,0.0]], "width": 3.5, "speed_limit": 13.9},
                "w_0": {"centerline": [[300.0,3.5],[0.0,3.5]], "width": 3.5, "speed_limit": 13.9}
            },
            "edges": {"east": ["e_0"], "west": ["w_0"]}
        })
        .to_string();
        let network = Arc::new(RoadNetwork::load(&map).unwrap());
        let mut doc = serde_json::json!({
            "format": 1,
            "map": "maps/straight.json",
            "seed": 1,
            "max_episode_steps": 400,
            "missions": [
                {"agent_id": "a0", "start": ["east", 0, 10.0], "goal": ["east", 0, 290.0]}
            ],
            "actors": {"car": {}},
        });
        if flows {
            doc["flows"] = serde_json::json!([
                {"route": {"begin": ["east", 0, 5.0], "end": ["east", 0, 295.0]}, "rate": 0.3,
                  "actors": {"car": 1.0}}
            ]);
        }
        let spec = crate::scenario::parse_scenario(&doc.to_string()).unwrap();
        crate::scenario::bind_scenario(&spec, "straight", network).unwrap()
    }

    fn keep_lane_setup() -> BTreeMap<String, EgoSetup> {
        BTreeMap::from([(
            "a0".to_string(),
            EgoSetup {
                interface: AgentInterface::lane_follower(),
                policy_label: "keep_lane".into(),
            },
        )])
    }

    fn keep_lane_input(ctx: &PolicyContext) -> BTreeMap<String, EgoInput> {
        BTreeMap::from([(
            "a0".to_string(),
            EgoInput::from(Action::Command(ControlCommand::LaneFollowing {
                target_speed: ctx.lane_speed_limit,
                lane_change: 0,
            })),
        )])
    }

    #[test]
    fn reset_places_egos_with_zero_speed() {
        let scenario = straight_scenario(false);
        let zoo = Arc::new(Zoo::standard());
        let (sim, initial) = Simulation::reset(
            &scenario,
            42,
            &keep_lane_setup(),
            zoo,
            EngineConfig::default(),
        )
        .unwrap();
        assert_eq!(sim.world.vehicles.len(), 1);
        let v = &sim.world.vehicles[&VehicleId::from("a0")];
        assert_eq!(v.state.speed, 0.0);
        assert!((v.state.position.x - 10.0).abs() < 1e-9);
        assert!(initial["a0"].observation.frames[0].speed == 0.0);
        assert_eq!(sim.world.step_index, 0);
    }

    #[test]
    fn reset_is_deterministic() {
        let scenario = straight_scenario(true);
        let zoo = Arc::new(Zoo::standard());
        let run = || {
            let (_, initial) = Simulation::reset(
                &scenario,
                7,
                &keep_lane_setup(),
                Arc::new(Zoo::standard()),
                EngineConfig::default(),
            )
            .unwrap();
            serde_json::to_string(&initial["a0"].observation).unwrap()
        };
        let _ = zoo;
        assert_eq!(run(), run());
    }

    #[test]
    fn clock_only_step_is_stable() {
        let map = serde_json::json!({
            "format": 1,
            "lanes": {"l": {"centerline": [[0.0,0.0],[100.0,0.0]], "width": 3.5, "speed_limit": 10.0}},
            "edges": {"e": ["l"]}
        })
        .to_string();
        let network = Arc::new(RoadNetwork::load(&map).unwrap());
        let doc = serde_json::json!({"format": 1, "map": "m.json"}).to_string();
        let spec = crate::scenario::parse_scenario(&doc).unwrap();
        let scenario = crate::scenario::bind_scenario(&spec, "empty", network).unwrap();
        let (mut sim, _) = Simulation::reset(
            &scenario,
            1,
            &BTreeMap::new(),
            Arc::new(Zoo::standard()),
            EngineConfig::default(),
        )
        .unwrap();
        let before = format!("{:?}", sim.world.vehicles.keys().collect::<Vec<_>>());
        sim.step(&BTreeMap::new()).unwrap();
        sim.step(&BTreeMap::new()).unwrap();
        let after = format!("{:?}", sim.world.vehicles.keys().collect::<Vec<_>>());
        assert_eq!(before, after);
        assert_eq!(sim.world.step_index, 2);
        assert_eq!(sim.world.time(sim.config.dt), 0.2);
    }

    #[test]
    fn keep_lane_reward_telescopes_to_progress() {
        let scenario = straight_scenario(false);
        let (mut sim, initial) = Simulation::reset(
            &scenario,
            3,
            &keep_lane_setup(),
            Arc::new(Zoo::standard()),
            EngineConfig::default(),
        )
        .unwrap();
        let mut ctx = initial["a0"].context;
        let mut raw_sum = 0.0;
        let mut final_progress = 0.0;
        for _ in 0..400 {
            let results = sim.step(&keep_lane_input(&ctx)).unwrap();
            let Some(r) = results.get("a0") else { break };
            raw_sum += r.raw_reward;
            final_progress = r.progress;
            ctx = r.context;
            if r.done {
                assert!(r.events.reached_goal, "keep_lane should reach the goal");
                break;
            }
        }
        assert!(
            (raw_sum - final_progress).abs() < 1e-6,
            "telescoped {raw_sum} vs progress {final_progress}"
        );
        assert!(final_progress > 200.0);
        assert!(sim.all_done());
    }

    #[test]
    fn missing_ego_action_is_an_error() {
        let scenario = straight_scenario(false);
        let (mut sim, _) = Simulation::reset(
            &scenario,
            3,
            &keep_lane_setup(),
            Arc::new(Zoo::standard()),
            EngineConfig::default(),
        )
        .unwrap();
        assert!(matches!(
            sim.step(&BTreeMap::new()),
            Err(EngineError::MissingEgoAction(_))
        ));
    }

    #[test]
    fn overlapping_starts_error_at_reset() {
        let map = serde_json::json!({
            "format": 1,
            "lanes": {"l": {"centerline": [[0.0,0.0],[100.0,0.0]], "width": 3.5, "speed_limit": 10.0}},
            "edges": {"e": ["l"]}
        })
        .to_string();
        let network = Arc::new(RoadNetwork::load(&map).unwrap());
        let doc = serde_json::json!({
            "format": 1,
            "map": "m.json",
            "missions": [
                {"agent_id": "a0", "start": ["e", 0, 10.0], "goal": ["e", 0, 90.0]},
                {"agent_id": "a1", "start": ["e", 0, 11.0], "goal": ["e", 0, 95.0]}
            ]
        })
        .to_string();
        let spec = crate::scenario::parse_scenario(&doc).unwrap();
        let scenario = crate::scenario::bind_scenario(&spec, "overlap", network).unwrap();
        let mut egos = keep_lane_setup();
        egos.insert(
            "a1".into(),
            EgoSetup {
                interface: AgentInterface::lane_follower(),
                policy_label: "keep_lane".into(),
            },
        );
        assert!(matches!(
            Simulation::reset(
                &scenario,
                1,
                &egos,
                Arc::new(Zoo::standard()),
                EngineConfig::default()
            ),
            Err(EngineError::OverlappingStarts(_, _))
        ));
    }

    #[test]
    fn replaying_logged_actions_reproduces_the_log() {
        let scenario = straight_scenario(true);
        let zoo = Arc::new(Zoo::standard());
        let record = |actions_in: Option<&Vec<BTreeMap<String, Action>>>| {
            let (mut sim, initial) = Simulation::reset(
                &scenario,
                11,
                &keep_lane_setup(),
                zoo.clone(),
                EngineConfig::default(),
            )
            .unwrap();
            let mut ctx = initial["a0"].context;
            let mut actions_out: Vec<BTreeMap<String, Action>> = Vec::new();
            for i in 0..200 {
                if sim.all_done() {
                    break;
                }
                let inputs = match actions_in {
                    Some(seq) => seq[i]
                        .iter()
                        .map(|(k, a)| (k.clone(), EgoInput::from(a.clone())))
                        .collect(),
                    None => keep_lane_input(&ctx),
                };
                actions_out.push(
                    inputs
                        .iter()
                        .map(|(k, v)| (k.clone(), v.action.clone()))
                        .collect(),
                );
                let results = sim.step(&inputs).unwrap();
                if let Some(r) = results.get("a0") {
                    ctx = r.context;
                }
            }
            (sim.log.to_bytes(), actions_out)
        };
        let (log1, actions) = record(None);
        let (log2, _) = record(Some(&actions));
        assert_eq!(log1, log2, "byte-identical replay");
    }

    #[test]
    fn event_detection_thresholds() {
        let map = serde_json::json!({
            "format": 1,
            "lanes": {"l": {"centerline": [[0.0,0.0],[100.0,0.0]], "width": 3.5, "speed_limit": 10.0}},
            "edges": {"e": ["l"]}
        })
        .to_string();
        let network = Arc::new(RoadNetwork::load(&map).unwrap());
        let doc = serde_json::json!({
            "format": 1,
            "map": "m.json",
            "missions": [{"agent_id": "a0", "start": ["e", 0, 10.0], "goal": ["e", 0, 90.0]}]
        })
        .to_string();
        let spec = crate::scenario::parse_scenario(&doc).unwrap();
        let scenario = crate::scenario::bind_scenario(&spec, "ev", network.clone()).unwrap();
        let mission = &scenario.missions[0];
        let model = VehicleModel::default();

        // at the goal point
        let at_goal = VehicleState::new("a0", Pose::new(90.0, 0.0, 0.0), 5.0, &model);
        let ev = detect_events(&network, &at_goal, mission, false, 0, 5, 10, 600);
        assert!(ev.reached_goal);
        assert!(!ev.off_road && !ev.timeout);

        // 3 m laterally off a 3.5 m lane: margin is 1.75 + 1.0 = 2.75
        let off = VehicleState::new("a0", Pose::new(50.0, 3.0, 0.0), 5.0, &model);
        let ev = detect_events(&network, &off, mission, false, 0, 5, 10, 600);
        assert!(ev.off_road);
        let near = VehicleState::new("a0", Pose::new(50.0, 2.5, 0.0), 5.0, &model);
        let ev = detect_events(&network, &near, mission, false, 0, 5, 10, 600);
        assert!(!ev.off_road);

        // wrong-way needs 5 consecutive reversed steps
        let reversed = VehicleState::new(
            "a0",
            Pose::new(50.0, 0.0, 100.0_f64.to_radians()),
            5.0,
            &model,
        );
        let ev = detect_events(&network, &reversed, mission, false, 2, 5, 10, 600);
        assert!(!ev.wrong_way, "two-step spike is hysteresis-filtered");
        let ev = detect_events(&network, &reversed, mission, false, 5, 5, 10, 600);
        assert!(ev.wrong_way);

        // timeout excludes reached_goal
        let ev = detect_events(&network, &at_goal, mission, false, 0, 5, 600, 600);
        assert!(ev.reached_goal && !ev.timeout);
        let mid = VehicleState::new("a0", Pose::new(50.0, 0.0, 0.0), 5.0, &model);
        let ev = detect_events(&network, &mid, mission, false, 0, 5, 600, 600);
        assert!(ev.timeout);
    }

    #[test]
    fn wrong_way_spike_is_filtered_in_a_live_episode() {
        let scenario = straight_scenario(false);
        let (mut sim, initial) = Simulation::reset(
            &scenario,
            3,
            &keep_lane_setup(),
            Arc::new(Zoo::standard()),
            EngineConfig::default(),
        )
        .unwrap();
        let mut ctx = initial["a0"].context;
        // two steps of a hard reversed steering command, then straight
        for step in 0..40 {
            let action = if (10..12).contains(&step) {
                Action::Command(ControlCommand::Continuous {
                    throttle: 0.0,
                    brake: 0.0,
                    steering: 1.0,
                })
            } else {
                Action::Command(ControlCommand::LaneFollowing {
                    target_speed: ctx.lane_speed_limit,
                    lane_change: 0,
                })
            };
            let results = sim
                .step(&BTreeMap::from([("a0".to_string(), EgoInput::from(action))]))
                .unwrap();
            if let Some(r) = results.get("a0") {
                assert!(!r.events.wrong_way, "spike must not trip wrong_way");
                ctx = r.context;
                if r.done {
                    break;
                }
            }
        }
    }

    #[test]
    fn ownership_keys_match_vehicle_keys() {
        let scenario = straight_scenario(true);
        let (mut sim, initial) = Simulation::reset(
            &scenario,
            5,
            &keep_lane_setup(),
            Arc::new(Zoo::standard()),
            EngineConfig::default(),
        )
        .unwrap();
        let mut ctx = initial["a0"].context;
        for _ in 0..100 {
            if sim.all_done() {
                break;
            }
            let results = sim.step(&keep_lane_input(&ctx)).unwrap();
            if let Some(r) = results.get("a0") {
                ctx = r.context;
            }
            let owners = sim.world.ownership();
            assert_eq!(
                owners.keys().collect::<Vec<_>>(),
                sim.world.vehicles.keys().collect::<Vec<_>>()
            );
        }
    }
}
