//! Background traffic provider: flow spawning, IDM car-following, MOBIL-style
//! lane changes, and arrival-order junction arbitration.
//!
//! Traffic vehicles are rectangles driven in lane coordinates; full steering
//! dynamics only attach when a bubble hands a vehicle over to an agent.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::map::{LaneId, LanePosition, RoadNetwork, Route};
use crate::math::Pose;
use crate::vehicle::{VehicleId, VehicleModel};

/// IDM car-following parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdmParams {
    /// Maximum acceleration a, m/s^2.
    pub max_accel: f64,
    /// Comfortable braking b, m/s^2.
    pub comfort_brake: f64,
    /// Standstill gap s0, m.
    pub min_gap: f64,
    /// Desired time headway T, s.
    pub time_headway: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        IdmParams {
            max_accel: 1.5,
            comfort_brake: 2.0,
            min_gap: 2.0,
            time_headway: 1.5,
        }
    }
}

/// Hard floor on commanded deceleration (emergency braking), m/s^2.
const EMERGENCY_BRAKE: f64 = 10.0;
/// MOBIL safety limit on the new follower's induced deceleration, m/s^2.
pub const B_SAFE: f64 = 4.0;
/// Horizon for leader search along the route, m.
const LEADER_HORIZON: f64 = 100.0;
/// Lateral transition time for a lane change, s.
const LATERAL_BLEND: f64 = 3.0;
/// Junction claims start this close to the entry, m.
const CLAIM_DIST: f64 = 30.0;
/// A non-yielding claimant this close to the entry is committed, m.
const COMMIT_DIST: f64 = 15.0;

/// Leader seen by the IDM: bumper-to-bumper gap and leader speed.
#[derive(Debug, Clone, Copy)]
pub struct Leader {
    pub gap: f64,
    pub speed: f64,
}

/// Intelligent Driver Model acceleration.
pub fn idm_acceleration(
    speed: f64,
    leader: Option<Leader>,
    desired_speed: f64,
    p: &IdmParams,
) -> f64 {
    let v0 = desired_speed.max(0.1);
    let free = 1.0 - (speed / v0).powi(4);
    let interaction = match leader {
        Some(l) if l.gap.is_finite() => {
            let gap = l.gap.max(0.01);
            let dv = speed - l.speed;
            let s_star = p.min_gap
                + speed * p.time_headway
                + speed * dv / (2.0 * (p.max_accel * p.comfort_brake).sqrt());
            (s_star / gap).powi(2)
        }
        _ => 0.0,
    };
    (p.max_accel * (free - interaction)).max(-EMERGENCY_BRAKE)
}

/// Behavioral parameters of one traffic actor type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficActorSpec {
    /// Multiplier on the lane speed limit (mean of the desired-speed draw).
    pub speed_mean: f64,
    /// Std-dev of the desired-speed multiplier.
    pub speed_sigma: f64,
    /// 0 = patient, 1 = impatient: shrinks the lane-change incentive threshold.
    pub lc_impatience: f64,
    /// MOBIL politeness weight on other drivers' gain.
    pub lc_cooperative: f64,
    /// Scales junction gap acceptance (1 = accepts the smallest margins).
    pub junction_impatience: f64,
    /// Parsed for format fidelity; inert without signal logic.
    pub drive_after_red_time: f64,
    pub drive_after_yellow_time: f64,
    /// Dimensions/dynamics used if this vehicle is handed to an agent.
    pub vehicle: VehicleModel,
}

impl Default for TrafficActorSpec {
    fn default() -> Self {
        TrafficActorSpec {
            speed_mean: 1.0,
            speed_sigma: 0.0,
            lc_impatience: 0.5,
            lc_cooperative: 0.5,
            junction_impatience: 0.5,
            drive_after_red_time: 0.0,
            drive_after_yellow_time: 0.0,
            vehicle: VehicleModel::default(),
        }
    }
}

impl TrafficActorSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.speed_mean <= 0.0 {
            return Err("speed_mean must be positive".into());
        }
        for (name, v) in [
            ("lc_impatience", self.lc_impatience),
            ("lc_cooperative", self.lc_cooperative),
            ("junction_impatience", self.junction_impatience),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} must be within [0, 1]"));
            }
        }
        self.vehicle.validate().map_err(|e| e.to_string())
    }
}

/// A spawning rule bound to a concrete route.
#[derive(Debug, Clone)]
pub struct BoundFlow {
    pub route: Route,
    /// Vehicles per second.
    pub rate: f64,
    /// Actor name -> weight, sorted by name.
    pub mix: Vec<(String, f64)>,
}

/// Lateral state while a lane change is in progress.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LateralBlend {
    /// Offset from the new lane's centerline at the moment of the change.
    pub from_t: f64,
    pub elapsed: f64,
    /// Old lane the footprint still occupies until the blend completes.
    pub old_lane: LaneId,
}

/// One traffic-provider vehicle in lane coordinates.
#[derive(Debug, Clone)]
pub struct TrafficVehicle {
    pub id: VehicleId,
    pub actor_name: String,
    pub actor: TrafficActorSpec,
    pub route: Route,
    pub dest: LanePosition,
    pub desired_speed: f64,
    pub lane_idx: usize,
    pub s: f64,
    pub speed: f64,
    pub accel: f64,
    pub lateral: Option<LateralBlend>,
    pub next_lc_check: f64,
}

impl TrafficVehicle {
    pub fn current_lane(&self) -> &LaneId {
        &self.route.lane_ids[self.lane_idx]
    }

    pub fn lateral_offset(&self) -> f64 {
        match &self.lateral {
            Some(b) => {
                let f = (b.elapsed / LATERAL_BLEND).clamp(0.0, 1.0);
                b.from_t * (1.0 - f)
            }
            None => 0.0,
        }
    }

    pub fn lane_position(&self) -> LanePosition {
        LanePosition {
            lane_id: self.current_lane().clone(),
            s: self.s,
            t: self.lateral_offset(),
        }
    }

    pub fn pose(&self, network: &RoadNetwork) -> Pose {
        let lane = network.lane(self.current_lane()).expect("route lane exists");
        lane.pose_at(self.s, self.lateral_offset())
    }

    pub fn progress(&self) -> f64 {
        self.route.bases[self.lane_idx] + self.s
    }

    pub fn length(&self) -> f64 {
        self.actor.vehicle.length
    }
}

// --- MOBIL ------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct MobilNeighbor {
    /// Bumper-to-bumper gap, m (negative means overlap).
    pub gap: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CandidateLane {
    pub leader: Option<MobilNeighbor>,
    pub follower: Option<MobilNeighbor>,
}

/// Everything the lane-change decision looks at.
#[derive(Debug, Clone, Copy, Default)]
pub struct LaneChangeSituation {
    pub current_leader: Option<MobilNeighbor>,
    pub left: Option<CandidateLane>,
    pub right: Option<CandidateLane>,
    /// Direction the route requires (+1/-1), bypassing the incentive test.
    pub mandatory: Option<i8>,
}

/// MOBIL-style incentive + safety lane-change decision.
///
/// Politeness is the actor's `lc_cooperative`; the incentive threshold is
/// `0.4 * (1 - lc_impatience) + 0.1`. Mandatory route changes skip the
/// incentive test but never the safety test.
pub fn lane_change_decision(
    speed: f64,
    length: f64,
    desired_speed: f64,
    situation: &LaneChangeSituation,
    actor: &TrafficActorSpec,
    idm: &IdmParams,
) -> i8 {
    let leader_of = |n: Option<MobilNeighbor>| n.map(|l| Leader { gap: l.gap, speed: l.speed });

    let safe = |cand: &CandidateLane| {
        if let Some(l) = cand.leader {
            if l.gap <= 0.5 {
                return false;
            }
        }
        if let Some(f) = cand.follower {
            if f.gap <= 0.5 {
                return false;
            }
            let follower_after = idm_acceleration(
                f.speed,
                Some(Leader { gap: f.gap, speed }),
                f.speed.max(desired_speed),
                idm,
            );
            if follower_after < -B_SAFE {
                return false;
            }
        }
        true
    };

    if let Some(dir) = situation.mandatory {
        let cand = match dir {
            1 => situation.left,
            -1 => situation.right,
            _ => None,
        };
        return match cand {
            Some(c) if safe(&c) => dir,
            _ => 0,
        };
    }

    let own_now = idm_acceleration(speed, leader_of(situation.current_leader), desired_speed, idm);
    let threshold = 0.4 * (1.0 - actor.lc_impatience) + 0.1;

    let gain_for = |cand: &CandidateLane| -> f64 {
        let own_after = idm_acceleration(speed, leader_of(cand.leader), desired_speed, idm);
        let own_gain = own_after - own_now;
        let others_gain = match cand.follower {
            Some(f) => {
                let f_desired = f.speed.max(desired_speed);
                let after = idm_acceleration(
                    f.speed,
                    Some(Leader { gap: f.gap, speed }),
                    f_desired,
                    idm,
                );
                // follower's current leader becomes ours: composed gap
                let before = idm_acceleration(
                    f.speed,
                    cand.leader.map(|l| Leader {
                        gap: f.gap + length + l.gap,
                        speed: l.speed,
                    }),
                    f_desired,
                    idm,
                );
                after - before
            }
            None => 0.0,
        };
        own_gain + actor.lc_cooperative * others_gain
    };

    let mut best = 0i8;
    let mut best_gain = threshold;
    for (dir, cand) in [(-1i8, situation.right), (1i8, situation.left)] {
        if let Some(c) = cand {
            if safe(&c) {
                let g = gain_for(&c);
                if g > best_gain {
                    best_gain = g;
                    best = dir;
                }
            }
        }
    }
    best
}

// --- Junction arbitration ----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClaimState {
    Yielding,
    Committed,
    Inside,
}

#[derive(Debug, Clone)]
struct Claim {
    seq: u64,
    jlane: LaneId,
    state: ClaimState,
    /// Distance from the nose to the junction entry (0 when inside).
    dist: f64,
    speed: f64,
    clear_time: f64,
    impatience: f64,
    is_blocker: bool,
}

/// Per-junction arrival-order claims. Blockers (ego/social vehicles) always
/// enter as committed or inside; traffic never cuts in front of them.
#[derive(Debug, Default)]
pub struct JunctionRegistry {
    next_seq: u64,
    claims: BTreeMap<usize, BTreeMap<VehicleId, Claim>>,
}

impl JunctionRegistry {
    pub fn clear_blockers(&mut self) {
        for m in self.claims.values_mut() {
            m.retain(|_, c| !c.is_blocker);
        }
    }

    pub fn remove(&mut self, id: &VehicleId) {
        for m in self.claims.values_mut() {
            m.remove(id);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn upsert(
        &mut self,
        junction: usize,
        id: &VehicleId,
        jlane: LaneId,
        state: ClaimState,
        dist: f64,
        speed: f64,
        clear_time: f64,
        impatience: f64,
        is_blocker: bool,
    ) {
        let next_seq = &mut self.next_seq;
        let entry = self
            .claims
            .entry(junction)
            .or_default()
            .entry(id.clone())
            .or_insert_with(|| {
                let claim = Claim {
                    seq: *next_seq,
                    jlane: jlane.clone(),
                    state,
                    dist,
                    speed,
                    clear_time,
                    impatience,
                    is_blocker,
                };
                *next_seq += 1;
                claim
            });
        entry.jlane = jlane;
        entry.dist = dist;
        entry.speed = speed;
        entry.clear_time = clear_time;
        entry.impatience = impatience;
        // state transitions are decided in arbitrate(); blockers and entries
        // that physically crossed into the junction override here
        if is_blocker || state == ClaimState::Inside {
            entry.state = state;
        }
    }

    /// Decide yield/proceed for every traffic claim, in arrival (seq) order.
    /// A claim commits only if no conflicting claim is inside or committed;
    /// at most one of any conflicting pair is ever committed.
    fn arbitrate(&mut self, network: &RoadNetwork) -> BTreeMap<VehicleId, ClaimState> {
        let mut out = BTreeMap::new();
        for claims in self.claims.values_mut() {
            let mut order: Vec<VehicleId> = claims.keys().cloned().collect();
            order.sort_by_key(|id| claims[id].seq);
            for id in &order {
                let me = claims[id].clone();
                if me.is_blocker {
                    continue;
                }
                if me.state == ClaimState::Inside {
                    out.insert(id.clone(), ClaimState::Inside);
                    continue;
                }
                let mut proceed = true;
                for (oid, other) in claims.iter() {
                    if oid == id || !network.lanes_conflict(&me.jlane, &other.jlane) {
                        continue;
                    }
                    match other.state {
                        ClaimState::Inside | ClaimState::Committed => {
                            proceed = false;
                            break;
                        }
                        ClaimState::Yielding => {
                            if other.seq < me.seq {
                                // earlier arrival: defer unless the gap is large
                                let their_eta = other.dist / other.speed.max(0.5);
                                let margin = 0.5 + 2.5 * (1.0 - me.impatience);
                                if their_eta <= me.clear_time + margin {
                                    proceed = false;
                                    break;
                                }
                            }
                        }
                    }
                }
                let state = if !proceed {
                    ClaimState::Yielding
                } else if me.dist <= COMMIT_DIST {
                    ClaimState::Committed
                } else {
                    ClaimState::Yielding
                };
                claims.get_mut(id).unwrap().state = state;
                // beyond COMMIT_DIST a free-to-proceed claimant keeps driving
                // normally; only a real conflict imposes the virtual leader
                let effective = if proceed {
                    ClaimState::Committed
                } else {
                    ClaimState::Yielding
                };
                out.insert(id.clone(), effective);
            }
        }
        out
    }
}

// --- Provider ----------------------------------------------------------------

/// Non-traffic vehicle projected into lane coordinates so traffic can react.
#[derive(Debug, Clone)]
pub struct Blocker {
    pub id: VehicleId,
    pub lane: LaneId,
    pub s: f64,
    pub speed: f64,
    pub length: f64,
    /// Junction this blocker occupies or approaches: (index, lane, entry dist).
    pub junction: Option<(usize, LaneId, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LaneChangeRecord {
    pub id: VehicleId,
    pub from: LaneId,
    pub to: LaneId,
    /// Id, gap, and speed of the follower the changer inserted in front of.
    pub new_follower: Option<(VehicleId, f64, f64)>,
}

/// What one traffic step produced.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct TrafficStepEvents {
    pub spawned: Vec<VehicleId>,
    pub despawned: Vec<VehicleId>,
    /// Spawn draws that fired but were suppressed by the entry-gap check.
    pub suppressed_spawns: u32,
    pub lane_changes: Vec<LaneChangeRecord>,
}

/// Runtime state of the background traffic provider.
#[derive(Debug)]
pub struct TrafficProvider {
    pub flows: Vec<BoundFlow>,
    pub vehicles: BTreeMap<VehicleId, TrafficVehicle>,
    pub idm: IdmParams,
    registry: JunctionRegistry,
    counter: u64,
}

/// Entry in the per-lane occupancy index: (s, speed, length, id).
type LaneIndex = BTreeMap<LaneId, Vec<(f64, f64, f64, VehicleId)>>;

impl TrafficProvider {
    pub fn new(flows: Vec<BoundFlow>) -> Self {
        TrafficProvider {
            flows,
            vehicles: BTreeMap::new(),
            idm: IdmParams::default(),
            registry: JunctionRegistry::default(),
            counter: 0,
        }
    }

    /// Remove a vehicle from traffic control (bubble capture).
    pub fn release(&mut self, id: &VehicleId) -> Option<TrafficVehicle> {
        self.registry.remove(id);
        self.vehicles.remove(id)
    }

    /// Place a vehicle back under traffic control (bubble handback or tests).
    pub fn adopt(&mut self, vehicle: TrafficVehicle) {
        self.vehicles.insert(vehicle.id.clone(), vehicle);
    }

    fn build_index(&self, blockers: &[Blocker]) -> LaneIndex {
        let mut index: LaneIndex = BTreeMap::new();
        for v in self.vehicles.values() {
            index.entry(v.current_lane().clone()).or_default().push((
                v.s,
                v.speed,
                v.length(),
                v.id.clone(),
            ));
            if let Some(blend) = &v.lateral {
                // footprint still straddles the old lane until the blend ends
                index.entry(blend.old_lane.clone()).or_default().push((
                    v.s,
                    v.speed,
                    v.length(),
                    v.id.clone(),
                ));
            }
        }
        for b in blockers {
            index
                .entry(b.lane.clone())
                .or_default()
                .push((b.s, b.speed, b.length, b.id.clone()));
        }
        for entries in index.values_mut() {
            entries.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.3.cmp(&b.3)));
        }
        index
    }

    /// Nearest leader ahead of the vehicle along its route chain.
    fn find_leader(
        &self,
        network: &RoadNetwork,
        index: &LaneIndex,
        v: &TrafficVehicle,
    ) -> Option<Leader> {
        let half = v.length() * 0.5;
        let mut best: Option<Leader> = None;
        let mut offset = 0.0; // distance from v.s to the start of the scanned lane
        for (i, lane_id) in v.route.lane_ids.iter().enumerate().skip(v.lane_idx) {
            let lane = network.lane(lane_id).expect("route lane");
            let local_origin = if i == v.lane_idx { v.s } else { 0.0 };
            if let Some(entries) = index.get(lane_id) {
                for (es, espeed, elen, eid) in entries {
                    if *eid == v.id {
                        continue;
                    }
                    let ahead = offset + es - local_origin;
                    if ahead > 1e-9 && ahead <= LEADER_HORIZON {
                        let gap = ahead - half - elen * 0.5;
                        if best.is_none_or(|b| gap < b.gap) {
                            best = Some(Leader {
                                gap,
                                speed: *espeed,
                            });
                        }
                    }
                }
            }
            if best.is_some() {
                break;
            }
            // advance to the next route lane
            if i + 1 >= v.route.lane_ids.len() {
                break;
            }
            let next = &v.route.lane_ids[i + 1];
            if lane.successors.contains(next) {
                offset += lane.length() - local_origin;
            } else {
                // co-extensive neighbor hop: same arclength continues
            }
            if offset > LEADER_HORIZON {
                break;
            }
        }
        best
    }

    /// One traffic step: spawn, lane-change, arbitrate junctions, integrate,
    /// despawn. Deterministic given the rng state and inputs.
    pub fn step(
        &mut self,
        network: &RoadNetwork,
        time: f64,
        dt: f64,
        blockers: &[Blocker],
        rng: &mut ChaCha8Rng,
        actors: &BTreeMap<String, TrafficActorSpec>,
    ) -> TrafficStepEvents {
        let mut events = TrafficStepEvents::default();

        // --- spawning (fixed rng consumption order: flows in declared order)
        for fi in 0..self.flows.len() {
            let fire: f64 = rng.gen();
            if fire >= self.flows[fi].rate * dt {
                continue;
            }
            let actor_pick: f64 = rng.gen();
            let (u1, u2): (f64, f64) = (rng.gen(), rng.gen());
            let flow = &self.flows[fi];
            let name = weighted_pick(&flow.mix, actor_pick);
            let actor = actors.get(&name).cloned().unwrap_or_default();
            let start_lane_id = flow.route.lane_ids[0].clone();
            let lane = network.lane(&start_lane_id).expect("flow lane");
            let limit = lane.speed_limit;
            let normal = box_muller(u1, u2);
            let desired = (limit * (actor.speed_mean + actor.speed_sigma * normal))
                .clamp(0.5 * limit, 1.5 * limit);
            let spawn_speed = desired.min(limit);
            let spawn_s = flow.route.start_s;
            let len = actor.vehicle.length;

            // entry gap: s0 + v*T ahead, s0 behind
            let index = self.build_index(blockers);
            let mut ok = true;
            if let Some(entries) = index.get(&start_lane_id) {
                for (es, _espeed, elen, _eid) in entries {
                    let delta = es - spawn_s;
                    let gap = delta.abs() - elen * 0.5 - len * 0.5;
                    let needed = if delta >= 0.0 {
                        self.idm.min_gap + spawn_speed * self.idm.time_headway
                    } else {
                        self.idm.min_gap
                    };
                    if gap < needed {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                events.suppressed_spawns += 1;
                continue;
            }

            self.counter += 1;
            let id = VehicleId(format!("t{:05}", self.counter));
            let vehicle = TrafficVehicle {
                id: id.clone(),
                actor_name: name,
                actor,
                route: flow.route.clone(),
                dest: LanePosition {
                    lane_id: flow.route.last_lane().clone(),
                    s: flow.route.end_s,
                    t: 0.0,
                },
                desired_speed: desired,
                lane_idx: 0,
                s: spawn_s,
                speed: spawn_speed,
                accel: 0.0,
                lateral: None,
                next_lc_check: time + 1.0,
            };
            self.vehicles.insert(id.clone(), vehicle);
            events.spawned.push(id);
        }

        // --- lane changes (at most once per second per vehicle, id order)
        let ids: Vec<VehicleId> = self.vehicles.keys().cloned().collect();
        for id in &ids {
            let due = {
                let v = &self.vehicles[id];
                time >= v.next_lc_check && v.lateral.is_none()
            };
            if !due {
                continue;
            }
            self.vehicles.get_mut(id).unwrap().next_lc_check = time + 1.0;
            let index = self.build_index(blockers);
            let decision = self.decide_lane_change(network, &index, id);
            if decision == 0 {
                continue;
            }
            self.apply_lane_change(network, &index, id, decision, &mut events);
        }

        // --- junction claims + arbitration
        self.registry.clear_blockers();
        for b in blockers {
            if let Some((junction, jlane, dist)) = &b.junction {
                let state = if *dist <= 0.0 {
                    ClaimState::Inside
                } else {
                    ClaimState::Committed
                };
                self.registry.upsert(
                    *junction,
                    &b.id,
                    jlane.clone(),
                    state,
                    dist.max(0.0),
                    b.speed,
                    0.0,
                    1.0,
                    true,
                );
            }
        }
        let veh_ids: Vec<VehicleId> = self.vehicles.keys().cloned().collect();
        for id in &veh_ids {
            let v = &self.vehicles[id];
            let lane_id = v.current_lane().clone();
            let lane = network.lane(&lane_id).expect("route lane");
            if let Some(j) = network.junction_of(&lane_id) {
                self.registry.upsert(
                    j,
                    id,
                    lane_id,
                    ClaimState::Inside,
                    0.0,
                    v.speed,
                    0.0,
                    v.actor.junction_impatience,
                    false,
                );
            } else if v.lane_idx + 1 < v.route.lane_ids.len() {
                let next = v.route.lane_ids[v.lane_idx + 1].clone();
                if let Some(j) = network.junction_of(&next) {
                    let nose_dist = lane.length() - v.s - v.length() * 0.5;
                    let claim_dist = CLAIM_DIST.max(v.speed * v.speed / 8.0);
                    if nose_dist <= claim_dist {
                        let jlane_len = network.lane(&next).expect("junction lane").length();
                        let clear_time =
                            (nose_dist.max(0.0) + jlane_len + v.length()) / v.speed.max(2.0);
                        self.registry.upsert(
                            j,
                            id,
                            next,
                            ClaimState::Yielding,
                            nose_dist.max(0.0),
                            v.speed,
                            clear_time,
                            v.actor.junction_impatience,
                            false,
                        );
                    }
                }
            } else {
                self.registry.remove(id);
            }
        }
        let junction_states = self.registry.arbitrate(network);

        // --- longitudinal accelerations against the pre-move snapshot
        let index = self.build_index(blockers);
        let mut accels: BTreeMap<VehicleId, f64> = BTreeMap::new();
        for (id, v) in &self.vehicles {
            let mut accel = idm_acceleration(
                v.speed,
                self.find_leader(network, &index, v),
                v.desired_speed,
                &self.idm,
            );
            if junction_states.get(id) == Some(&ClaimState::Yielding) {
                let lane = network.lane(v.current_lane()).expect("route lane");
                let nose_dist = lane.length() - v.s - v.length() * 0.5;
                let stop = idm_acceleration(
                    v.speed,
                    Some(Leader {
                        gap: nose_dist + 0.5 * self.idm.min_gap,
                        speed: 0.0,
                    }),
                    v.desired_speed,
                    &self.idm,
                );
                accel = accel.min(stop);
            }
            accels.insert(id.clone(), accel);
        }

        // --- integrate + advance lanes + despawn
        let mut despawn = Vec::new();
        for (id, v) in self.vehicles.iter_mut() {
            let accel = accels[id];
            let v0 = v.speed;
            let v1 = (v0 + accel * dt).max(0.0);
            v.accel = if dt > 0.0 { (v1 - v0) / dt } else { 0.0 };
            v.speed = v1;
            v.s += 0.5 * (v0 + v1) * dt;
            if let Some(blend) = &mut v.lateral {
                blend.elapsed += dt;
                if blend.elapsed >= LATERAL_BLEND {
                    v.lateral = None;
                }
            }
            loop {
                if v.progress() >= v.route.total_length - 1e-9 {
                    despawn.push(id.clone());
                    break;
                }
                let lane = network.lane(v.current_lane()).expect("route lane");
                if v.s <= lane.length() {
                    break;
                }
                if v.lane_idx + 1 >= v.route.lane_ids.len() {
                    despawn.push(id.clone());
                    break;
                }
                let next = v.route.lane_ids[v.lane_idx + 1].clone();
                if lane.successors.contains(&next) {
                    v.s -= lane.length();
                    v.lane_idx += 1;
                } else {
                    // route expected a neighbor hop that never happened;
                    // drift across now (mandatory change was impossible)
                    v.lane_idx += 1;
                    v.s = v
                        .s
                        .min(network.lane(&next).expect("route lane").length());
                }
            }
        }
        for id in despawn {
            self.vehicles.remove(&id);
            self.registry.remove(&id);
            events.despawned.push(id);
        }

        events
    }

    fn neighbor_info(&self, index: &LaneIndex, me: &TrafficVehicle, lane: &LaneId) -> CandidateLane {
        let half = me.length() * 0.5;
        let mut cand = CandidateLane::default();
        if let Some(entries) = index.get(lane) {
            for (es, espeed, elen, eid) in entries {
                if *eid == me.id {
                    continue;
                }
                let delta = es - me.s;
                if delta >= 0.0 {
                    let gap = delta - half - elen * 0.5;
                    if cand.leader.is_none_or(|l| gap < l.gap) {
                        cand.leader = Some(MobilNeighbor {
                            gap,
                            speed: *espeed,
                        });
                    }
                } else {
                    let gap = -delta - half - elen * 0.5;
                    if cand.follower.is_none_or(|f| gap < f.gap) {
                        cand.follower = Some(MobilNeighbor {
                            gap,
                            speed: *espeed,
                        });
                    }
                }
            }
        }
        cand
    }

    fn decide_lane_change(&self, network: &RoadNetwork, index: &LaneIndex, id: &VehicleId) -> i8 {
        let v = &self.vehicles[id];
        let lane = network.lane(v.current_lane()).expect("route lane");

        // no discretionary changes while approaching or inside a junction
        if network.junction_of(v.current_lane()).is_some() {
            return 0;
        }
        if lane.length() - v.s < CLAIM_DIST {
            if let Some(next) = v.route.lane_ids.get(v.lane_idx + 1) {
                if network.junction_of(next).is_some() {
                    return 0;
                }
            }
        }

        // mandatory: the route's next link is a neighbor hop
        let mandatory = v.route.lane_ids.get(v.lane_idx + 1).and_then(|next| {
            if lane.successors.contains(next) {
                None
            } else if lane.left_neighbor.as_ref() == Some(next) {
                Some(1i8)
            } else if lane.right_neighbor.as_ref() == Some(next) {
                Some(-1i8)
            } else {
                None
            }
        });

        let situation = LaneChangeSituation {
            current_leader: self.find_leader(network, index, v).map(|l| MobilNeighbor {
                gap: l.gap,
                speed: l.speed,
            }),
            left: lane
                .left_neighbor
                .as_ref()
                .map(|n| self.neighbor_info(index, v, n)),
            right: lane
                .right_neighbor
                .as_ref()
                .map(|n| self.neighbor_info(index, v, n)),
            mandatory,
        };
        let mut dir = lane_change_decision(
            v.speed,
            v.length(),
            v.desired_speed,
            &situation,
            &v.actor,
            &self.idm,
        );
        // discretionary changes must keep the destination reachable
        if dir != 0 && mandatory.is_none() {
            let target = match dir {
                1 => lane.left_neighbor.clone(),
                _ => lane.right_neighbor.clone(),
            };
            let reachable = target.is_some_and(|t| {
                network
                    .route_between(
                        &LanePosition {
                            lane_id: t,
                            s: v.s,
                            t: 0.0,
                        },
                        &v.dest,
                    )
                    .is_ok()
            });
            if !reachable {
                dir = 0;
            }
        }
        dir
    }

    fn apply_lane_change(
        &mut self,
        network: &RoadNetwork,
        index: &LaneIndex,
        id: &VehicleId,
        dir: i8,
        events: &mut TrafficStepEvents,
    ) {
        let v = &self.vehicles[id];
        let old_lane_id = v.current_lane().clone();
        let old_lane = network.lane(&old_lane_id).expect("route lane");
        let target = match dir {
            1 => old_lane.left_neighbor.clone(),
            _ => old_lane.right_neighbor.clone(),
        };
        let Some(target_id) = target else { return };

        // follower on the target lane, recorded for cut-in analysis
        let cand = self.neighbor_info(index, v, &target_id);
        let follower = cand.follower.and_then(|f| {
            index.get(&target_id).and_then(|entries| {
                entries
                    .iter()
                    .filter(|(es, _, _, eid)| *es < v.s && *eid != v.id)
                    .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
                    .map(|(_, _, _, eid)| (eid.clone(), f.gap, f.speed))
            })
        });

        let target_lane = network.lane(&target_id).expect("neighbor lane");
        let here = old_lane.pose_at(v.s, 0.0);
        let (s_on_target, t_of_old, _) = target_lane.project(here.position);

        let new_route = match network.route_between(
            &LanePosition {
                lane_id: target_id.clone(),
                s: s_on_target,
                t: 0.0,
            },
            &self.vehicles[id].dest,
        ) {
            Ok(r) => r,
            Err(_) => return,
        };

        let v = self.vehicles.get_mut(id).unwrap();
        v.route = new_route;
        v.lane_idx = 0;
        v.s = s_on_target;
        v.lateral = Some(LateralBlend {
            from_t: t_of_old,
            elapsed: 0.0,
            old_lane: old_lane_id.clone(),
        });
        events.lane_changes.push(LaneChangeRecord {
            id: id.clone(),
            from: old_lane_id,
            to: target_id,
            new_follower: follower,
        });
    }
}

fn weighted_pick(mix: &[(String, f64)], draw: f64) -> String {
    let total: f64 = mix.iter().map(|(_, w)| w).sum();
    let mut acc = 0.0;
    for (name, w) in mix {
        acc += w / total;
        if draw < acc {
            return name.clone();
        }
    }
    mix.last().expect("non-empty mix").0.clone()
}

/// Standard normal from two uniforms; always consumes exactly two draws.
fn box_muller(u1: f64, u2: f64) -> f64 {
    let r = (-2.0 * u1.max(1e-12).ln()).sqrt();
    r * (std::f64::consts::TAU * u2).cos()
}
