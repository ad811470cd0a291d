//! Bubbles: spatiotemporal regions that hand control of traffic vehicles over
//! to social agents. The airlock (outer) zone reserves an agent and starts
//! sensor warmup; the interior zone transfers ownership; exiting to the
//! outside hands the vehicle back to the traffic provider.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::map::{LanePosition, RoadNetwork};
use crate::math::{Pose, Vec2};
use crate::traffic::{TrafficActorSpec, TrafficVehicle};
use crate::vehicle::{VehicleId, VehicleModel, VehicleState};

/// Who controls a vehicle. Exactly one owner per vehicle at every step.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id")]
pub enum ControlOwner {
    TrafficProvider,
    /// Social-agent instance id.
    SocialAgent(String),
    /// Ego agent id (the caller of step).
    EgoAgent(String),
}

/// Zone of a point relative to a bubble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Zone {
    Outside,
    Airlock,
    Interior,
}

/// Declarative bubble geometry and behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BubbleSpec {
    pub id: String,
    pub center: [f64; 2],
    /// Half extents along the rectangle's local x/y axes, meters.
    pub half_extents: [f64; 2],
    #[serde(default)]
    pub rotation: f64,
    /// Thickness of the airlock zone around the interior, meters.
    pub airlock_margin: f64,
    /// Zoo agent controlling captured vehicles.
    pub agent: String,
    #[serde(default = "default_capacity")]
    pub capacity: usize,
    /// Optional [start, end) activity window, seconds.
    #[serde(default)]
    pub active_window: Option<[f64; 2]>,
}

fn default_capacity() -> usize {
    1
}

impl BubbleSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.airlock_margin <= 0.0 {
            return Err(format!("bubble {}: airlock_margin must be > 0", self.id));
        }
        if self.capacity < 1 {
            return Err(format!("bubble {}: capacity must be >= 1", self.id));
        }
        if self.half_extents[0] <= 0.0 || self.half_extents[1] <= 0.0 {
            return Err(format!("bubble {}: half_extents must be > 0", self.id));
        }
        Ok(())
    }

    pub fn active_at(&self, time: f64) -> bool {
        match self.active_window {
            Some([start, end]) => time >= start && time < end,
            None => true,
        }
    }
}

/// Classify a point against the bubble's oriented rectangle: interior, the
/// airlock ring grown by `airlock_margin`, or outside.
pub fn classify_zone(bubble: &BubbleSpec, point: Vec2) -> Zone {
    // project the offset onto the rectangle's axes
    let axis_x = Vec2::from_heading(bubble.rotation);
    let axis_y = Vec2::left_normal(bubble.rotation);
    let d = point - Vec2::new(bubble.center[0], bubble.center[1]);
    let local_x = d.dot(axis_x).abs();
    let local_y = d.dot(axis_y).abs();
    let [hx, hy] = bubble.half_extents;
    if local_x <= hx && local_y <= hy {
        Zone::Interior
    } else if local_x <= hx + bubble.airlock_margin && local_y <= hy + bubble.airlock_margin {
        Zone::Airlock
    } else {
        Zone::Outside
    }
}

/// Record of one control-authority transfer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandoverEvent {
    pub vehicle_id: VehicleId,
    pub from_owner: ControlOwner,
    pub to_owner: ControlOwner,
    pub time: f64,
    pub pose: Pose,
}

/// Supplies and reclaims social-agent instances for captured vehicles.
pub trait AgentPool {
    /// Reserve an instance of the named zoo agent; `None` if it cannot be built.
    fn reserve(&mut self, agent_ref: &str, vehicle: &VehicleId) -> Option<String>;
    fn release(&mut self, instance: &str);
}

/// What the caller must do as a result of the transition pass.
#[derive(Debug, Clone, PartialEq)]
pub enum Transition {
    /// Traffic vehicle crossed into the interior: hand it to this instance.
    Acquire {
        vehicle: VehicleId,
        instance: String,
    },
    /// Agent-driven vehicle left the bubble: hand it back to traffic.
    Release {
        vehicle: VehicleId,
        instance: String,
    },
    /// Vehicle entered the airlock but the bubble was at capacity.
    CapacityBlocked { vehicle: VehicleId },
}

/// Ownership category of a vehicle as seen by the bubble pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OwnerKind<'a> {
    Traffic,
    Social(&'a str),
    Ego,
}

/// Mutable per-bubble capture state.
#[derive(Debug)]
pub struct BubbleRuntime {
    pub spec: BubbleSpec,
    /// Airlock reservations: vehicle -> agent instance (sensor warmup running).
    pub reserved: BTreeMap<VehicleId, String>,
    /// Vehicles owned by this bubble's agents: vehicle -> instance.
    pub owned: BTreeMap<VehicleId, String>,
}

impl BubbleRuntime {
    pub fn new(spec: BubbleSpec) -> Self {
        BubbleRuntime {
            spec,
            reserved: BTreeMap::new(),
            owned: BTreeMap::new(),
        }
    }

    fn occupancy(&self) -> usize {
        self.reserved.len() + self.owned.len()
    }

    /// Transition pass for one step. Vehicles must arrive sorted by id (entry
    /// order across steps is preserved by the reservation map itself).
    pub fn step_transitions(
        &mut self,
        time: f64,
        vehicles: &[(VehicleId, Vec2, OwnerKind<'_>)],
        pool: &mut dyn AgentPool,
    ) -> Vec<Transition> {
        let mut out = Vec::new();

        if !self.spec.active_at(time) {
            // window closed: hand everything back, cancel reservations
            for (vehicle, instance) in std::mem::take(&mut self.owned) {
                pool.release(&instance);
                out.push(Transition::Release { vehicle, instance });
            }
            for (_, instance) in std::mem::take(&mut self.reserved) {
                pool.release(&instance);
            }
            return out;
        }

        for (id, position, owner) in vehicles {
            let zone = classify_zone(&self.spec, *position);
            match owner {
                OwnerKind::Ego => {} // egos are never captured
                OwnerKind::Traffic => match zone {
                    Zone::Outside => {
                        if let Some(instance) = self.reserved.remove(id) {
                            pool.release(&instance);
                        }
                    }
                    Zone::Airlock => {
                        if !self.reserved.contains_key(id) {
                            if self.occupancy() < self.spec.capacity {
                                if let Some(instance) = pool.reserve(&self.spec.agent, id) {
                                    self.reserved.insert(id.clone(), instance);
                                }
                            } else {
                                out.push(Transition::CapacityBlocked { vehicle: id.clone() });
                            }
                        }
                    }
                    Zone::Interior => {
                        // normally reserved in the airlock first; direct entry
                        // still reserves here
                        let instance = match self.reserved.remove(id) {
                            Some(i) => Some(i),
                            None if self.occupancy() < self.spec.capacity => {
                                pool.reserve(&self.spec.agent, id)
                            }
                            None => {
                                out.push(Transition::CapacityBlocked { vehicle: id.clone() });
                                None
                            }
                        };
                        if let Some(instance) = instance {
                            self.owned.insert(id.clone(), instance.clone());
                            out.push(Transition::Acquire {
                                vehicle: id.clone(),
                                instance,
                            });
                        }
                    }
                },
                OwnerKind::Social(instance) => {
                    if zone == Zone::Outside && self.owned.contains_key(id) {
                        self.owned.remove(id);
                        pool.release(instance);
                        out.push(Transition::Release {
                            vehicle: id.clone(),
                            instance: instance.to_string(),
                        });
                    }
                }
            }
        }

        // drop reservations of vehicles that no longer exist
        let live: std::collections::BTreeSet<&VehicleId> =
            vehicles.iter().map(|(id, _, _)| id).collect();
        let stale: Vec<VehicleId> = self
            .reserved
            .keys()
            .filter(|id| !live.contains(id))
            .cloned()
            .collect();
        for id in stale {
            if let Some(instance) = self.reserved.remove(&id) {
                pool.release(&instance);
            }
        }

        out
    }
}

#[derive(Debug, Error)]
pub enum ReconcileError {
    #[error("vehicle {0} projects beyond the off-road margin; despawning")]
    OffRoad(VehicleId),
    #[error("no route back to the original destination for {0}")]
    Unroutable(VehicleId),
}

/// Traffic persona saved at capture so the handback can restore it.
#[derive(Debug, Clone)]
pub struct TrafficPersona {
    pub actor_name: String,
    pub actor: TrafficActorSpec,
    pub dest: LanePosition,
    pub desired_speed: f64,
}

/// Traffic -> agent: pose and speed copy exactly; steering and accel reset;
/// the full vehicle model attaches.
pub fn reconcile_to_agent(
    id: &VehicleId,
    pose: Pose,
    speed: f64,
    model: &VehicleModel,
) -> VehicleState {
    VehicleState {
        id: id.clone(),
        position: pose.position,
        heading: pose.heading,
        speed,
        accel: 0.0,
        steering: 0.0,
        length: model.length,
        width: model.width,
    }
}

/// Agent -> traffic: project onto the nearest lane (lateral offset clamped
/// into the lane), keep speed, re-derive the route toward the vehicle's
/// original destination.
pub fn reconcile_to_traffic(
    network: &RoadNetwork,
    state: &VehicleState,
    persona: &TrafficPersona,
    time: f64,
) -> Result<TrafficVehicle, ReconcileError> {
    let nearest = network.nearest_lane_position(state.position);
    if nearest.t.abs() > network.off_road_margin(&nearest.lane_id) {
        return Err(ReconcileError::OffRoad(state.id.clone()));
    }
    let lane = network.lane(&nearest.lane_id).expect("projected lane");
    let t = nearest.t.clamp(-lane.width * 0.5, lane.width * 0.5);
    let start = LanePosition {
        lane_id: nearest.lane_id.clone(),
        s: nearest.s,
        t: 0.0,
    };
    let route = network
        .route_between(&start, &persona.dest)
        .map_err(|_| ReconcileError::Unroutable(state.id.clone()))?;
    Ok(TrafficVehicle {
        id: state.id.clone(),
        actor_name: persona.actor_name.clone(),
        actor: persona.actor.clone(),
        route,
        dest: persona.dest.clone(),
        desired_speed: persona.desired_speed,
        lane_idx: 0,
        s: nearest.s,
        speed: state.speed,
        accel: 0.0,
        lateral: if t.abs() > 1e-9 {
            Some(crate::traffic::LateralBlend {
                from_t: t,
                elapsed: 0.0,
                old_lane: nearest.lane_id,
            })
        } else {
            None
        },
        next_lc_check: time + 1.0,
    })
}
