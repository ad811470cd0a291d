//! Browser demo: the benchmark scenarios running in-page via wasm-bindgen.
//!
//! Three interactive views over the core crate: a scenario player (map,
//! vehicles, bubble zones, control ownership), a live ego BEV grid, and an
//! IDM parameter explorer. All heavy lifting stays in Rust; the page's JS
//! only draws.

use std::collections::BTreeMap;
use std::sync::Arc;

use wasm_bindgen::prelude::*;

use waysim_core::agents::{build_agent, AgentInstance, RemoteConfig, Zoo};
use waysim_core::bubbles::ControlOwner;
use waysim_core::engine::{AgentStepResult, EgoInput, EgoSetup, EngineConfig, Simulation};
use waysim_core::map::RoadNetwork;
use waysim_core::scenario::{bind_scenario, parse_scenario, BoundScenario};
use waysim_core::sensing::{rasterize_bev, SensorConfig};
use waysim_core::traffic::{idm_acceleration, IdmParams, Leader};
use waysim_core::vehicle::VehicleId;

struct EmbeddedScenario {
    name: &'static str,
    scenario: &'static str,
    map: &'static str,
}

const SCENARIOS: &[EmbeddedScenario] = &[
    EmbeddedScenario {
        name: "two_way",
        scenario: include_str!("../../../scenarios/two_way.json"),
        map: include_str!("../../../scenarios/maps/two_way.json"),
    },
    EmbeddedScenario {
        name: "two_way_social",
        scenario: include_str!("../../../scenarios/two_way_social.json"),
        map: include_str!("../../../scenarios/maps/two_way.json"),
    },
    EmbeddedScenario {
        name: "double_merge",
        scenario: include_str!("../../../scenarios/double_merge.json"),
        map: include_str!("../../../scenarios/maps/double_merge.json"),
    },
    EmbeddedScenario {
        name: "double_merge_social",
        scenario: include_str!("../../../scenarios/double_merge_social.json"),
        map: include_str!("../../../scenarios/maps/double_merge.json"),
    },
    EmbeddedScenario {
        name: "intersection",
        scenario: include_str!("../../../scenarios/intersection.json"),
        map: include_str!("../../../scenarios/maps/intersection.json"),
    },
    EmbeddedScenario {
        name: "intersection_social",
        scenario: include_str!("../../../scenarios/intersection_social.json"),
        map: include_str!("../../../scenarios/maps/intersection.json"),
    },
];

/// Comma-separated names of the embedded scenarios.
#[wasm_bindgen]
pub fn scenario_names() -> String {
    SCENARIOS
        .iter()
        .map(|s| s.name)
        .collect::<Vec<_>>()
        .join(",")
}

fn bind_embedded(name: &str) -> Result<BoundScenario, String> {
    let entry = SCENARIOS
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| format!("unknown scenario `{name}`"))?;
    let spec = parse_scenario(entry.scenario).map_err(|e| e.to_string())?;
    let network = Arc::new(RoadNetwork::load(entry.map).map_err(|e| e.to_string())?);
    bind_scenario(&spec, entry.name, network).map_err(|e| e.to_string())
}

/// One browser-driven simulation episode.
#[wasm_bindgen]
pub struct Demo {
    scenario: BoundScenario,
    zoo: Arc<Zoo>,
    sim: Simulation,
    drivers: BTreeMap<String, AgentInstance>,
    last: BTreeMap<String, AgentStepResult>,
    policy: String,
}

type DemoState = (
    Simulation,
    BTreeMap<String, AgentInstance>,
    BTreeMap<String, AgentStepResult>,
);

impl Demo {
    fn start(
        scenario: &BoundScenario,
        zoo: &Arc<Zoo>,
        seed: u64,
        policy: &str,
    ) -> Result<DemoState, String> {
        let mut egos = BTreeMap::new();
        let mut drivers = BTreeMap::new();
        for mission in &scenario.missions {
            let spec = zoo.resolve(policy).map_err(|e| e.to_string())?;
            egos.insert(
                mission.agent_id.clone(),
                EgoSetup {
                    interface: spec.interface.clone(),
                    policy_label: policy.to_string(),
                },
            );
            drivers.insert(
                mission.agent_id.clone(),
                build_agent(
                    &spec,
                    zoo,
                    format!("demo:{}", mission.agent_id),
                    &RemoteConfig {
                        timeout: std::time::Duration::from_millis(1000),
                        connect_retries: 1,
                    },
                )
                .map_err(|e| e.to_string())?,
            );
        }
        let (sim, last) = Simulation::reset(scenario, seed, &egos, zoo.clone(), EngineConfig::default())
            .map_err(|e| e.to_string())?;
        Ok((sim, drivers, last))
    }
}

#[wasm_bindgen]
impl Demo {
    /// Build a demo episode over an embedded scenario. `policy` is a zoo
    /// name; the same policy drives every mission.
    #[wasm_bindgen(constructor)]
    pub fn new(scenario_name: &str, seed: u64, policy: &str) -> Result<Demo, String> {
        let zoo = Arc::new(Zoo::standard());
        let scenario = bind_embedded(scenario_name)?;
        zoo.resolve(policy).map_err(|e| e.to_string())?;
        let (sim, drivers, last) = Demo::start(&scenario, &zoo, seed, policy)?;
        Ok(Demo {
            scenario,
            zoo,
            sim,
            drivers,
            last,
            policy: policy.to_string(),
        })
    }

    /// Restart the episode with a new seed.
    pub fn reset(&mut self, seed: u64) -> Result<(), String> {
        let (sim, drivers, last) = Demo::start(&self.scenario, &self.zoo, seed, &self.policy)?;
        self.sim = sim;
        self.drivers = drivers;
        self.last = last;
        Ok(())
    }

    /// Static geometry for the canvas: lane polylines, widths, bubbles,
    /// mission goals. JSON.
    pub fn map_json(&self) -> String {
        let network = &self.scenario.network;
        let lanes: Vec<serde_json::Value> = network
            .lanes()
            .map(|lane| {
                serde_json::json!({
                    "id": lane.id.as_str(),
                    "width": lane.width,
                    "junction": network.junction_of(&lane.id).is_some(),
                    "points": lane.centerline.iter().map(|p| [p.x, p.y]).collect::<Vec<_>>(),
                })
            })
            .collect();
        let bubbles: Vec<serde_json::Value> = self
            .scenario
            .spec
            .bubbles
            .iter()
            .map(|b| {
                serde_json::json!({
                    "id": b.id,
                    "center": b.center,
                    "half_extents": b.half_extents,
                    "rotation": b.rotation,
                    "airlock_margin": b.airlock_margin,
                })
            })
            .collect();
        let goals: Vec<serde_json::Value> = self
            .scenario
            .missions
            .iter()
            .map(|m| {
                serde_json::json!({
                    "agent": m.agent_id,
                    "point": [m.goal_point.x, m.goal_point.y],
                    "radius": m.goal_radius,
                })
            })
            .collect();
        serde_json::json!({"lanes": lanes, "bubbles": bubbles, "goals": goals}).to_string()
    }

    /// Advance one fixed timestep and return the drawable world state. JSON.
    pub fn step(&mut self) -> Result<String, String> {
        if !self.sim.all_done() || !self.sim.world.vehicles.is_empty() {
            let mut inputs: BTreeMap<String, EgoInput> = BTreeMap::new();
            for id in self.sim.live_egos() {
                let r = &self.last[&id];
                let driver = self.drivers.get_mut(&id).expect("driver");
                let (action, substituted) =
                    driver.act(self.sim.world.step_index, &r.observation, &r.context);
                inputs.insert(id, EgoInput { action, substituted });
            }
            let results = self.sim.step(&inputs).map_err(|e| e.to_string())?;
            for (id, r) in results {
                self.last.insert(id, r);
            }
        }
        Ok(self.state_json())
    }

    /// Current world state without stepping. JSON.
    pub fn state_json(&self) -> String {
        let vehicles: Vec<serde_json::Value> = self
            .sim
            .world
            .vehicles
            .iter()
            .map(|(id, v)| {
                let owner = match v.owner() {
                    ControlOwner::EgoAgent(_) => "ego",
                    ControlOwner::SocialAgent(_) => "social",
                    ControlOwner::TrafficProvider => "traffic",
                };
                serde_json::json!({
                    "id": id.as_str(),
                    "x": v.state.position.x,
                    "y": v.state.position.y,
                    "heading": v.state.heading,
                    "speed": v.state.speed,
                    "length": v.state.length,
                    "width": v.state.width,
                    "owner": owner,
                })
            })
            .collect();
        let agents: Vec<serde_json::Value> = self
            .last
            .iter()
            .map(|(id, r)| {
                serde_json::json!({
                    "id": id,
                    "done": r.done,
                    "reward": r.reward,
                    "progress": r.progress,
                    "collision": r.events.collision,
                    "reached_goal": r.events.reached_goal,
                })
            })
            .collect();
        serde_json::json!({
            "step": self.sim.world.step_index,
            "time": self.sim.world.time(self.sim.config.dt),
            "all_done": self.sim.all_done(),
            "vehicles": vehicles,
            "agents": agents,
        })
        .to_string()
    }

    /// 80x80 grayscale BEV (row-major bytes) centered on the given ego.
    pub fn bev(&self, agent: &str) -> Vec<u8> {
        let id = VehicleId::new(agent.to_string());
        let Some(v) = self.sim.world.vehicles.get(&id) else {
            return vec![];
        };
        let others: Vec<waysim_core::sensing::SensedVehicle> = self
            .sim
            .world
            .vehicles
            .values()
            .map(|o| waysim_core::sensing::SensedVehicle::from_state(&o.state))
            .collect();
        let cfg = SensorConfig::default();
        rasterize_bev(&self.scenario.network, &v.state.pose(), &v.state, &others, &cfg).data
    }

    pub fn bev_size(&self) -> u32 {
        SensorConfig::default().bev_size as u32
    }

    pub fn step_index(&self) -> u32 {
        self.sim.world.step_index as u32
    }

    pub fn all_done(&self) -> bool {
        self.sim.all_done()
    }
}

/// IDM approach experiment for the explorer: a follower starts `gap0` meters
/// behind a leader driving at `leader_speed`. Returns the flattened series
/// [t, gap, speed, accel] per sample.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn idm_approach_series(
    max_accel: f64,
    comfort_brake: f64,
    min_gap: f64,
    time_headway: f64,
    desired_speed: f64,
    start_speed: f64,
    gap0: f64,
    leader_speed: f64,
    seconds: f64,
) -> Vec<f64> {
    let p = IdmParams {
        max_accel: max_accel.clamp(0.1, 5.0),
        comfort_brake: comfort_brake.clamp(0.1, 8.0),
        min_gap: min_gap.clamp(0.1, 10.0),
        time_headway: time_headway.clamp(0.1, 5.0),
    };
    let dt = 0.1;
    let mut gap = gap0.max(0.5);
    let mut v = start_speed.max(0.0);
    let mut out = Vec::new();
    let steps = ((seconds / dt) as usize).clamp(1, 3000);
    for i in 0..steps {
        let a = idm_acceleration(
            v,
            Some(Leader {
                gap,
                speed: leader_speed,
            }),
            desired_speed.max(0.1),
            &p,
        );
        out.extend_from_slice(&[i as f64 * dt, gap, v, a]);
        let nv = (v + a * dt).max(0.0);
        gap += (leader_speed - 0.5 * (v + nv)) * dt;
        gap = gap.max(0.0);
        v = nv;
    }
    out
}

/// Equilibrium gap of an IDM platoon as a function of common speed; returns
/// [speed, gap] pairs up to `desired_speed`.
#[wasm_bindgen]
pub fn idm_equilibrium_curve(
    max_accel: f64,
    comfort_brake: f64,
    min_gap: f64,
    time_headway: f64,
    desired_speed: f64,
) -> Vec<f64> {
    let _ = (max_accel, comfort_brake);
    let v0 = desired_speed.max(0.5);
    let mut out = Vec::new();
    let n = 60;
    for i in 0..n {
        let v = v0 * (i as f64) / n as f64 * 0.98;
        let s_star = min_gap.max(0.1) + v * time_headway.max(0.1);
        let gap = s_star / (1.0 - (v / v0).powi(4)).sqrt();
        out.extend_from_slice(&[v, gap]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_embedded_scenario_steps_in_the_demo() {
        for entry in SCENARIOS {
            let mut demo = Demo::new(entry.name, 42, "conservative_rule").unwrap();
            let map: serde_json::Value = serde_json::from_str(&demo.map_json()).unwrap();
            assert!(!map["lanes"].as_array().unwrap().is_empty());
            for _ in 0..50 {
                let state: serde_json::Value =
                    serde_json::from_str(&demo.step().unwrap()).unwrap();
                assert!(state["vehicles"].is_array(), "{}", entry.name);
            }
            assert_eq!(demo.step_index(), 50);
        }
    }

    #[test]
    fn demo_reset_reproduces_the_same_trajectory() {
        let mut demo = Demo::new("two_way_social", 7, "keep_lane").unwrap();
        let mut first = Vec::new();
        for _ in 0..80 {
            first.push(demo.step().unwrap());
        }
        demo.reset(7).unwrap();
        for expected in first {
            assert_eq!(demo.step().unwrap(), expected);
        }
    }

    #[test]
    fn bev_has_lane_and_vehicle_levels() {
        let mut demo = Demo::new("intersection", 42, "keep_lane").unwrap();
        for _ in 0..10 {
            demo.step().unwrap();
        }
        let bev = demo.bev("a0");
        assert_eq!(bev.len(), 80 * 80);
        assert!(bev.contains(&255), "ego footprint painted");
        assert!(bev.contains(&128), "lane surface painted");
    }

    #[test]
    fn unknown_scenario_or_policy_errors() {
        assert!(Demo::new("nope", 1, "keep_lane").is_err());
        assert!(Demo::new("two_way", 1, "martian").is_err());
    }

    #[test]
    fn idm_series_settles_behind_stopped_leader() {
        let series = idm_approach_series(1.5, 2.0, 2.0, 1.5, 15.0, 13.0, 60.0, 0.0, 60.0);
        assert_eq!(series.len() % 4, 0);
        let last = &series[series.len() - 4..];
        let (gap, speed) = (last[1], last[2]);
        assert!(speed < 0.05, "follower stops: v={speed}");
        assert!((gap - 2.0).abs() < 1.0, "settles near s0: gap={gap}");
    }

    #[test]
    fn equilibrium_curve_grows_with_speed() {
        let curve = idm_equilibrium_curve(1.5, 2.0, 2.0, 1.5, 15.0);
        assert!(curve.len() >= 4);
        let first_gap = curve[1];
        let last_gap = curve[curve.len() - 1];
        assert!(last_gap > first_gap);
    }
}
