//! Observation, reward, and event construction.
//!
//! Frames are computed in the ego frame (x forward, y left). The BEV grid is
//! an ego-centered, ego-aligned grayscale occupancy raster with three levels:
//! 0 empty, 0.5 lane surface, 1.0 vehicle footprint.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::map::{RoadNetwork, Route};
use crate::math::{normalize_angle, Obb, Pose, Vec2};
use crate::vehicle::{sample_lane_path, VehicleId, VehicleState};

/// Sensor switches and geometry knobs, all config-exposed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    pub neighbors: bool,
    pub bev: bool,
    pub waypoints: bool,
    /// Neighbor candidate radius, m.
    pub neighbor_radius: f64,
    /// Max neighbors kept in a frame.
    pub neighbor_limit: usize,
    /// BEV grid side length, cells.
    pub bev_size: usize,
    /// BEV meters per cell.
    pub bev_resolution: f64,
    /// Number of lookahead waypoints for heading errors.
    pub waypoint_count: usize,
    /// Spacing between lookahead waypoints, m.
    pub waypoint_spacing: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            neighbors: true,
            bev: true,
            waypoints: true,
            neighbor_radius: 50.0,
            neighbor_limit: 8,
            bev_size: 80,
            bev_resolution: 0.5,
            waypoint_count: 10,
            waypoint_spacing: 1.0,
        }
    }
}

/// Minimal view of a vehicle for sensing purposes.
#[derive(Debug, Clone)]
pub struct SensedVehicle {
    pub id: VehicleId,
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
    pub length: f64,
    pub width: f64,
}

impl SensedVehicle {
    pub fn from_state(s: &VehicleState) -> Self {
        SensedVehicle {
            id: s.id.clone(),
            position: s.position,
            heading: s.heading,
            speed: s.speed,
            length: s.length,
            width: s.width,
        }
    }
}

/// One neighboring vehicle as observed from the ego.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborObs {
    pub rel_distance: f64,
    pub speed: f64,
    /// (dx forward, dy left) in the ego frame.
    pub rel_position: (f64, f64),
}

/// Ego-centered grayscale occupancy grid. Values are bytes; 0 = empty,
/// 128 = lane surface, 255 = vehicle footprint (grayscale 0..1 over 0..255).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BevGrid {
    pub size: usize,
    pub resolution: f64,
    /// Row-major, row 0 = farthest forward, col 0 = leftmost.
    pub data: Vec<u8>,
}

pub const BEV_EMPTY: u8 = 0;
pub const BEV_LANE: u8 = 128;
pub const BEV_VEHICLE: u8 = 255;

impl BevGrid {
    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.size + col]
    }

    /// Grayscale value in [0, 1].
    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.at(row, col) as f64 / 255.0
    }

    /// Ego-frame coordinates of a cell center.
    pub fn cell_center(&self, row: usize, col: usize) -> Vec2 {
        let half = self.size as f64 / 2.0;
        Vec2::new(
            (half - row as f64 - 0.5) * self.resolution,
            (half - col as f64 - 0.5) * self.resolution,
        )
    }
}

/// One per-step sensor frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationFrame {
    /// Goal position in the ego frame.
    pub goal_rel: (f64, f64),
    /// Signed lateral offset from the lane centerline (positive left).
    pub dist_to_center: f64,
    pub speed: f64,
    pub steering: f64,
    /// Heading error at each lookahead waypoint (lane tangent minus ego heading).
    pub heading_errors: Vec<f64>,
    /// Nearest neighbors, ascending by distance, at most `neighbor_limit`.
    pub neighbors: Vec<NeighborObs>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bev: Option<BevGrid>,
}

/// Exactly three consecutive frames, oldest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedObservation {
    pub frames: [ObservationFrame; 3],
}

impl StackedObservation {
    pub fn latest(&self) -> &ObservationFrame {
        &self.frames[2]
    }
}

/// Key per-step events for one agent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventFlags {
    pub collision: bool,
    pub off_road: bool,
    pub reached_goal: bool,
    pub wrong_way: bool,
    pub timeout: bool,
}

impl EventFlags {
    pub fn any_terminal(&self) -> bool {
        self.collision || self.off_road || self.reached_goal || self.timeout
    }
}

/// Weights of the shaped reward components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub collision: f64,
    pub reached_goal: f64,
    pub off_road: f64,
    pub wrong_way: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            collision: -10.0,
            reached_goal: 20.0,
            off_road: -5.0,
            wrong_way: -2.0,
        }
    }
}

/// Raw reward is route progress per step; the shaped reward adds weighted
/// event terms.
pub fn compute_reward(
    prev_progress: f64,
    new_progress: f64,
    events: &EventFlags,
    weights: &RewardWeights,
) -> (f64, f64) {
    let raw = new_progress - prev_progress;
    let mut shaped = raw;
    if events.collision {
        shaped += weights.collision;
    }
    if events.reached_goal {
        shaped += weights.reached_goal;
    }
    if events.off_road {
        shaped += weights.off_road;
    }
    if events.wrong_way {
        shaped += weights.wrong_way;
    }
    (raw, shaped)
}

/// Compute one observation frame for a vehicle.
pub fn sense_frame(
    network: &RoadNetwork,
    ego: &VehicleState,
    others: &[SensedVehicle],
    route: Option<&Route>,
    goal: Vec2,
    config: &SensorConfig,
) -> ObservationFrame {
    let pose = ego.pose();
    let goal_rel_v = pose.to_ego(goal);
    let nearest = network.nearest_lane_position(ego.position);
    let dist_to_center = nearest.t;

    let heading_errors = if config.waypoints {
        let horizon = config.waypoint_count as f64 * config.waypoint_spacing + 1.0;
        let path = sample_lane_path(
            network,
            &nearest.lane_id,
            ego.position,
            1.0,
            horizon,
            route,
        );
        let mut errors = Vec::with_capacity(config.waypoint_count);
        for i in 0..config.waypoint_count {
            let tangent = path
                .get(i)
                .or_else(|| path.last())
                .map(|p| p.heading)
                .unwrap_or(ego.heading);
            errors.push(normalize_angle(tangent - ego.heading));
        }
        errors
    } else {
        Vec::new()
    };

    let neighbors = if config.neighbors {
        let mut candidates: Vec<(f64, &SensedVehicle)> = others
            .iter()
            .filter(|o| o.id != ego.id)
            .map(|o| (ego.position.distance(o.position), o))
            .filter(|(d, _)| *d <= config.neighbor_radius)
            .collect();
        candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.id.cmp(&b.1.id)));
        candidates
            .into_iter()
            .take(config.neighbor_limit)
            .map(|(d, o)| {
                let rel = pose.to_ego(o.position);
                NeighborObs {
                    rel_distance: d,
                    speed: o.speed,
                    rel_position: (rel.x, rel.y),
                }
            })
            .collect()
    } else {
        Vec::new()
    };

    let bev = if config.bev {
        Some(rasterize_bev(network, &pose, ego, others, config))
    } else {
        None
    };

    ObservationFrame {
        goal_rel: (goal_rel_v.x, goal_rel_v.y),
        dist_to_center,
        speed: ego.speed,
        steering: ego.steering,
        heading_errors,
        neighbors,
        bev,
    }
}

/// Ego-centered, ego-aligned occupancy raster. Any overlap of a vehicle
/// footprint with a cell sets the cell to the vehicle level.
pub fn rasterize_bev(
    network: &RoadNetwork,
    ego_pose: &Pose,
    ego: &VehicleState,
    others: &[SensedVehicle],
    config: &SensorConfig,
) -> BevGrid {
    let size = config.bev_size;
    let res = config.bev_resolution;
    let mut grid = BevGrid {
        size,
        resolution: res,
        data: vec![BEV_EMPTY; size * size],
    };

    // lane layer: exact point-in-lane test at every cell center
    for row in 0..size {
        for col in 0..size {
            let local = grid.cell_center(row, col);
            let world = ego_pose.position + local.rotated(ego_pose.heading);
            if network.on_lane_surface(world) {
                grid.data[row * size + col] = BEV_LANE;
            }
        }
    }

    // vehicle layer: ego plus everything within the window
    let half_window = size as f64 * res * 0.5;
    let ego_sensed = SensedVehicle::from_state(ego);
    let mut stamp = |v: &SensedVehicle| {
        // vehicle OBB expressed in the ego frame
        let center = ego_pose.to_ego(v.position);
        let reach = (v.length + v.width) * 0.5;
        if center.x.abs() > half_window + reach || center.y.abs() > half_window + reach {
            return;
        }
        let obb = Obb::new(center, v.length * 0.5, v.width * 0.5, v.heading - ego_pose.heading);
        let (min, max) = obb.aabb();
        let half = size as f64 / 2.0;
        // ego-frame (x fwd, y left) -> (row, col)
        let row_lo = ((half - max.x / res) - 0.5).floor().max(0.0) as usize;
        let row_hi = ((half - min.x / res) - 0.5).ceil().min(size as f64 - 1.0) as usize;
        let col_lo = ((half - max.y / res) - 0.5).floor().max(0.0) as usize;
        let col_hi = ((half - min.y / res) - 0.5).ceil().min(size as f64 - 1.0) as usize;
        for row in row_lo..=row_hi {
            for col in col_lo..=col_hi {
                let c = grid.cell_center(row, col);
                let cell = Obb::new(c, res * 0.5, res * 0.5, 0.0);
                if obb.overlaps(&cell) {
                    grid.data[row * size + col] = BEV_VEHICLE;
                }
            }
        }
    };
    stamp(&ego_sensed);
    for o in others {
        if o.id != ego.id {
            stamp(o);
        }
    }
    grid
}

/// Keep the most recent frames; the stack pads episode starts by repeating
/// the first frame.
#[derive(Debug, Clone, Default)]
pub struct FrameHistory {
    frames: VecDeque<ObservationFrame>,
}

impl FrameHistory {
    pub fn push(&mut self, frame: ObservationFrame) {
        self.frames.push_back(frame);
        while self.frames.len() > 3 {
            self.frames.pop_front();
        }
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    /// Last 3 frames, oldest first, padded with the first frame at the start.
    pub fn stack(&self) -> Option<StackedObservation> {
        let first = self.frames.front()?;
        let frame = |i: usize| -> ObservationFrame {
            let len = self.frames.len();
            if len >= 3 - i {
                self.frames[len - (3 - i)].clone()
            } else {
                first.clone()
            }
        };
        Some(StackedObservation {
            frames: [frame(0), frame(1), frame(2)],
        })
    }
}

/// Free-function form of the stacking rule over a raw frame list.
pub fn stack_frames(history: &[ObservationFrame]) -> Option<StackedObservation> {
    let first = history.first()?;
    let len = history.len();
    let pick = |i: usize| -> ObservationFrame {
        if len >= 3 - i {
            history[len - (3 - i)].clone()
        } else {
            first.clone()
        }
    };
    Some(StackedObservation {
        frames: [pick(0), pick(1), pick(2)],
    })
}
