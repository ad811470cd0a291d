//! Vehicle provider: kinematic-bicycle state integration and the four
//! controller abstractions (continuous, actuator-dynamic, trajectory
//! tracking, lane following).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::map::{LaneId, RoadNetwork, Route};
use crate::math::{normalize_angle, Pose, Vec2};

/// Identifier of a vehicle in the world.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub String);

impl VehicleId {
    pub fn new(id: impl Into<String>) -> Self {
        VehicleId(id.into())
    }
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for VehicleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for VehicleId {
    fn from(s: &str) -> Self {
        VehicleId(s.to_string())
    }
}

/// Physical state of one vehicle. Speeds are non-negative (no reverse).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: VehicleId,
    pub position: Vec2,
    /// Radians CCW from +x.
    pub heading: f64,
    /// m/s, >= 0.
    pub speed: f64,
    /// Effective longitudinal acceleration applied last step, m/s^2.
    pub accel: f64,
    /// Current steering angle, radians.
    pub steering: f64,
    pub length: f64,
    pub width: f64,
}

impl VehicleState {
    pub fn new(id: impl Into<VehicleId>, pose: Pose, speed: f64, model: &VehicleModel) -> Self {
        VehicleState {
            id: id.into(),
            position: pose.position,
            heading: pose.heading,
            speed,
            accel: 0.0,
            steering: 0.0,
            length: model.length,
            width: model.width,
        }
    }

    pub fn pose(&self) -> Pose {
        Pose {
            position: self.position,
            heading: self.heading,
        }
    }

    pub fn footprint(&self) -> crate::math::Obb {
        crate::math::Obb::new(self.position, self.length * 0.5, self.width * 0.5, self.heading)
    }
}

/// Vehicle-specific dynamics limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleModel {
    pub wheelbase: f64,
    pub max_steer: f64,
    pub max_accel: f64,
    pub max_brake: f64,
    pub max_steer_rate: f64,
    pub max_speed: f64,
    pub length: f64,
    pub width: f64,
}

impl Default for VehicleModel {
    fn default() -> Self {
        // typical sedan
        VehicleModel {
            wheelbase: 2.8,
            max_steer: 0.5,
            max_accel: 3.0,
            max_brake: 8.0,
            max_steer_rate: 1.0,
            max_speed: 30.0,
            length: 4.6,
            width: 1.8,
        }
    }
}

impl VehicleModel {
    pub fn validate(&self) -> Result<(), VehicleError> {
        let fields = [
            self.wheelbase,
            self.max_steer,
            self.max_accel,
            self.max_brake,
            self.max_steer_rate,
            self.max_speed,
            self.length,
            self.width,
        ];
        if fields.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(VehicleError::InvalidModel);
        }
        Ok(())
    }
}

/// One point of a tracked trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub time: f64,
}

/// Command in one of the four controller action spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum ControlCommand {
    /// throttle [0,1], brake [0,1], steering [-1,1] (fraction of max_steer).
    Continuous {
        throttle: f64,
        brake: f64,
        steering: f64,
    },
    /// throttle [0,1], brake [0,1], steering rate rad/s.
    ActuatorDynamic {
        throttle: f64,
        brake: f64,
        steering_rate: f64,
    },
    Trajectory { points: Vec<TrajectoryPoint> },
    /// target speed m/s; lane_change in {-1, 0, +1}.
    LaneFollowing { target_speed: f64, lane_change: i8 },
}

/// Per-step controller feedback: clamps applied, fallbacks taken.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlInfo {
    /// An input was outside its documented range and got clamped.
    pub input_clamped: bool,
    /// Steering hit the model's max_steer limit.
    pub steering_saturated: bool,
    /// A lane change toward a nonexistent neighbor was ignored.
    pub lane_change_ignored: bool,
    /// The tracked trajectory was exhausted; controller held full brake.
    pub trajectory_exhausted: bool,
}

impl ControlInfo {
    pub fn merge(self, other: ControlInfo) -> ControlInfo {
        ControlInfo {
            input_clamped: self.input_clamped || other.input_clamped,
            steering_saturated: self.steering_saturated || other.steering_saturated,
            lane_change_ignored: self.lane_change_ignored || other.lane_change_ignored,
            trajectory_exhausted: self.trajectory_exhausted || other.trajectory_exhausted,
        }
    }
}

#[derive(Debug, Error)]
pub enum VehicleError {
    #[error("vehicle model has non-positive parameters")]
    InvalidModel,
    #[error("vehicle is beyond the off-road margin of every lane")]
    OffRoad,
}

/// Pure-pursuit constants.
const LOOKAHEAD_GAIN: f64 = 0.8; // s
const LOOKAHEAD_MIN: f64 = 3.0; // m
const LOOKAHEAD_MAX: f64 = 15.0; // m
const SPEED_KP: f64 = 1.0; // 1/s
/// Duration of a commanded lane change, seconds.
pub const LANE_CHANGE_DURATION: f64 = 3.0;

fn clamp_recorded(v: f64, lo: f64, hi: f64, clamped: &mut bool) -> f64 {
    if v < lo || v > hi {
        *clamped = true;
    }
    v.clamp(lo, hi)
}

/// Advance the bicycle model one step with a fixed steering angle.
fn integrate(
    state: &VehicleState,
    model: &VehicleModel,
    throttle: f64,
    brake: f64,
    steering: f64,
    dt: f64,
) -> VehicleState {
    let accel_cmd = throttle * model.max_accel - brake * model.max_brake;
    let v0 = state.speed;
    let v1 = (v0 + accel_cmd * dt).clamp(0.0, model.max_speed);
    let v_avg = 0.5 * (v0 + v1);
    let yaw_rate = v_avg / model.wheelbase * steering.tan();
    let h0 = state.heading;
    let h1 = normalize_angle(h0 + yaw_rate * dt);
    let h_mid = h0 + 0.5 * yaw_rate * dt;
    let position = state.position + Vec2::from_heading(h_mid) * (v_avg * dt);
    VehicleState {
        id: state.id.clone(),
        position,
        heading: h1,
        speed: v1,
        accel: if dt > 0.0 { (v1 - v0) / dt } else { 0.0 },
        steering,
        length: state.length,
        width: state.width,
    }
}

/// Throttle/brake/steering control: steering angle is set directly as a
/// fraction of max_steer.
pub fn integrate_continuous(
    state: &VehicleState,
    model: &VehicleModel,
    throttle: f64,
    brake: f64,
    steering: f64,
    dt: f64,
) -> (VehicleState, ControlInfo) {
    let mut info = ControlInfo::default();
    let throttle = clamp_recorded(throttle, 0.0, 1.0, &mut info.input_clamped);
    let brake = clamp_recorded(brake, 0.0, 1.0, &mut info.input_clamped);
    let steering = clamp_recorded(steering, -1.0, 1.0, &mut info.input_clamped);
    let steer_angle = steering * model.max_steer;
    info.steering_saturated = steer_angle.abs() >= model.max_steer - 1e-12 && steer_angle != 0.0;
    (integrate(state, model, throttle, brake, steer_angle, dt), info)
}

/// Like [`integrate_continuous`] but steering moves at a commanded rate.
pub fn integrate_actuator_dynamic(
    state: &VehicleState,
    model: &VehicleModel,
    throttle: f64,
    brake: f64,
    steering_rate: f64,
    dt: f64,
) -> (VehicleState, ControlInfo) {
    let mut info = ControlInfo::default();
    let throttle = clamp_recorded(throttle, 0.0, 1.0, &mut info.input_clamped);
    let brake = clamp_recorded(brake, 0.0, 1.0, &mut info.input_clamped);
    let rate = clamp_recorded(
        steering_rate,
        -model.max_steer_rate,
        model.max_steer_rate,
        &mut info.input_clamped,
    );
    let steer = (state.steering + rate * dt).clamp(-model.max_steer, model.max_steer);
    info.steering_saturated = steer.abs() >= model.max_steer - 1e-12;
    (integrate(state, model, throttle, brake, steer, dt), info)
}

/// Pure-pursuit steering plus proportional speed control toward a trajectory.
/// Returns a Continuous command (throttle, brake, steering fraction).
pub fn track_trajectory(
    state: &VehicleState,
    model: &VehicleModel,
    points: &[TrajectoryPoint],
    _dt: f64,
) -> ((f64, f64, f64), ControlInfo) {
    let mut info = ControlInfo::default();
    if points.is_empty() {
        info.trajectory_exhausted = true;
        return ((0.0, 1.0, state.steering / model.max_steer), info);
    }

    // nearest trajectory point
    let mut nearest = 0;
    let mut nearest_d = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = state.position.distance(Vec2::new(p.x, p.y));
        if d < nearest_d {
            nearest_d = d;
            nearest = i;
        }
    }

    // exhausted: nearest is the last point and we are past it
    if nearest == points.len() - 1 {
        let last = points[nearest];
        let ahead = (Vec2::new(last.x, last.y) - state.position)
            .dot(Vec2::from_heading(last.heading));
        if ahead <= 0.0 {
            info.trajectory_exhausted = true;
            return ((0.0, 1.0, state.steering / model.max_steer), info);
        }
    }

    let lookahead = (LOOKAHEAD_GAIN * state.speed).clamp(LOOKAHEAD_MIN, LOOKAHEAD_MAX);
    let mut target = points.len() - 1;
    for (i, p) in points.iter().enumerate().skip(nearest) {
        if state.position.distance(Vec2::new(p.x, p.y)) >= lookahead {
            target = i;
            break;
        }
    }
    let tp = points[target];
    let to_target = Vec2::new(tp.x, tp.y) - state.position;
    let chord = to_target.length().max(1e-6);
    let alpha = normalize_angle(to_target.y.atan2(to_target.x) - state.heading);
    let curvature = 2.0 * alpha.sin() / chord;
    let steer_angle = (model.wheelbase * curvature).atan();
    let steering = (steer_angle / model.max_steer).clamp(-1.0, 1.0);

    let v_ref = points[nearest].speed;
    let accel_des = SPEED_KP * (v_ref - state.speed);
    let throttle = (accel_des / model.max_accel).clamp(0.0, 1.0);
    let brake = (-accel_des / model.max_brake).clamp(0.0, 1.0);
    ((throttle, brake, steering), info)
}

/// Generate a centerline-following path (optionally toward a neighbor lane)
/// and delegate to the trajectory tracker.
///
/// When `route` is given, successor lanes are chosen along it; otherwise the
/// lexicographically smallest successor continues the path.
pub fn lane_following_control(
    state: &VehicleState,
    model: &VehicleModel,
    network: &RoadNetwork,
    target_speed: f64,
    lane_change: i8,
    route: Option<&Route>,
    dt: f64,
) -> Result<((f64, f64, f64), ControlInfo), VehicleError> {
    let mut info = ControlInfo::default();
    let nearest = network.nearest_lane_position(state.position);
    if nearest.t.abs() > network.off_road_margin(&nearest.lane_id) {
        return Err(VehicleError::OffRoad);
    }

    let current = network.lane(&nearest.lane_id).expect("projected lane exists");
    let target_lane_id = match lane_change {
        1 => match &current.left_neighbor {
            Some(l) => l.clone(),
            None => {
                info.lane_change_ignored = true;
                current.id.clone()
            }
        },
        -1 => match &current.right_neighbor {
            Some(r) => r.clone(),
            None => {
                info.lane_change_ignored = true;
                current.id.clone()
            }
        },
        _ => current.id.clone(),
    };

    let speed = target_speed.clamp(0.0, model.max_speed);
    if speed < target_speed {
        info.input_clamped = true;
    }
    let horizon = (state.speed * LANE_CHANGE_DURATION).clamp(20.0, 50.0);
    let points = sample_lane_path(network, &target_lane_id, state.position, speed, horizon, route);
    let ((throttle, brake, steering), tinfo) = track_trajectory(state, model, &points, dt);
    Ok(((throttle, brake, steering), info.merge(tinfo)))
}

/// Sample waypoints every meter along a lane centerline (continuing into
/// successors), starting from the projection of `from`.
pub fn sample_lane_path(
    network: &RoadNetwork,
    lane_id: &LaneId,
    from: Vec2,
    speed: f64,
    horizon: f64,
    route: Option<&Route>,
) -> Vec<TrajectoryPoint> {
    let spacing = 1.0;
    let mut points = Vec::with_capacity(horizon as usize + 2);
    let mut lane = network.lane(lane_id).expect("lane exists");
    let (mut s, _, _) = lane.project(from);
    let mut time = 0.0;
    let mut remaining = horizon;
    let mut dead_end = false;
    while remaining > 0.0 {
        s += spacing;
        if s > lane.length() {
            let overshoot = s - lane.length();
            let next = match route {
                Some(r) => {
                    // next lane along the route, if the current lane is on it
                    r.lane_ids
                        .iter()
                        .position(|l| *l == lane.id)
                        .and_then(|i| r.lane_ids.get(i + 1))
                        .filter(|n| lane.successors.contains(n))
                        .or_else(|| lane.successors.iter().min())
                }
                None => lane.successors.iter().min(),
            };
            match next {
                Some(next_id) => {
                    lane = network.lane(next_id).expect("successor exists");
                    s = overshoot.min(lane.length());
                }
                None => {
                    dead_end = true;
                    break;
                }
            }
        }
        let pose = lane.pose_at(s, 0.0);
        time += spacing / speed.max(0.1);
        points.push(TrajectoryPoint {
            x: pose.position.x,
            y: pose.position.y,
            heading: pose.heading,
            speed,
            time,
        });
        remaining -= spacing;
    }
    if points.is_empty() {
        // at the very end of a dead-end lane: aim at the lane end
        let pose = lane.pose_at(lane.length(), 0.0);
        points.push(TrajectoryPoint {
            x: pose.position.x,
            y: pose.position.y,
            heading: pose.heading,
            speed,
            time: 0.0,
        });
        dead_end = true;
    }
    if dead_end {
        // the road ends: braking profile v = sqrt(2 a d) toward a stop at the
        // final point, with the last meters pinned to zero so the tracker's
        // proportional lag cannot carry the vehicle past the end
        let n = points.len();
        for (k, p) in points.iter_mut().rev().enumerate() {
            let dist_to_end = (k as f64) * spacing;
            let profile = if dist_to_end <= 3.0 {
                0.0
            } else {
                (2.0 * 1.8 * (dist_to_end - 3.0)).sqrt()
            };
            p.speed = p.speed.min(profile);
            if k as f64 * spacing > 60.0 {
                break;
            }
        }
        let _ = n;
    }
    points
}

/// Apply any [`ControlCommand`] to a state. LaneFollowing and Trajectory
/// commands reduce to a Continuous command first.
pub fn apply_command(
    state: &VehicleState,
    model: &VehicleModel,
    network: &RoadNetwork,
    command: &ControlCommand,
    route: Option<&Route>,
    dt: f64,
) -> Result<(VehicleState, ControlInfo), VehicleError> {
    match command {
        ControlCommand::Continuous {
            throttle,
            brake,
            steering,
        } => Ok(integrate_continuous(
            state, model, *throttle, *brake, *steering, dt,
        )),
        ControlCommand::ActuatorDynamic {
            throttle,
            brake,
            steering_rate,
        } => Ok(integrate_actuator_dynamic(
            state,
            model,
            *throttle,
            *brake,
            *steering_rate,
            dt,
        )),
        ControlCommand::Trajectory { points } => {
            let ((throttle, brake, steering), tinfo) = track_trajectory(state, model, points, dt);
            let (next, info) = integrate_continuous(state, model, throttle, brake, steering, dt);
            Ok((next, info.merge(tinfo)))
        }
        ControlCommand::LaneFollowing {
            target_speed,
            lane_change,
        } => {
            let ((throttle, brake, steering), linfo) = lane_following_control(
                state,
                model,
                network,
                *target_speed,
                *lane_change,
                route,
                dt,
            )?;
            let (next, info) = integrate_continuous(state, model, throttle, brake, steering, dt);
            Ok((next, info.merge(linfo)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::RoadNetwork;

    fn state_at(x: f64, y: f64, heading: f64, speed: f64) -> VehicleState {
        VehicleState {
            id: "v".into(),
            position: Vec2::new(x, y),
            heading,
            speed,
            accel: 0.0,
            steering: 0.0,
            length: 4.6,
            width: 1.8,
        }
    }

    #[test]
    fn straight_coast_advances_exactly() {
        let model = VehicleModel::default();
        let s = state_at(0.0, 0.0, 0.0, 10.0);
        let (next, info) = integrate_continuous(&s, &model, 0.0, 0.0, 0.0, 0.1);
        assert!((next.position.x - 1.0).abs() < 1e-12);
        assert_eq!(next.position.y, 0.0);
        assert_eq!(next.heading, 0.0);
        assert!(!info.input_clamped);
    }

    #[test]
    fn full_brake_never_reverses() {
        let model = VehicleModel::default();
        let s = state_at(0.0, 0.0, 0.0, 0.5);
        let (next, _) = integrate_continuous(&s, &model, 0.0, 1.0, 0.0, 0.1);
        assert_eq!(next.speed, 0.0);
    }

    #[test]
    fn out_of_range_inputs_are_clamped_and_flagged() {
        let model = VehicleModel::default();
        let s = state_at(0.0, 0.0, 0.0, 5.0);
        let (next, info) = integrate_continuous(&s, &model, 2.0, -1.0, 3.0, 0.1);
        assert!(info.input_clamped);
        assert!(next.speed <= 5.0 + model.max_accel * 0.1 + 1e-12);
        assert!(next.steering <= model.max_steer);
    }

    fn measure_radius(dt: f64, steps: usize) -> f64 {
        let model = VehicleModel::default();
        let mut s = state_at(0.0, 0.0, 0.0, 10.0);
        let mut pts = Vec::with_capacity(steps);
        for _ in 0..steps {
            // constant steering command 0.6 of max, throttle holds speed approx
            let (next, _) = integrate_continuous(&s, &model, 0.0, 0.0, 0.6, dt);
            s = next;
            s.speed = 10.0; // pin speed: the oracle is about the geometry
            pts.push(s.position);
        }
        let cx = pts.iter().map(|p| p.x).sum::<f64>() / pts.len() as f64;
        let cy = pts.iter().map(|p| p.y).sum::<f64>() / pts.len() as f64;
        pts.iter()
            .map(|p| p.distance(Vec2::new(cx, cy)))
            .sum::<f64>()
            / pts.len() as f64
    }

    #[test]
    fn constant_steering_circle_radius() {
        let model = VehicleModel::default();
        let delta = 0.6 * model.max_steer;
        let expected = model.wheelbase / delta.tan();
        // enough steps for at least one full revolution
        let circumference = 2.0 * std::f64::consts::PI * expected;
        let steps_fine = (circumference / (10.0 * 0.001)).ceil() as usize;
        let r_fine = measure_radius(0.001, steps_fine);
        assert!(
            (r_fine - expected).abs() / expected < 0.001,
            "dt=0.001: {r_fine} vs {expected}"
        );
        let steps_coarse = (circumference / (10.0 * 0.1)).ceil() as usize;
        let r_coarse = measure_radius(0.1, steps_coarse);
        assert!(
            (r_coarse - expected).abs() / expected < 0.02,
            "dt=0.1: {r_coarse} vs {expected}"
        );
    }

    #[test]
    fn actuator_dynamic_matches_continuous_at_fixed_steering() {
        let model = VehicleModel::default();
        let mut s = state_at(0.0, 0.0, 0.2, 8.0);
        s.steering = 0.25;
        let (a, _) = integrate_actuator_dynamic(&s, &model, 0.3, 0.0, 0.0, 0.1);
        let (b, _) = integrate_continuous(&s, &model, 0.3, 0.0, 0.25 / model.max_steer, 0.1);
        assert!((a.position.x - b.position.x).abs() < 1e-12);
        assert!((a.position.y - b.position.y).abs() < 1e-12);
        assert!((a.heading - b.heading).abs() < 1e-12);
        assert!((a.steering - b.steering).abs() < 1e-12);
    }

    #[test]
    fn steering_rate_accumulates_linearly() {
        let model = VehicleModel::default();
        let mut s = state_at(0.0, 0.0, 0.0, 5.0);
        for _ in 0..10 {
            let (next, _) = integrate_actuator_dynamic(&s, &model, 0.0, 0.0, 0.1, 0.1);
            s = next;
        }
        assert!((s.steering - 0.1).abs() < 1e-12);
    }

    #[test]
    fn steering_rate_pins_at_max_steer() {
        let model = VehicleModel::default();
        let mut s = state_at(0.0, 0.0, 0.0, 5.0);
        for _ in 0..200 {
            let (next, info) = integrate_actuator_dynamic(&s, &model, 0.0, 0.0, 50.0, 0.1);
            assert!(info.input_clamped);
            s = next;
        }
        assert_eq!(s.steering, model.max_steer);
    }

    #[test]
    fn teleport_and_speed_bounds_hold() {
        use rand::{Rng, SeedableRng};
        let model = VehicleModel::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut s = state_at(0.0, 0.0, 0.0, 3.0);
        for _ in 0..2000 {
            let before = s.clone();
            let (next, _) = integrate_continuous(
                &s,
                &model,
                rng.gen_range(-0.5..1.5),
                rng.gen_range(-0.5..1.5),
                rng.gen_range(-1.5..1.5),
                0.1,
            );
            let moved = next.position.distance(before.position);
            assert!(moved <= (before.speed + model.max_accel * 0.1) * 0.1 + 1e-9);
            assert!(next.speed >= 0.0 && next.speed <= model.max_speed);
            s = next;
        }
    }

    #[test]
    fn halving_dt_converges_quadratically_on_straight() {
        let model = VehicleModel::default();
        let drive = |dt: f64| {
            let mut s = state_at(0.0, 0.0, 0.0, 5.0);
            let steps = (10.0 / dt).round() as usize;
            for _ in 0..steps {
                let (next, _) = integrate_continuous(&s, &model, 0.5, 0.0, 0.0, dt);
                s = next;
            }
            s.position
        };
        let a = drive(0.1);
        let b = drive(0.05);
        assert!(a.distance(b) < 0.05, "{:?} vs {:?}", a, b);
    }

    fn straight_trajectory(speed: f64) -> Vec<TrajectoryPoint> {
        (0..100)
            .map(|i| TrajectoryPoint {
                x: i as f64,
                y: 0.0,
                heading: 0.0,
                speed,
                time: i as f64 / speed,
            })
            .collect()
    }

    #[test]
    fn on_trajectory_steering_is_negligible() {
        let model = VehicleModel::default();
        let s = state_at(10.0, 0.0, 0.0, 10.0);
        let ((throttle, brake, steering), info) =
            track_trajectory(&s, &model, &straight_trajectory(10.0), 0.1);
        assert!(steering.abs() < 1e-3);
        assert!(throttle.abs() < 1e-6 && brake.abs() < 1e-6);
        assert!(!info.trajectory_exhausted);
    }

    #[test]
    fn offset_left_steers_right() {
        let model = VehicleModel::default();
        let s = state_at(10.0, 1.0, 0.0, 10.0);
        let ((_, _, steering), _) = track_trajectory(&s, &model, &straight_trajectory(10.0), 0.1);
        assert!(steering < 0.0, "steer right means negative steering");
    }

    #[test]
    fn exhausted_trajectory_brakes() {
        let model = VehicleModel::default();
        let s = state_at(150.0, 0.0, 0.0, 10.0);
        let ((throttle, brake, _), info) =
            track_trajectory(&s, &model, &straight_trajectory(10.0), 0.1);
        assert!(info.trajectory_exhausted);
        assert_eq!(throttle, 0.0);
        assert_eq!(brake, 1.0);
    }

    #[test]
    fn circle_tracking_steady_state_error() {
        let model = VehicleModel::default();
        let radius = 20.0;
        let speed = 5.0;
        let traj: Vec<TrajectoryPoint> = (0..((2.0 * std::f64::consts::PI * radius) as usize))
            .map(|i| {
                let a = i as f64 / radius;
                TrajectoryPoint {
                    x: radius * a.cos(),
                    y: radius * a.sin(),
                    heading: a + std::f64::consts::FRAC_PI_2,
                    speed,
                    time: i as f64 / speed,
                }
            })
            .collect();
        let mut s = state_at(radius, 0.0, std::f64::consts::FRAC_PI_2, speed);
        let dt = 0.1;
        let mut worst_after_10s = 0.0f64;
        for step in 0..200 {
            let ((throttle, brake, steering), _) = track_trajectory(&s, &model, &traj, dt);
            let (next, _) = integrate_continuous(&s, &model, throttle, brake, steering, dt);
            s = next;
            if step as f64 * dt >= 10.0 {
                let err = (s.position.length() - radius).abs();
                worst_after_10s = worst_after_10s.max(err);
            }
        }
        assert!(
            worst_after_10s < 0.3,
            "steady-state cross-track error {worst_after_10s}"
        );
    }

    fn two_lane_network() -> RoadNetwork {
        let doc = serde_json::json!({
            "format": 1,
            "lanes": {
                "r0": {"centerline": [[0.0,0.0],[400.0,0.0]], "width": 3.5, "speed_limit": 13.9, "left_neighbor": "r1"},
                "r1": {"centerline": [[0.0,3.5],[400.0,3.5]], "width": 3.5, "speed_limit": 13.9, "right_neighbor": "r0"}
            },
            "edges": {"main": ["r0", "r1"]}
        })
        .to_string();
        RoadNetwork::load(&doc).unwrap()
    }

    #[test]
    fn lane_keep_equilibrium_is_quiet() {
        let net = two_lane_network();
        let model = VehicleModel::default();
        let s = state_at(50.0, 0.0, 0.0, 10.0);
        let ((throttle, brake, steering), info) =
            lane_following_control(&s, &model, &net, 10.0, 0, None, 0.1).unwrap();
        assert!(steering.abs() < 1e-3);
        assert!(throttle < 1e-6 && brake < 1e-6);
        assert!(!info.lane_change_ignored);
    }

    #[test]
    fn lane_change_left_reaches_neighbor() {
        let net = two_lane_network();
        let model = VehicleModel::default();
        let mut s = state_at(20.0, 0.0, 0.0, 10.0);
        let dt = 0.1;
        let steps = ((LANE_CHANGE_DURATION + 1.0) / dt) as usize;
        for _ in 0..steps {
            let ((throttle, brake, steering), _) =
                lane_following_control(&s, &model, &net, 10.0, 1, None, dt).unwrap();
            let (next, _) = integrate_continuous(&s, &model, throttle, brake, steering, dt);
            s = next;
        }
        assert!(
            s.position.y >= 3.3,
            "lateral offset after lane change: {}",
            s.position.y
        );
    }

    #[test]
    fn lane_change_without_neighbor_falls_back() {
        let net = two_lane_network();
        let model = VehicleModel::default();
        let s = state_at(20.0, 0.0, 0.0, 10.0);
        // r0 has no right neighbor
        let (cmd_fallback, info) =
            lane_following_control(&s, &model, &net, 10.0, -1, None, 0.1).unwrap();
        let (cmd_keep, _) = lane_following_control(&s, &model, &net, 10.0, 0, None, 0.1).unwrap();
        assert!(info.lane_change_ignored);
        assert_eq!(cmd_fallback, cmd_keep);
    }

    #[test]
    fn far_off_road_is_an_error() {
        let net = two_lane_network();
        let model = VehicleModel::default();
        let s = state_at(50.0, -40.0, 0.0, 5.0);
        assert!(matches!(
            lane_following_control(&s, &model, &net, 10.0, 0, None, 0.1),
            Err(VehicleError::OffRoad)
        ));
    }
}

#[cfg(test)]
mod dead_end_tests {
    use super::*;
    use crate::map::RoadNetwork;
    use crate::math::{Pose, Vec2};

    #[test]
    fn lane_following_stops_at_a_dead_end() {
        let doc = serde_json::json!({
            "format": 1,
            "lanes": {
                "d0": {"centerline": [[0.0,0.0],[150.0,0.0]], "width": 3.5, "speed_limit": 13.9}
            },
            "edges": {"main": ["d0"]}
        })
        .to_string();
        let net = RoadNetwork::load(&doc).unwrap();
        let model = VehicleModel::default();
        let mut s = VehicleState::new("v", Pose::new(10.0, 0.0, 0.0), 13.9, &model);
        let dt = 0.1;
        for _ in 0..400 {
            let ((throttle, brake, steering), _) =
                lane_following_control(&s, &model, &net, 13.9, 0, None, dt).unwrap();
            let (next, _) = integrate_continuous(&s, &model, throttle, brake, steering, dt);
            s = next;
        }
        assert!(s.speed < 0.1, "comes to rest, v={}", s.speed);
        assert!(
            s.position.x <= 150.0 + 1.0,
            "stops by the end of the lane, x={}",
            s.position.x
        );
        assert!(s.position.distance(Vec2::new(150.0, 0.0)) < 12.0);
    }
}
