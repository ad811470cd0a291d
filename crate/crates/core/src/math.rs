//! Small 2D geometry helpers shared by the map, vehicle, and collision code.

use serde::{Deserialize, Serialize};

/// 2D vector / point in meters, world frame (x east, y north).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 3D cross product; positive when `other` is to the left of `self`.
    pub fn cross(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn length(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).length()
    }

    pub fn normalized(self) -> Vec2 {
        let len = self.length();
        if len <= f64::EPSILON {
            Vec2::ZERO
        } else {
            Vec2::new(self.x / len, self.y / len)
        }
    }

    /// Rotate counterclockwise by `angle` radians.
    pub fn rotated(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(self.x * c - self.y * s, self.x * s + self.y * c)
    }

    /// Unit vector pointing along `heading` (radians CCW from +x).
    pub fn from_heading(heading: f64) -> Vec2 {
        let (s, c) = heading.sin_cos();
        Vec2::new(c, s)
    }

    /// Left-hand normal of the direction given by `heading`.
    pub fn left_normal(heading: f64) -> Vec2 {
        let (s, c) = heading.sin_cos();
        Vec2::new(-s, c)
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl std::ops::Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x * rhs, self.y * rhs)
    }
}

/// Position plus heading, the pose every provider works in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec2,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose {
            position: Vec2::new(x, y),
            heading,
        }
    }

    /// Express a world-frame point in this pose's ego frame (x forward, y left).
    pub fn to_ego(&self, world_point: Vec2) -> Vec2 {
        (world_point - self.position).rotated(-self.heading)
    }
}

/// Wrap an angle into (-pi, pi].
pub fn normalize_angle(angle: f64) -> f64 {
    let mut a = angle % std::f64::consts::TAU;
    if a <= -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    } else if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    }
    a
}

/// Absolute angular difference in [0, pi].
pub fn angle_between(a: f64, b: f64) -> f64 {
    normalize_angle(a - b).abs()
}

/// Project `point` onto segment [a, b]. Returns (parameter in [0,1], distance,
/// signed lateral offset — positive left of the a→b direction).
pub fn project_onto_segment(point: Vec2, a: Vec2, b: Vec2) -> (f64, f64, f64) {
    let ab = b - a;
    let len2 = ab.dot(ab);
    let t = if len2 <= f64::EPSILON {
        0.0
    } else {
        ((point - a).dot(ab) / len2).clamp(0.0, 1.0)
    };
    let closest = a + ab * t;
    let dist = point.distance(closest);
    let side = ab.cross(point - a);
    let signed = if side >= 0.0 { dist } else { -dist };
    (t, dist, signed)
}

/// Do segments [a1,a2] and [b1,b2] intersect (including touching endpoints)?
pub fn segments_intersect(a1: Vec2, a2: Vec2, b1: Vec2, b2: Vec2) -> bool {
    fn orient(p: Vec2, q: Vec2, r: Vec2) -> f64 {
        (q - p).cross(r - p)
    }
    fn on_segment(p: Vec2, q: Vec2, r: Vec2) -> bool {
        q.x >= p.x.min(r.x) && q.x <= p.x.max(r.x) && q.y >= p.y.min(r.y) && q.y <= p.y.max(r.y)
    }
    let d1 = orient(b1, b2, a1);
    let d2 = orient(b1, b2, a2);
    let d3 = orient(a1, a2, b1);
    let d4 = orient(a1, a2, b2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(b1, a1, b2))
        || (d2 == 0.0 && on_segment(b1, a2, b2))
        || (d3 == 0.0 && on_segment(a1, b1, a2))
        || (d4 == 0.0 && on_segment(a1, b2, a2))
}

/// Oriented rectangle: center, half extents along its local axes, rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obb {
    pub center: Vec2,
    pub half_len: f64,
    pub half_wid: f64,
    pub heading: f64,
}

impl Obb {
    pub fn new(center: Vec2, half_len: f64, half_wid: f64, heading: f64) -> Self {
        Obb {
            center,
            half_len,
            half_wid,
            heading,
        }
    }

    pub fn corners(&self) -> [Vec2; 4] {
        let fwd = Vec2::from_heading(self.heading) * self.half_len;
        let left = Vec2::left_normal(self.heading) * self.half_wid;
        [
            self.center + fwd + left,
            self.center + fwd - left,
            self.center - fwd - left,
            self.center - fwd + left,
        ]
    }

    pub fn contains(&self, point: Vec2) -> bool {
        let local = (point - self.center).rotated(-self.heading);
        local.x.abs() <= self.half_len && local.y.abs() <= self.half_wid
    }

    /// Axis-aligned bounds, used by the broad phase.
    pub fn aabb(&self) -> (Vec2, Vec2) {
        let corners = self.corners();
        let mut min = corners[0];
        let mut max = corners[0];
        for c in &corners[1..] {
            min.x = min.x.min(c.x);
            min.y = min.y.min(c.y);
            max.x = max.x.max(c.x);
            max.y = max.y.max(c.y);
        }
        (min, max)
    }

    /// Separating-axis overlap test for two oriented rectangles.
    pub fn overlaps(&self, other: &Obb) -> bool {
        let axes = [
            Vec2::from_heading(self.heading),
            Vec2::left_normal(self.heading),
            Vec2::from_heading(other.heading),
            Vec2::left_normal(other.heading),
        ];
        let a = self.corners();
        let b = other.corners();
        for axis in axes {
            let (mut amin, mut amax) = (f64::INFINITY, f64::NEG_INFINITY);
            for c in a {
                let p = c.dot(axis);
                amin = amin.min(p);
                amax = amax.max(p);
            }
            let (mut bmin, mut bmax) = (f64::INFINITY, f64::NEG_INFINITY);
            for c in b {
                let p = c.dot(axis);
                bmin = bmin.min(p);
                bmax = bmax.max(p);
            }
            if amax < bmin || bmax < amin {
                return false;
            }
        }
        true
    }
}
