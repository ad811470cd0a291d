//! Collision detection: uniform spatial hash broad phase over vehicle AABBs,
//! separating-axis narrow phase on oriented boxes.

use std::collections::{BTreeMap, BTreeSet};

use crate::math::Obb;
use crate::vehicle::VehicleId;

/// Broad-phase cell size, meters.
const CELL: f64 = 10.0;

#[derive(Debug, Default, Clone, Copy)]
pub struct CollisionStats {
    /// Pairs that reached the narrow-phase SAT test.
    pub narrow_tests: usize,
}

/// Unordered colliding id pairs (each pair sorted, result sorted).
pub fn detect_collisions(items: &[(VehicleId, Obb)]) -> Vec<(VehicleId, VehicleId)> {
    detect_collisions_with_stats(items).0
}

pub fn detect_collisions_with_stats(
    items: &[(VehicleId, Obb)],
) -> (Vec<(VehicleId, VehicleId)>, CollisionStats) {
    let mut grid: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, (_, obb)) in items.iter().enumerate() {
        let (min, max) = obb.aabb();
        let x0 = (min.x / CELL).floor() as i64;
        let x1 = (max.x / CELL).floor() as i64;
        let y0 = (min.y / CELL).floor() as i64;
        let y1 = (max.y / CELL).floor() as i64;
        for cx in x0..=x1 {
            for cy in y0..=y1 {
                grid.entry((cx, cy)).or_default().push(i);
            }
        }
    }

    let mut candidates: BTreeSet<(usize, usize)> = BTreeSet::new();
    for bucket in grid.values() {
        for (k, &a) in bucket.iter().enumerate() {
            for &b in &bucket[k + 1..] {
                let pair = if a < b { (a, b) } else { (b, a) };
                candidates.insert(pair);
            }
        }
    }

    let mut stats = CollisionStats::default();
    let mut out = Vec::new();
    for (a, b) in candidates {
        stats.narrow_tests += 1;
        if items[a].1.overlaps(&items[b].1) {
            let (ia, ib) = (&items[a].0, &items[b].0);
            let pair = if ia < ib {
                (ia.clone(), ib.clone())
            } else {
                (ib.clone(), ia.clone())
            };
            out.push(pair);
        }
    }
    out.sort();
    (out, stats)
}
