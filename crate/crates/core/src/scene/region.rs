//! Drivable regions: lane corridors reachable from an actor's position.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::{Scene, FUTURE_DT, FUTURE_LEN};
use crate::geometry::{buffer_polyline, project, wrap_angle, Point, Polygon};

/// Largest lateral distance at which an actor is associated with a lane.
pub const CAPTURE_DISTANCE: f64 = 3.0;
/// Added to the distance covered at constant speed over the horizon.
pub const HORIZON_MARGIN: f64 = 20.0;

/// Union of lane corridors, in the frame of the actor it was built for.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DrivableRegion {
    pub lanes: Vec<usize>,
    pub polygons: Vec<Polygon>,
}

impl DrivableRegion {
    pub fn is_empty(&self) -> bool {
        self.polygons.is_empty()
    }

    pub fn contains(&self, p: Point) -> bool {
        self.polygons.iter().any(|q| q.contains(p))
    }

    /// Zero inside or on the boundary; `None` for an empty region.
    pub fn distance(&self, p: Point) -> Option<f64> {
        if self.is_empty() {
            return None;
        }
        if self.contains(p) {
            return Some(0.0);
        }
        Some(
            self.polygons
                .iter()
                .map(|q| q.boundary_distance(p))
                .fold(f64::INFINITY, f64::min),
        )
    }
}

/// Traversal length for an actor at speed `v`.
pub fn default_horizon(v: f64) -> f64 {
    v * FUTURE_LEN as f64 * FUTURE_DT + HORIZON_MARGIN
}

/// Breadth-first traversal of successors from the lane nearest to the
/// actor until `horizon_m` of centreline lies ahead of its projection.
///
/// Lanes within [`CAPTURE_DISTANCE`] whose direction is within 90 degrees
/// of the actor's heading are preferred; an actor with no lane in capture
/// range gets an empty region.
pub fn drivable_region(scene: &Scene, actor: usize, horizon_m: f64) -> DrivableRegion {
    let Some(a) = scene.actors.get(actor) else {
        return DrivableRegion::default();
    };
    let st = a.current();
    let lanes = &scene.map.lanes;
    let mut best: Option<(bool, f64, usize, f64)> = None;
    for (k, lane) in lanes.iter().enumerate() {
        let Some(pr) = project(&lane.centerline, st.position()) else {
            continue;
        };
        if pr.distance > CAPTURE_DISTANCE {
            continue;
        }
        let misaligned = wrap_angle(pr.heading - st.heading).abs() > std::f64::consts::FRAC_PI_2;
        let key = (misaligned, pr.distance, k, pr.station);
        if best.is_none_or(|b| (key.0, key.1) < (b.0, b.1)) {
            best = Some(key);
        }
    }
    let Some((_, _, start, station)) = best else {
        return DrivableRegion::default();
    };

    let mut visited = BTreeSet::from([start]);
    let mut queue = VecDeque::from([(start, lanes[start].length() - station)]);
    while let Some((k, ahead)) = queue.pop_front() {
        if ahead >= horizon_m {
            continue;
        }
        for &s in &lanes[k].successors {
            if visited.insert(s) {
                queue.push_back((s, ahead + lanes[s].length()));
            }
        }
    }

    let frame = st.pose();
    let lanes_in: Vec<usize> = visited.into_iter().collect();
    let mut polygons: Vec<Polygon> = lanes_in
        .iter()
        .map(|&k| {
            let local: Vec<Point> = lanes[k]
                .centerline
                .iter()
                .map(|&p| frame.to_local(p))
                .collect();
            buffer_polyline(&local, lanes[k].width / 2.0)
        })
        .collect();
    // flat corridor ends leave a wedge on the outside of every bend between
    // consecutive lanes; round joins close it
    for &k in &lanes_in {
        let Some(&end) = lanes[k].centerline.last() else {
            continue;
        };
        for &s in lanes[k].successors.iter().filter(|s| lanes_in.contains(s)) {
            let half = lanes[k].width.min(lanes[s].width) / 2.0;
            polygons.push(disk(frame.to_local(end), half));
        }
    }
    DrivableRegion {
        lanes: lanes_in,
        polygons,
    }
}

/// Regular polygon inscribed in the circle of radius `r` around `c`.
fn disk(c: Point, r: f64) -> Polygon {
    const SIDES: usize = 48;
    Polygon::new(
        (0..SIDES)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / SIDES as f64;
                [c[0] + r * a.cos(), c[1] + r * a.sin()]
            })
            .collect(),
    )
}

/// Region of the scene's target with the default horizon.
pub fn target_region(scene: &Scene) -> DrivableRegion {
    let v = scene.target_actor().current().v;
    drivable_region(scene, scene.target, default_horizon(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, Actor, ActorState, Lane, LaneGraph, Template, TurnTag};

    fn actor_at(x: f64, y: f64, heading: f64) -> Actor {
        let s = ActorState {
            x,
            y,
            v: 10.0,
            a: 0.0,
            heading,
            yaw_rate: 0.0,
            timestamp: 0.0,
        };
        Actor {
            states: vec![s; 5],
            length: 4.5,
            width: 2.0,
        }
    }

    fn one_lane_scene(actor: Actor) -> Scene {
        Scene {
            template: Template::Straight,
            map: LaneGraph {
                lanes: vec![Lane {
                    centerline: vec![[0.0, 0.0], [200.0, 0.0]],
                    width: 3.5,
                    successors: vec![],
                    turn: TurnTag::Straight,
                }],
                crosswalks: vec![],
            },
            actors: vec![actor],
            target: 0,
            future: vec![[0.0, 0.0]; 8],
        }
    }

    #[test]
    fn straight_lane_corridor() {
        let s = one_lane_scene(actor_at(20.0, 0.5, 0.0));
        let r = drivable_region(&s, 0, 60.0);
        assert_eq!(r.lanes, vec![0]);
        assert!(r.contains([60.0, -0.5]));
        assert!(r.contains([150.0, 1.25]));
        assert!((r.distance([30.0, 1.25 + 2.0]).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn actor_off_road_has_empty_region() {
        let s = one_lane_scene(actor_at(20.0, 50.0, 0.0));
        let r = drivable_region(&s, 0, 60.0);
        assert!(r.is_empty());
        assert_eq!(r.distance([0.0, 0.0]), None);
    }

    #[test]
    fn left_only_lane_excludes_opposing_traffic() {
        let s = generate_scene(Template::LeftTurnOnly, 4);
        let r = target_region(&s);
        // approach, north exit, left connector
        assert_eq!(r.lanes, vec![0, 2, 5]);
        let frame = s.target_actor().current().pose();
        let opposing = &s.map.lanes[7].centerline;
        let (a, b) = (opposing[0], opposing[opposing.len() - 1]);
        let mid = frame.to_local([(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]);
        assert!(!r.contains(mid));
    }

    #[test]
    fn ground_truth_is_inside_its_region() {
        for t in Template::ALL {
            for seed in 0..25 {
                let s = generate_scene(t, seed);
                let r = target_region(&s);
                for p in &s.future {
                    assert_eq!(r.distance(*p), Some(0.0), "{t:?} seed {seed} {p:?}");
                }
            }
        }
    }
}
