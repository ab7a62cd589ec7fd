//! Synthetic lane-graph scenes with tracked actor histories and a
//! ground-truth future for one target actor.

pub mod dataset;
pub mod region;

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{arc, dist, point_at, polyline_length, wrap_angle, Point, Polygon, Pose};

/// Observed states per actor: the current one and the previous 0.4 s.
pub const HISTORY_LEN: usize = 5;
pub const HISTORY_DT: f64 = 0.1;
/// Predicted points: 4 s at 2 Hz.
pub const FUTURE_LEN: usize = 8;
pub const FUTURE_DT: f64 = 0.5;
/// Per-state feature count, see [`ActorState::features`].
pub const STATE_DIM: usize = 6;

pub const LANE_WIDTH: f64 = 3.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorState {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub a: f64,
    /// Radians in `(-pi, pi]`.
    pub heading: f64,
    pub yaw_rate: f64,
    pub timestamp: f64,
}

impl ActorState {
    pub fn position(&self) -> Point {
        [self.x, self.y]
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.x, self.y, self.heading)
    }

    /// `[x, y, v, a, heading, yaw_rate]`.
    pub fn features(&self) -> [f64; STATE_DIM] {
        [self.x, self.y, self.v, self.a, self.heading, self.yaw_rate]
    }

    pub fn in_frame(&self, frame: &Pose) -> ActorState {
        let [x, y] = frame.to_local(self.position());
        ActorState {
            x,
            y,
            heading: frame.heading_to_local(self.heading),
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnTag {
    Straight,
    LeftOnly,
    RightOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lane {
    /// Travel direction follows point order.
    pub centerline: Vec<Point>,
    pub width: f64,
    pub successors: Vec<usize>,
    pub turn: TurnTag,
}

impl Lane {
    pub fn length(&self) -> f64 {
        polyline_length(&self.centerline)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaneGraph {
    pub lanes: Vec<Lane>,
    pub crosswalks: Vec<Polygon>,
}

impl LaneGraph {
    pub fn validate(&self) -> Result<()> {
        for (k, lane) in self.lanes.iter().enumerate() {
            if lane.centerline.len() < 2 || !(lane.width > 0.0) {
                return Err(Error::Contract(format!("lane {k} is degenerate")));
            }
            if let Some(s) = lane.successors.iter().find(|&&s| s >= self.lanes.len()) {
                return Err(Error::Contract(format!("lane {k} has invalid successor {s}")));
            }
        }
        Ok(())
    }

    fn transformed(&self, f: &Pose) -> LaneGraph {
        LaneGraph {
            lanes: self
                .lanes
                .iter()
                .map(|l| Lane {
                    centerline: l.centerline.iter().map(|&p| f.to_parent(p)).collect(),
                    ..l.clone()
                })
                .collect(),
            crosswalks: self.crosswalks.iter().map(|c| c.map(|p| f.to_parent(p))).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Actor {
    /// Oldest first; the last entry is the current state.
    pub states: Vec<ActorState>,
    pub length: f64,
    pub width: f64,
}

impl Actor {
    pub fn current(&self) -> &ActorState {
        self.states.last().expect("actor has states")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Straight,
    LeftTurnOnly,
    RightTurnOnly,
    IntersectionUnprotectedLeft,
}

impl Template {
    pub const ALL: [Template; 4] = [
        Template::Straight,
        Template::LeftTurnOnly,
        Template::RightTurnOnly,
        Template::IntersectionUnprotectedLeft,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Template::Straight => "straight",
            Template::LeftTurnOnly => "left_turn_only",
            Template::RightTurnOnly => "right_turn_only",
            Template::IntersectionUnprotectedLeft => "intersection_unprotected_left",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub template: Template,
    /// Global frame.
    pub map: LaneGraph,
    /// Global frame.
    pub actors: Vec<Actor>,
    pub target: usize,
    /// Target actor frame at the current timestamp.
    pub future: Vec<Point>,
}

impl Scene {
    pub fn target_actor(&self) -> &Actor {
        &self.actors[self.target]
    }

    /// Frame of an actor's current state: origin at its centre, x along its heading.
    pub fn actor_frame(&self, actor: usize) -> Result<Pose> {
        self.actors
            .get(actor)
            .map(|a| a.current().pose())
            .ok_or_else(|| {
                Error::Contract(format!(
                    "actor {actor} out of range ({} actors)",
                    self.actors.len()
                ))
            })
    }

    /// Target history in its own current frame, flattened oldest first.
    pub fn target_state_features(&self) -> Vec<f64> {
        let frame = self.target_actor().current().pose();
        self.target_actor()
            .states
            .iter()
            .flat_map(|s| s.in_frame(&frame).features())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.map.validate()?;
        if self.target >= self.actors.len() {
            return Err(Error::Contract(format!("target {} out of range", self.target)));
        }
        if let Some(k) = self.actors.iter().position(|a| a.states.len() != HISTORY_LEN) {
            return Err(Error::Contract(format!(
                "actor {k} has {} states, expected {HISTORY_LEN}",
                self.actors[k].states.len()
            )));
        }
        if self.future.len() != FUTURE_LEN {
            return Err(Error::Contract(format!(
                "future has {} points, expected {FUTURE_LEN}",
                self.future.len()
            )));
        }
        Ok(())
    }

    /// Same scene with the map and actors expressed in `frame`.
    pub fn in_frame(&self, frame: &Pose) -> Scene {
        let inv = {
            // parent-of-frame -> frame is the inverse rigid transform
            let o = frame.to_local([0.0, 0.0]);
            Pose::new(o[0], o[1], -frame.heading)
        };
        Scene {
            map: self.map.transformed(&inv),
            actors: self
                .actors
                .iter()
                .map(|a| Actor {
                    states: a.states.iter().map(|s| s.in_frame(frame)).collect(),
                    ..a.clone()
                })
                .collect(),
            ..self.clone()
        }
    }
}

/// Knobs of the scene generator beyond the template itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub max_distractors: usize,
    /// Std of Gaussian noise added to every observed yaw rate of the target (rad/s).
    pub yaw_rate_noise: f64,
    /// Bound on the lateral deviation of the target from its lane centre (m).
    pub lateral_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            max_distractors: 4,
            yaw_rate_noise: 0.0,
            lateral_noise: 0.2,
        }
    }
}

struct Layout {
    lanes: Vec<Lane>,
    crosswalks: Vec<Polygon>,
    route: Vec<usize>,
}

fn lane(centerline: Vec<Point>, successors: Vec<usize>, turn: TurnTag) -> Lane {
    Lane {
        centerline,
        width: LANE_WIDTH,
        successors,
        turn,
    }
}

const ARM: f64 = 100.0;
const HALF: f64 = LANE_WIDTH / 2.0;
/// Side of the square junction box, two lanes wide.
const BOX: f64 = 2.0 * LANE_WIDTH * 2.0;

fn straight_layout() -> Layout {
    Layout {
        lanes: vec![
            lane(vec![[-ARM, -HALF], [ARM + 50.0, -HALF]], vec![], TurnTag::Straight),
            lane(vec![[ARM + 50.0, HALF], [-ARM, HALF]], vec![], TurnTag::Straight),
        ],
        crosswalks: vec![],
        route: vec![0],
    }
}

/// Four-arm junction with the box spanning `x in [0, BOX]`, `y in [-BOX/2, BOX/2]`.
/// The target approaches eastbound in the lower lane of the west arm.
fn junction_layout(template: Template) -> Layout {
    let c = BOX / 2.0;
    let (xs, xn) = (c - HALF, c + HALF);
    let step = PI / 48.0;
    let left_r = c + HALF;
    let right_r = c - HALF;
    // indices
    const APPROACH: usize = 0;
    const EAST_EXIT: usize = 1;
    const NORTH_EXIT: usize = 2;
    const SOUTH_EXIT: usize = 3;
    const THROUGH: usize = 4;
    const LEFT: usize = 5;
    const RIGHT: usize = 6;
    let (succ, tag) = match template {
        Template::LeftTurnOnly => (vec![LEFT], TurnTag::LeftOnly),
        Template::RightTurnOnly => (vec![RIGHT], TurnTag::RightOnly),
        _ => (vec![THROUGH, LEFT, RIGHT], TurnTag::Straight),
    };
    let mut lanes = vec![
        lane(vec![[-ARM, -HALF], [0.0, -HALF]], succ, tag),
        lane(vec![[BOX, -HALF], [BOX + ARM, -HALF]], vec![], TurnTag::Straight),
        lane(vec![[xn, c], [xn, c + ARM]], vec![], TurnTag::Straight),
        lane(vec![[xs, -c], [xs, -c - ARM]], vec![], TurnTag::Straight),
        lane(vec![[0.0, -HALF], [BOX, -HALF]], vec![EAST_EXIT], TurnTag::Straight),
        lane(
            arc([0.0, c], left_r, -FRAC_PI_2, 0.0, step),
            vec![NORTH_EXIT],
            TurnTag::LeftOnly,
        ),
        lane(
            arc([0.0, -c], right_r, FRAC_PI_2, 0.0, step),
            vec![SOUTH_EXIT],
            TurnTag::RightOnly,
        ),
    ];
    // opposing and crossing traffic: approach, through connector, exit
    let others: [[Point; 4]; 3] = [
        [[BOX + ARM, HALF], [BOX, HALF], [0.0, HALF], [-ARM, HALF]],
        [[xn, -c - ARM], [xn, -c], [xn, c], [xn, c + ARM]],
        [[xs, c + ARM], [xs, c], [xs, -c], [xs, -c - ARM]],
    ];
    for (k, p) in others.iter().enumerate() {
        let base = lanes.len();
        let exit = match k {
            0 => {
                lanes.push(lane(vec![p[2], p[3]], vec![], TurnTag::Straight));
                base
            }
            1 => NORTH_EXIT,
            _ => SOUTH_EXIT,
        };
        let conn = lanes.len();
        lanes.push(lane(vec![p[1], p[2]], vec![exit], TurnTag::Straight));
        lanes.push(lane(vec![p[0], p[1]], vec![conn], TurnTag::Straight));
    }
    let depth = 3.0;
    let crosswalks = vec![
        Polygon::rectangle([-depth / 2.0 - 1.0, 0.0], 0.0, depth, BOX / 2.0 + 2.0 * HALF),
        Polygon::rectangle([BOX + depth / 2.0 + 1.0, 0.0], 0.0, depth, BOX / 2.0 + 2.0 * HALF),
        Polygon::rectangle([c, -c - depth / 2.0 - 1.0], FRAC_PI_2, depth, BOX / 2.0 + 2.0 * HALF),
        Polygon::rectangle([c, c + depth / 2.0 + 1.0], FRAC_PI_2, depth, BOX / 2.0 + 2.0 * HALF),
    ];
    let route = match template {
        Template::RightTurnOnly => vec![APPROACH, RIGHT, SOUTH_EXIT],
        _ => vec![APPROACH, LEFT, NORTH_EXIT],
    };
    Layout {
        lanes,
        crosswalks,
        route,
    }
}

fn concat_route(lanes: &[Lane], route: &[usize]) -> Vec<Point> {
    let mut out: Vec<Point> = Vec::new();
    for &k in route {
        for &p in &lanes[k].centerline {
            if out.last().is_none_or(|&q| dist(p, q) > 1e-9) {
                out.push(p);
            }
        }
    }
    out
}

/// Chord heading over a 1 m window, which smooths the polyline corners.
fn smooth_heading(line: &[Point], s: f64) -> f64 {
    let (a, _) = point_at(line, s - 0.5);
    let (b, _) = point_at(line, s + 0.5);
    (b[1] - a[1]).atan2(b[0] - a[0])
}

fn curvature(line: &[Point], s: f64) -> f64 {
    wrap_angle(smooth_heading(line, s + 1.0) - smooth_heading(line, s - 1.0)) / 2.0
}

/// Kinematic sample along a path: station `s0` at `t = 0`, speed `v`,
/// constant acceleration `a`, lateral offset `lat(t)` to the left.
struct Motion<'a> {
    path: &'a [Point],
    s0: f64,
    v: f64,
    a: f64,
    lat0: f64,
    lat_rate: f64,
}

impl Motion<'_> {
    fn station(&self, t: f64) -> f64 {
        self.s0 + self.v * t + 0.5 * self.a * t * t
    }

    fn position(&self, t: f64) -> Point {
        let s = self.station(t);
        let (p, _) = point_at(self.path, s);
        let h = smooth_heading(self.path, s);
        let e = self.lat0 + self.lat_rate * t;
        [p[0] - e * h.sin(), p[1] + e * h.cos()]
    }

    fn state(&self, t: f64) -> ActorState {
        let s = self.station(t);
        let v = self.v + self.a * t;
        let [x, y] = self.position(t);
        ActorState {
            x,
            y,
            v,
            a: self.a,
            heading: wrap_angle(smooth_heading(self.path, s)),
            yaw_rate: v * curvature(self.path, s),
            timestamp: t,
        }
    }

    fn history(&self) -> Vec<ActorState> {
        (0..HISTORY_LEN)
            .map(|k| self.state(-((HISTORY_LEN - 1 - k) as f64) * HISTORY_DT))
            .collect()
    }
}

pub fn generate_scene(template: Template, seed: u64) -> Scene {
    generate_scene_with(template, seed, &SynthConfig::default())
}

pub fn generate_scene_with(template: Template, seed: u64, cfg: &SynthConfig) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_scene_rng(template, &mut rng, cfg)
}

pub(crate) fn generate_scene_rng(template: Template, rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Scene {
    let layout = match template {
        Template::Straight => straight_layout(),
        t => junction_layout(t),
    };
    let path = concat_route(&layout.lanes, &layout.route);
    let approach_len = layout.lanes[layout.route[0]].length();
    let horizon = FUTURE_LEN as f64 * FUTURE_DT;

    let (v, a, s0) = match template {
        Template::Straight => {
            let v = rng.random_range(3.0..15.0);
            let a = rng.random_range(-0.5..1.0);
            (v, a, approach_len - ARM - 50.0 + rng.random_range(-10.0..10.0))
        }
        _ => {
            // fast enough that the turn is finished within the horizon
            let v = rng.random_range(6.0..10.0);
            let a = rng.random_range(-0.25..1.0);
            let travel = v * horizon + 0.5 * a * horizon * horizon;
            let turn_len = layout.lanes[layout.route[1]].length();
            let max_gap = (travel - turn_len - 6.0).clamp(0.0, 25.0);
            (v, a, approach_len - rng.random_range(0.0..=max_gap))
        }
    };
    let bound = cfg.lateral_noise / 2.0;
    let (lat0, lat_end) = if bound > 0.0 {
        (rng.random_range(-bound..=bound), rng.random_range(-bound..=bound))
    } else {
        (0.0, 0.0)
    };
    let motion = Motion {
        path: &path,
        s0,
        v,
        a,
        lat0,
        lat_rate: lat_end / horizon,
    };
    let mut target_states = motion.history();
    if cfg.yaw_rate_noise > 0.0 {
        let n = Normal::new(0.0, cfg.yaw_rate_noise).expect("finite std");
        for s in &mut target_states {
            s.yaw_rate += n.sample(rng);
        }
    }
    let frame_local = target_states.last().unwrap().pose();
    let future_local: Vec<Point> = (1..=FUTURE_LEN)
        .map(|k| motion.position(k as f64 * FUTURE_DT))
        .collect();

    let mut actors = vec![Actor {
        states: target_states,
        length: 4.5,
        width: 2.0,
    }];
    let n_others = rng.random_range(0..=cfg.max_distractors);
    let mut attempts = 0;
    while actors.len() < n_others + 1 && attempts < 50 {
        attempts += 1;
        let k = rng.random_range(0..layout.lanes.len());
        let line = &layout.lanes[k].centerline;
        let s = rng.random_range(0.0..polyline_length(line));
        let m = Motion {
            path: line,
            s0: s,
            v: rng.random_range(2.0..12.0),
            a: 0.0,
            lat0: 0.0,
            lat_rate: 0.0,
        };
        let p = m.position(0.0);
        if actors.iter().any(|o| dist(o.current().position(), p) < 8.0) {
            continue;
        }
        actors.push(Actor {
            states: m.history(),
            length: 4.5,
            width: 2.0,
        });
    }

    let global = Pose::new(
        rng.random_range(-500.0..500.0),
        rng.random_range(-500.0..500.0),
        rng.random_range(-PI..PI),
    );
    let actors: Vec<Actor> = actors
        .into_iter()
        .map(|a| Actor {
            states: a
                .states
                .iter()
                .map(|s| {
                    let [x, y] = global.to_parent(s.position());
                    ActorState {
                        x,
                        y,
                        heading: global.heading_to_parent(s.heading),
                        ..*s
                    }
                })
                .collect(),
            ..a
        })
        .collect();
    // future in the target frame, which is invariant to the global pose
    let future = future_local
        .iter()
        .map(|&p| frame_local.to_local(p))
        .collect();
    Scene {
        template,
        map: LaneGraph {
            lanes: layout.lanes,
            crosswalks: layout.crosswalks,
        }
        .transformed(&global),
        actors,
        target: 0,
        future,
    }
}
