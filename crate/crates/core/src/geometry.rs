//! Planar geometry: rigid frames, polylines and polygons.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub type Point = [f64; 2];

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// A rigid frame: origin and heading of the local x axis in the parent frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose { x, y, heading }
    }

    /// Parent-frame point expressed in this frame.
    pub fn to_local(&self, p: Point) -> Point {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Local point expressed in the parent frame.
    pub fn to_parent(&self, p: Point) -> Point {
        let (s, c) = self.heading.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    pub fn heading_to_local(&self, h: f64) -> f64 {
        wrap_angle(h - self.heading)
    }

    pub fn heading_to_parent(&self, h: f64) -> f64 {
        wrap_angle(h + self.heading)
    }
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Distance from `p` to segment `ab` and the clamped parameter of the foot.
pub fn segment_distance(p: Point, a: Point, b: Point) -> (f64, f64) {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 == 0.0 {
        0.0
    } else {
        (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0)
    };
    let foot = [a[0] + t * ab[0], a[1] + t * ab[1]];
    (dist(p, foot), t)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub distance: f64,
    /// Arc length of the foot point along the polyline.
    pub station: f64,
    /// Direction of the segment holding the foot point.
    pub heading: f64,
}

pub fn polyline_length(line: &[Point]) -> f64 {
    line.windows(2).map(|w| dist(w[0], w[1])).sum()
}

pub fn project(line: &[Point], p: Point) -> Option<Projection> {
    let mut best: Option<Projection> = None;
    let mut acc = 0.0;
    for w in line.windows(2) {
        let (d, t) = segment_distance(p, w[0], w[1]);
        let len = dist(w[0], w[1]);
        if best.is_none_or(|b| d < b.distance) {
            best = Some(Projection {
                distance: d,
                station: acc + t * len,
                heading: (w[1][1] - w[0][1]).atan2(w[1][0] - w[0][0]),
            });
        }
        acc += len;
    }
    best
}

/// Point and tangent heading at arc length `s`, extrapolating linearly
/// past either end.
pub fn point_at(line: &[Point], s: f64) -> (Point, f64) {
    let n = line.len();
    assert!(n >= 2, "polyline needs two points");
    let heading = |a: Point, b: Point| (b[1] - a[1]).atan2(b[0] - a[0]);
    let along = |a: Point, b: Point, d: f64| {
        let l = dist(a, b);
        [a[0] + (b[0] - a[0]) * d / l, a[1] + (b[1] - a[1]) * d / l]
    };
    if s <= 0.0 {
        return (along(line[0], line[1], s), heading(line[0], line[1]));
    }
    let mut acc = 0.0;
    for w in line.windows(2) {
        let l = dist(w[0], w[1]);
        if s <= acc + l {
            return (along(w[0], w[1], s - acc), heading(w[0], w[1]));
        }
        acc += l;
    }
    let (a, b) = (line[n - 2], line[n - 1]);
    (along(a, b, s - acc + dist(a, b)), heading(a, b))
}

/// Closed polygon; the last vertex connects back to the first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub points: Vec<Point>,
}

impl Polygon {
    pub fn new(points: Vec<Point>) -> Self {
        Polygon { points }
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.points.len();
        (0..n).map(move |k| (self.points[k], self.points[(k + 1) % n]))
    }

    pub fn boundary_distance(&self, p: Point) -> f64 {
        self.edges()
            .map(|(a, b)| segment_distance(p, a, b).0)
            .fold(f64::INFINITY, f64::min)
    }

    /// Even-odd interior test; boundary points count as inside.
    pub fn contains(&self, p: Point) -> bool {
        if self.boundary_distance(p) <= 1e-9 {
            return true;
        }
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a[1] > p[1]) != (b[1] > p[1]) {
                let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
                if p[0] < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Zero inside (boundary included), Euclidean distance to the boundary outside.
    pub fn distance(&self, p: Point) -> f64 {
        if self.contains(p) {
            0.0
        } else {
            self.boundary_distance(p)
        }
    }

    pub fn signed_area(&self) -> f64 {
        0.5 * self.edges().map(|(a, b)| cross(a, b)).sum::<f64>()
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Polygon {
        Polygon::new(self.points.iter().map(|&p| f(p)).collect())
    }

    pub fn rectangle(center: Point, heading: f64, length: f64, width: f64) -> Polygon {
        let frame = Pose::new(center[0], center[1], heading);
        let (l, w) = (length / 2.0, width / 2.0);
        Polygon::new(
            [[l, w], [-l, w], [-l, -w], [l, -w]]
                .into_iter()
                .map(|p| frame.to_parent(p))
                .collect(),
        )
    }
}

/// Offsets a polyline sideways by `d` (positive = left) with miter joins.
pub fn offset_polyline(line: &[Point], d: f64) -> Vec<Point> {
    let n = line.len();
    let normal = |a: Point, b: Point| {
        let l = dist(a, b);
        [-(b[1] - a[1]) / l, (b[0] - a[0]) / l]
    };
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let nrm = if k == 0 {
            normal(line[0], line[1])
        } else if k == n - 1 {
            normal(line[n - 2], line[n - 1])
        } else {
            let (n0, n1) = (normal(line[k - 1], line[k]), normal(line[k], line[k + 1]));
            let m = [n0[0] + n1[0], n0[1] + n1[1]];
            // miter vector m / (1 + n0.n1) has unit projection on both normals
            let s = 1.0 + dot(n0, n1);
            [m[0] / s, m[1] / s]
        };
        out.push([line[k][0] + d * nrm[0], line[k][1] + d * nrm[1]]);
    }
    out
}

/// Corridor of half-width `half` around a polyline: miter joins, flat ends.
pub fn buffer_polyline(line: &[Point], half: f64) -> Polygon {
    let mut pts = offset_polyline(line, half);
    let mut right = offset_polyline(line, -half);
    right.reverse();
    pts.extend(right);
    Polygon::new(pts)
}

/// Polyline approximation of a circular arc, at most `max_step` radians per segment.
pub fn arc(center: Point, radius: f64, from: f64, to: f64, max_step: f64) -> Vec<Point> {
    let n = ((to - from).abs() / max_step).ceil().max(1.0) as usize;
    (0..=n)
        .map(|k| {
            let a = from + (to - from) * k as f64 / n as f64;
            [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pose_round_trip() {
        let f = Pose::new(3.0, -2.0, 0.7);
        let p = [1.5, 4.0];
        let q = f.to_parent(f.to_local(p));
        assert!(dist(p, q) < 1e-12);
        let ahead = f.to_parent([1.0, 0.0]);
        assert!((ahead[0] - 3.0 - 0.7f64.cos()).abs() < 1e-12);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
    }

    #[test]
    fn straight_corridor_is_a_rectangle() {
        let poly = buffer_polyline(&[[0.0, 0.0], [5.0, 0.0], [10.0, 0.0]], 1.5);
        assert!((poly.signed_area().abs() - 30.0).abs() < 1e-9);
        assert!(poly.contains([5.0, 1.5]));
        assert!(poly.contains([0.0, 0.0]));
        assert!(!poly.contains([5.0, 1.6]));
        assert!((poly.distance([5.0, 3.5]) - 2.0).abs() < 1e-12);
        assert!((poly.distance([-1.0, 0.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn miter_join_keeps_offset_distance() {
        let line = [[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]];
        let left = offset_polyline(&line, 1.0);
        assert!(dist(left[1], [9.0, 1.0]) < 1e-12);
    }

    #[test]
    fn projection_and_stationing() {
        let line = [[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]];
        let pr = project(&line, [12.0, 4.0]).unwrap();
        assert!((pr.distance - 2.0).abs() < 1e-12);
        assert!((pr.station - 14.0).abs() < 1e-12);
        let (p, h) = point_at(&line, 15.0);
        assert!(dist(p, [10.0, 5.0]) < 1e-12 && (h - PI / 2.0).abs() < 1e-12);
        let (p, _) = point_at(&line, -2.0);
        assert!(dist(p, [-2.0, 0.0]) < 1e-12);
        assert!((polyline_length(&line) - 20.0).abs() < 1e-12);
    }
}
