//! Bird's-eye scene rasters and PNG export.
//!
//! Palette (RGB in `[0, 1]`):
//!
//! | feature            | colour                                         |
//! |--------------------|------------------------------------------------|
//! | lane surface       | `(0.25, 0.25, 0.25)`                           |
//! | crosswalk          | `(0.55, 0.55, 0.55)`                           |
//! | lane centreline    | `(0, 0.5 + 0.5 cos phi, 0.5 + 0.5 sin phi)`, `phi` = travel direction in the actor frame |
//! | other actors       | `(1, 1, 0)`                                    |
//! | target actor       | `(1, 0, 0)`                                    |
//!
//! Actor boxes are drawn oldest state first with opacity `(k + 1) / L`, so
//! the current box is opaque and older ones fade.
//!
//! Exported images put the actor's forward direction up and its left to the
//! left: raster cell `(i, j)` becomes pixel `(H - 1 - i, W - 1 - j)`.

use std::path::Path;

pub use image::RgbImage;
use image::Rgb;

use super::{RasterConfig, RasterGrid};
use crate::error::{Error, Result};
use crate::geometry::{buffer_polyline, segment_distance, Point, Polygon};
use crate::scene::Scene;
use crate::tensor::Tensor;

pub const ROAD: [f64; 3] = [0.25, 0.25, 0.25];
pub const CROSSWALK: [f64; 3] = [0.55, 0.55, 0.55];
pub const OTHER_ACTOR: [f64; 3] = [1.0, 1.0, 0.0];
pub const TARGET_ACTOR: [f64; 3] = [1.0, 0.0, 0.0];

pub fn direction_colour(phi: f64) -> [f64; 3] {
    [0.0, 0.5 + 0.5 * phi.cos(), 0.5 + 0.5 * phi.sin()]
}

/// Three colour planes `[3, H, W]`, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRaster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl SceneRaster {
    pub fn blank(cfg: &RasterConfig) -> Self {
        SceneRaster {
            height: cfg.height,
            width: cfg.width,
            data: vec![0.0; 3 * cfg.cells()],
        }
    }

    pub fn pixel(&self, i: usize, j: usize) -> [f64; 3] {
        let n = self.height * self.width;
        let k = i * self.width + j;
        [self.data[k], self.data[n + k], self.data[2 * n + k]]
    }

    fn blend(&mut self, i: usize, j: usize, c: [f64; 3], alpha: f64) {
        let n = self.height * self.width;
        let k = i * self.width + j;
        for (ch, v) in c.iter().enumerate() {
            let d = &mut self.data[ch * n + k];
            *d = alpha * v + (1.0 - alpha) * *d;
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![3, self.height, self.width], self.data.clone()).expect("raster shape")
    }

    pub fn is_blank(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }
}

/// Calls `f(i, j)` for every cell whose centre lies in the closed polygon.
fn fill_polygon(poly: &Polygon, cfg: &RasterConfig, mut f: impl FnMut(usize, usize)) {
    let pts = &poly.points;
    let n = pts.len();
    if n < 3 {
        return;
    }
    let mut xs: Vec<f64> = Vec::new();
    for i in 0..cfg.height {
        let x = cfg.row_coord(i);
        xs.clear();
        for k in 0..n {
            let (a, b) = (pts[k], pts[(k + 1) % n]);
            if (a[0] > x) != (b[0] > x) {
                xs.push(a[1] + (x - a[0]) / (b[0] - a[0]) * (b[1] - a[1]));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            let lo = (pair[0] / cfg.resolution + cfg.origin_col as f64).ceil().max(0.0);
            let hi = (pair[1] / cfg.resolution + cfg.origin_col as f64).floor();
            if hi < 0.0 {
                continue;
            }
            let hi = hi.min(cfg.width as f64 - 1.0);
            let mut j = lo;
            while j <= hi {
                f(i, j as usize);
                j += 1.0;
            }
        }
    }
}

fn draw_line(line: &[Point], half: f64, cfg: &RasterConfig, mut f: impl FnMut(usize, usize, f64)) {
    for w in line.windows(2) {
        let (a, b) = (w[0], w[1]);
        let phi = (b[1] - a[1]).atan2(b[0] - a[0]);
        let to_i = |x: f64| x / cfg.resolution + cfg.origin_row as f64;
        let to_j = |y: f64| y / cfg.resolution + cfg.origin_col as f64;
        let i0 = to_i(a[0].min(b[0]) - half).floor().max(0.0);
        let i1 = to_i(a[0].max(b[0]) + half).ceil().min(cfg.height as f64 - 1.0);
        let j0 = to_j(a[1].min(b[1]) - half).floor().max(0.0);
        let j1 = to_j(a[1].max(b[1]) + half).ceil().min(cfg.width as f64 - 1.0);
        if i1 < i0 || j1 < j0 {
            continue;
        }
        for i in i0 as usize..=i1 as usize {
            for j in j0 as usize..=j1 as usize {
                let c = [cfg.row_coord(i), cfg.col_coord(j)];
                if segment_distance(c, a, b).0 <= half {
                    f(i, j, phi);
                }
            }
        }
    }
}

/// Rasterizes the map and every actor's history in the frame of `actor`.
pub fn render_scene(scene: &Scene, actor: usize, cfg: &RasterConfig) -> Result<SceneRaster> {
    cfg.validate()?;
    let frame = scene.actor_frame(actor)?;
    let local = scene.in_frame(&frame);
    let mut r = SceneRaster::blank(cfg);

    for lane in &local.map.lanes {
        let poly = buffer_polyline(&lane.centerline, lane.width / 2.0);
        fill_polygon(&poly, cfg, |i, j| r.blend(i, j, ROAD, 1.0));
    }
    for cw in &local.map.crosswalks {
        fill_polygon(cw, cfg, |i, j| r.blend(i, j, CROSSWALK, 1.0));
    }
    let half = 0.5 * cfg.resolution.max(0.5);
    for lane in &local.map.lanes {
        draw_line(&lane.centerline, half, cfg, |i, j, phi| {
            r.blend(i, j, direction_colour(phi), 1.0)
        });
    }
    let order = (0..local.actors.len())
        .filter(|&k| k != actor)
        .chain(std::iter::once(actor));
    for k in order {
        let a = &local.actors[k];
        let colour = if k == actor { TARGET_ACTOR } else { OTHER_ACTOR };
        let l = a.states.len();
        for (t, st) in a.states.iter().enumerate() {
            let alpha = (t + 1) as f64 / l as f64;
            let poly = Polygon::rectangle(st.position(), st.heading, a.length, a.width);
            fill_polygon(&poly, cfg, |i, j| r.blend(i, j, colour, alpha));
        }
    }
    Ok(r)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Display image of a raster, forward up, magnified `scale` times.
pub fn scene_image(r: &SceneRaster, scale: u32) -> RgbImage {
    let (h, w) = (r.height as u32, r.width as u32);
    RgbImage::from_fn(w * scale, h * scale, |x, y| {
        let i = (h - 1 - y / scale) as usize;
        let j = (w - 1 - x / scale) as usize;
        let p = r.pixel(i, j);
        Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
    })
}

/// Black-red-yellow-white ramp over `[0, 1]`.
pub fn heat(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0) * 3.0;
    [t.min(1.0), (t - 1.0).clamp(0.0, 1.0), (t - 2.0).clamp(0.0, 1.0)]
}

/// Heat map of a grid normalised by its maximum.
pub fn grid_image(g: &RasterGrid, scale: u32) -> RgbImage {
    let max = g.values.iter().copied().fold(0.0, f64::max);
    let mut r = SceneRaster {
        height: g.height,
        width: g.width,
        data: vec![0.0; 3 * g.values.len()],
    };
    let n = g.values.len();
    for (k, v) in g.values.iter().enumerate() {
        let c = heat(if max > 0.0 { v / max } else { 0.0 });
        for ch in 0..3 {
            r.data[ch * n + k] = c[ch];
        }
    }
    scene_image(&r, scale)
}

/// Marks trajectories on top of a scene image made by [`scene_image`].
pub fn draw_trajectories(
    img: &mut RgbImage,
    cfg: &RasterConfig,
    scale: u32,
    trajs: &[(Vec<Point>, [u8; 3])],
) {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let to_px = |p: Point| {
        let i = p[0] / cfg.resolution + cfg.origin_row as f64;
        let j = p[1] / cfg.resolution + cfg.origin_col as f64;
        // continuous pixel centre after the display flip
        (
            (w - 1.0 - j + 0.5) * scale as f64,
            (h - 1.0 - i + 0.5) * scale as f64,
        )
    };
    let mut plot = |x: f64, y: f64, c: [u8; 3]| {
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    };
    for (traj, colour) in trajs {
        let mut prev = to_px([0.0, 0.0]);
        for &p in traj {
            let cur = to_px(p);
            let steps = ((cur.0 - prev.0).abs().max((cur.1 - prev.1).abs()).ceil() as usize).max(1);
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                plot(prev.0 + t * (cur.0 - prev.0), prev.1 + t * (cur.1 - prev.1), *colour);
            }
            for dx in -1..=1 {
                for dy in -1..=1 {
                    plot(cur.0 + dx as f64, cur.1 + dy as f64, *colour);
                }
            }
            prev = cur;
        }
    }
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, Actor, ActorState, LaneGraph, Template};

    fn lone_actor() -> Scene {
        let st = ActorState {
            x: 0.0,
            y: 0.0,
            v: 0.0,
            a: 0.0,
            heading: 0.0,
            yaw_rate: 0.0,
            timestamp: 0.0,
        };
        Scene {
            template: Template::Straight,
            map: LaneGraph::default(),
            actors: vec![Actor {
                states: vec![st; 5],
                length: 4.5,
                width: 2.0,
            }],
            target: 0,
            future: vec![[0.0, 0.0]; 8],
        }
    }

    #[test]
    fn lone_actor_occupies_only_its_box() {
        let cfg = RasterConfig::desk_scale();
        let r = render_scene(&lone_actor(), 0, &cfg).unwrap();
        assert_eq!(r.pixel(8, 32), TARGET_ACTOR);
        for i in 0..cfg.height {
            for j in 0..cfg.width {
                let inside = cfg.row_coord(i).abs() <= 2.25 && cfg.col_coord(j).abs() <= 1.0;
                assert_eq!(r.pixel(i, j) != [0.0; 3], inside, "({i},{j})");
            }
        }
        assert!(render_scene(&lone_actor(), 1, &cfg).is_err());
    }

    #[test]
    fn lane_ahead_is_drawn_in_front() {
        let cfg = RasterConfig::desk_scale();
        let s = generate_scene(Template::Straight, 11);
        let r = render_scene(&s, 0, &cfg).unwrap();
        let ahead = (cfg.origin_row + 10..cfg.height)
            .any(|i| r.pixel(i, cfg.origin_col) == ROAD || r.pixel(i, cfg.origin_col)[1] > 0.5);
        assert!(ahead);
    }

    #[test]
    fn rendering_is_frame_invariant() {
        let cfg = RasterConfig::desk_scale();
        for seed in 0..5 {
            let s = generate_scene(Template::IntersectionUnprotectedLeft, seed);
            let f = s.actor_frame(0).unwrap();
            let moved = s.in_frame(&f);
            assert_eq!(
                render_scene(&s, 0, &cfg).unwrap(),
                render_scene(&moved, 0, &cfg).unwrap()
            );
        }
    }
}
