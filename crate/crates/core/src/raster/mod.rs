//! Actor-centred rasters: Gaussian occupancy grids for trajectory points,
//! their analytic gradients, and assembly of the critic's input planes.
//!
//! Axis convention: row index `i` runs along the actor's forward (x) axis,
//! column index `j` along its left (y) axis. Cell `(i, j)` sits at
//! `((i - h0) r, (j - w0) r)` in the actor frame. Images are flipped only
//! at export time (see [`render`]).

pub mod ops;
pub mod render;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterConfig {
    pub height: usize,
    pub width: usize,
    /// Metres per cell.
    pub resolution: f64,
    pub origin_row: usize,
    pub origin_col: usize,
    /// Standard deviation of the occupancy Gaussian, metres.
    pub sigma: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl RasterConfig {
    /// 60 m x 60 m at 0.2 m per cell, actor 10 m from the rear edge.
    pub fn full_size() -> Self {
        RasterConfig {
            height: 300,
            width: 300,
            resolution: 0.2,
            origin_row: 50,
            origin_col: 150,
            sigma: 2.0,
        }
    }

    /// 64 x 64 cells of 1 m: 56 m ahead, 8 m behind, 32 m to either side.
    pub fn desk_scale() -> Self {
        RasterConfig {
            height: 64,
            width: 64,
            resolution: 1.0,
            origin_row: 8,
            origin_col: 32,
            sigma: 2.0,
        }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("raster: {m}")));
        if self.height == 0 || self.width == 0 {
            return bad(format!("empty grid {}x{}", self.height, self.width));
        }
        if !(self.resolution.is_finite() && self.resolution > 0.0) {
            return bad(format!("resolution must be positive, got {}", self.resolution));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if self.origin_row >= self.height || self.origin_col >= self.width {
            return bad(format!(
                "origin ({}, {}) outside {}x{}",
                self.origin_row, self.origin_col, self.height, self.width
            ));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Actor-frame position of the centre of row `i` (forward axis).
    pub fn row_coord(&self, i: usize) -> f64 {
        (i as f64 - self.origin_row as f64) * self.resolution
    }

    /// Actor-frame position of the centre of column `j` (left axis).
    pub fn col_coord(&self, j: usize) -> f64 {
        (j as f64 - self.origin_col as f64) * self.resolution
    }

    /// Cell whose centre is nearest to `p`, if it lies on the grid.
    pub fn cell_of(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        let i = (p[0] / self.resolution).round() + self.origin_row as f64;
        let j = (p[1] / self.resolution).round() + self.origin_col as f64;
        if i >= 0.0 && j >= 0.0 && (i as usize) < self.height && (j as usize) < self.width {
            Some((i as usize, j as usize))
        } else {
            None
        }
    }

    fn norm_const(&self) -> f64 {
        1.0 / (2.0 * PI * self.sigma * self.sigma)
    }
}

/// Actor-frame vector from a point to a cell centre, metres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Displacement {
    pub dx: f64,
    pub dy: f64,
}

impl Displacement {
    pub fn norm(&self) -> f64 {
        self.dx.hypot(self.dy)
    }
}

pub fn cell_offset(cell: [usize; 2], point: [f64; 2], cfg: &RasterConfig) -> Result<Displacement> {
    let [i, j] = cell;
    if i >= cfg.height || j >= cfg.width {
        return Err(Error::Contract(format!(
            "cell ({i}, {j}) outside {}x{} grid",
            cfg.height, cfg.width
        )));
    }
    Ok(Displacement {
        dx: cfg.row_coord(i) - point[0],
        dy: cfg.col_coord(j) - point[1],
    })
}

/// One `H x W` density grid (units m^-2), row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterGrid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl RasterGrid {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    /// Integral of the density over the grid (`sum * r^2`).
    pub fn mass(&self, resolution: f64) -> f64 {
        self.values.iter().sum::<f64>() * resolution * resolution
    }

    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (k, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = k;
            }
        }
        (best / self.width, best % self.width)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.values.clone()).expect("grid shape")
    }
}

/// Occupancy grids of one trajectory, in point order.
#[derive(Clone, Debug, PartialEq)]
pub struct GridStack {
    pub grids: Vec<RasterGrid>,
}

impl GridStack {
    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    /// `[T, H, W]`.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = (self.grids[0].height, self.grids[0].width);
        let data = self.grids.iter().flat_map(|g| g.values.iter().copied()).collect();
        Tensor::new(vec![self.grids.len(), h, w], data).expect("stack shape")
    }
}

fn check_point(p: [f64; 2]) -> Result<()> {
    if p[0].is_finite() && p[1].is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("trajectory point {p:?}")))
    }
}

/// Per-axis pieces of the separable Gaussian at one point:
/// `G_ij = c * ex[i] * ey[j]` with offsets `dx[i]`, `dy[j]`.
pub(crate) struct Kernel {
    pub c: f64,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    pub ex: Vec<f64>,
    pub ey: Vec<f64>,
}

impl Kernel {
    pub fn new(p: [f64; 2], cfg: &RasterConfig) -> Self {
        let s2 = cfg.sigma * cfg.sigma;
        let dx: Vec<f64> = (0..cfg.height).map(|i| cfg.row_coord(i) - p[0]).collect();
        let dy: Vec<f64> = (0..cfg.width).map(|j| cfg.col_coord(j) - p[1]).collect();
        let ex = dx.iter().map(|d| (-d * d / (2.0 * s2)).exp()).collect();
        let ey = dy.iter().map(|d| (-d * d / (2.0 * s2)).exp()).collect();
        Kernel {
            c: cfg.norm_const(),
            dx,
            dy,
            ex,
            ey,
        }
    }

    pub fn write(&self, out: &mut [f64]) {
        let w = self.ey.len();
        for (i, &ex) in self.ex.iter().enumerate() {
            let a = self.c * ex;
            for (o, &ey) in out[i * w..(i + 1) * w].iter_mut().zip(&self.ey) {
                *o = a * ey;
            }
        }
    }

    /// `sum_ij up_ij dG_ij/dp`.
    pub fn vjp(&self, up: &[f64], s2: f64) -> [f64; 2] {
        let w = self.ey.len();
        let (mut gx, mut gy) = (0.0, 0.0);
        for (i, &ex) in self.ex.iter().enumerate() {
            if ex == 0.0 {
                continue;
            }
            let row = &up[i * w..(i + 1) * w];
            let (mut s0, mut s1) = (0.0, 0.0);
            for ((u, &ey), &dy) in row.iter().zip(&self.ey).zip(&self.dy) {
                let t = u * ey;
                s0 += t;
                s1 += t * dy;
            }
            gx += ex * self.dx[i] * s0;
            gy += ex * s1;
        }
        [self.c * gx / s2, self.c * gy / s2]
    }

    /// `out_ij = v . dG_ij/dp`.
    pub fn jvp(&self, v: [f64; 2], s2: f64, out: &mut [f64]) {
        let w = self.ey.len();
        for (i, &ex) in self.ex.iter().enumerate() {
            let a = self.c * ex / s2;
            let bx = v[0] * self.dx[i];
            for ((o, &ey), &dy) in out[i * w..(i + 1) * w]
                .iter_mut()
                .zip(&self.ey)
                .zip(&self.dy)
            {
                *o = a * ey * (bx + v[1] * dy);
            }
        }
    }

    /// `sum_ij up_ij (d^2 G_ij / dp^2) v`.
    pub fn hvp(&self, up: &[f64], v: [f64; 2], s2: f64) -> [f64; 2] {
        let w = self.ey.len();
        let s4 = s2 * s2;
        let (mut hx, mut hy) = (0.0, 0.0);
        for (i, &ex) in self.ex.iter().enumerate() {
            if ex == 0.0 {
                continue;
            }
            let dx = self.dx[i];
            let row = &up[i * w..(i + 1) * w];
            for ((u, &ey), &dy) in row.iter().zip(&self.ey).zip(&self.dy) {
                let g = u * ex * ey;
                let dv = dx * v[0] + dy * v[1];
                hx += g * (dx * dv / s4 - v[0] / s2);
                hy += g * (dy * dv / s4 - v[1] / s2);
            }
        }
        [self.c * hx, self.c * hy]
    }
}

pub fn rasterize_point(point: [f64; 2], cfg: &RasterConfig) -> Result<RasterGrid> {
    check_point(point)?;
    let mut values = vec![0.0; cfg.cells()];
    Kernel::new(point, cfg).write(&mut values);
    Ok(RasterGrid {
        height: cfg.height,
        width: cfg.width,
        values,
    })
}

/// Half-width (metres) beyond which every density falls below `1e-13`.
pub fn window_radius(cfg: &RasterConfig) -> f64 {
    let peak = cfg.norm_const();
    if peak <= 1e-13 {
        return 0.0;
    }
    cfg.sigma * (2.0 * (peak / 1e-13).ln()).sqrt()
}

/// Same grid as [`rasterize_point`], evaluating only cells inside the
/// bounding box of [`window_radius`]; other cells are zero.
pub fn rasterize_point_windowed(point: [f64; 2], cfg: &RasterConfig) -> Result<RasterGrid> {
    check_point(point)?;
    let rad = window_radius(cfg);
    let span = |c: f64, origin: usize, n: usize| -> (usize, usize) {
        let lo = ((c - rad) / cfg.resolution + origin as f64).floor().max(0.0);
        let hi = ((c + rad) / cfg.resolution + origin as f64).ceil() + 1.0;
        let hi = hi.clamp(0.0, n as f64);
        (lo.min(n as f64) as usize, hi as usize)
    };
    let (i0, i1) = span(point[0], cfg.origin_row, cfg.height);
    let (j0, j1) = span(point[1], cfg.origin_col, cfg.width);
    let mut values = vec![0.0; cfg.cells()];
    let s2 = cfg.sigma * cfg.sigma;
    let c = cfg.norm_const();
    for i in i0..i1 {
        let dx = cfg.row_coord(i) - point[0];
        let ex = c * (-dx * dx / (2.0 * s2)).exp();
        for j in j0..j1 {
            let dy = cfg.col_coord(j) - point[1];
            values[i * cfg.width + j] = ex * (-dy * dy / (2.0 * s2)).exp();
        }
    }
    Ok(RasterGrid {
        height: cfg.height,
        width: cfg.width,
        values,
    })
}

/// Derivative of `sum_ij upstream_ij G_ij(point)` with respect to the point.
///
/// Each cell contributes `upstream_ij * G_ij * Delta_ij / sigma^2`; the
/// gradient points from the point towards cells with positive upstream.
pub fn rasterize_point_backward(
    point: [f64; 2],
    cfg: &RasterConfig,
    upstream: &[f64],
) -> Result<[f64; 2]> {
    check_point(point)?;
    if upstream.len() != cfg.cells() {
        return Err(Error::shape(
            "rasterize_point_backward",
            format!("upstream has {} values, grid has {}", upstream.len(), cfg.cells()),
        ));
    }
    if upstream.iter().any(|u| !u.is_finite()) {
        return Err(Error::NonFinite("rasterizer upstream gradient".into()));
    }
    Ok(Kernel::new(point, cfg).vjp(upstream, cfg.sigma * cfg.sigma))
}

/// `1 / (sqrt(2 pi e) sigma^2)`, the textbook bound quoted for the
/// gradient field.
///
/// This is the peak slope of a one-dimensional unit Gaussian scaled by
/// `1/sigma`; for the two-dimensional density actually rasterized the peak
/// is [`peak_gradient_norm`].
pub fn max_gradient_norm(cfg: &RasterConfig) -> f64 {
    1.0 / ((2.0 * PI * std::f64::consts::E).sqrt() * cfg.sigma * cfg.sigma)
}

/// Largest `||dG/dp||` of the unit-mass 2-D density, attained at
/// `||Delta|| = sigma`: `1 / (2 pi sqrt(e) sigma^3)`.
pub fn peak_gradient_norm(sigma: f64) -> f64 {
    1.0 / (2.0 * PI * std::f64::consts::E.sqrt() * sigma.powi(3))
}

/// `||dG_ij/dp||` for every cell.
pub fn gradient_norm_field(point: [f64; 2], cfg: &RasterConfig) -> Result<RasterGrid> {
    let mut g = rasterize_point(point, cfg)?;
    let s2 = cfg.sigma * cfg.sigma;
    for i in 0..cfg.height {
        for j in 0..cfg.width {
            let d = Displacement {
                dx: cfg.row_coord(i) - point[0],
                dy: cfg.col_coord(j) - point[1],
            };
            g.values[i * cfg.width + j] *= d.norm() / s2;
        }
    }
    Ok(g)
}

pub fn rasterize_trajectory(traj: &[[f64; 2]], cfg: &RasterConfig) -> Result<GridStack> {
    if traj.is_empty() {
        return Err(Error::Contract("cannot rasterize an empty trajectory".into()));
    }
    let grids = traj
        .iter()
        .map(|&p| rasterize_point(p, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(GridStack { grids })
}

/// Critic input planes `[C + T + F, H, W]`: the scene channels, then one
/// occupancy grid per trajectory point in time order, then one constant
/// plane per state feature.
pub fn stack_discriminator_input(
    scene: &Tensor,
    grids: &Tensor,
    states: &[f64],
) -> Result<Tensor> {
    let (ss, gs) = (scene.shape(), grids.shape());
    if ss.len() != 3 || gs.len() != 3 || ss[1..] != gs[1..] {
        return Err(Error::shape(
            "stack_discriminator_input",
            format!("scene {ss:?} and grids {gs:?} must be [C,H,W] and [T,H,W] of equal H,W"),
        ));
    }
    let plane = ss[1] * ss[2];
    let mut data = Vec::with_capacity((ss[0] + gs[0] + states.len()) * plane);
    data.extend_from_slice(scene.data());
    data.extend_from_slice(grids.data());
    for &s in states {
        data.extend(std::iter::repeat_n(s, plane));
    }
    Tensor::new(vec![ss[0] + gs[0] + states.len(), ss[1], ss[2]], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn big() -> RasterConfig {
        RasterConfig::full_size()
    }

    #[test]
    fn cell_offsets_follow_the_axis_convention() {
        let p = [0.0, 0.0];
        let d = cell_offset([50, 150], p, &big()).unwrap();
        assert_eq!((d.dx, d.dy), (0.0, 0.0));
        let d = cell_offset([100, 150], p, &big()).unwrap();
        assert!((d.dx - 10.0).abs() < 1e-12 && d.dy == 0.0);
        let d = cell_offset([50, 140], p, &big()).unwrap();
        assert!(d.dx == 0.0 && (d.dy + 2.0).abs() < 1e-12);
        assert!(matches!(
            cell_offset([300, 0], p, &big()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn density_at_cell_centre() {
        let g = rasterize_point([0.0, 0.0], &big()).unwrap();
        let expect = 1.0 / (2.0 * PI * 4.0);
        assert!((g.get(50, 150) - expect).abs() < 1e-15);
        assert!((expect - 0.0397887).abs() < 1e-7);
        assert_eq!(g.argmax(), (50, 150));
    }

    #[test]
    fn entries_match_the_direct_formula() {
        let cfg = RasterConfig::desk_scale();
        let p = [3.3, -1.7];
        let g = rasterize_point(p, &cfg).unwrap();
        for (i, j) in [(0, 0), (11, 30), (20, 40), (63, 63)] {
            let d = cell_offset([i, j], p, &cfg).unwrap();
            let direct = (-(d.dx * d.dx + d.dy * d.dy) / 8.0).exp() / (8.0 * PI);
            assert!((g.get(i, j) - direct).abs() <= 1e-12 * direct);
        }
    }

    #[test]
    fn far_points_underflow_cleanly() {
        let g = rasterize_point([1e6, 1e6], &big()).unwrap();
        assert!(g.values.iter().all(|v| v.is_finite() && *v < 1e-300));
        assert!(rasterize_point([f64::NAN, 0.0], &big()).is_err());
    }

    #[test]
    fn windowed_path_agrees() {
        for sigma in [1.4, 2.0, 3.0] {
            for cfg in [big().with_sigma(sigma), RasterConfig::desk_scale().with_sigma(sigma)] {
                for p in [[0.0, 0.0], [7.3, -4.1], [-30.0, 12.0], [55.0, 31.0]] {
                    let a = rasterize_point(p, &cfg).unwrap();
                    let b = rasterize_point_windowed(p, &cfg).unwrap();
                    let err = a
                        .values
                        .iter()
                        .zip(&b.values)
                        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
                    assert!(err < 1e-12, "sigma {sigma} p {p:?}: {err}");
                }
            }
        }
    }

    #[test]
    fn backward_vanishes_at_the_centre() {
        let cfg = big();
        let mut up = vec![0.0; cfg.cells()];
        up[50 * 300 + 150] = 1.0;
        let g = rasterize_point_backward([0.0, 0.0], &cfg, &up).unwrap();
        assert_eq!(g, [0.0, 0.0]);
        assert!(rasterize_point_backward([0.0, 0.0], &cfg, &up[1..]).is_err());
    }

    #[test]
    fn spec_bound_constants() {
        // 1/(sqrt(2 pi e) * 4) = 0.0604927...
        assert!((max_gradient_norm(&RasterConfig::desk_scale()) - 0.0604927).abs() < 1e-7);
        let c1 = RasterConfig::desk_scale().with_sigma(1.0);
        assert!((max_gradient_norm(&c1) - 0.241971).abs() < 1e-6);
    }

    #[test]
    fn trajectory_stack_keeps_order() {
        let cfg = RasterConfig::desk_scale();
        assert!(rasterize_trajectory(&[], &cfg).is_err());
        let traj: Vec<[f64; 2]> = (1..=8).map(|k| [k as f64 * 4.0, 0.3]).collect();
        let s = rasterize_trajectory(&traj, &cfg).unwrap();
        assert_eq!(s.len(), 8);
        let rows: Vec<usize> = s.grids.iter().map(|g| g.argmax().0).collect();
        assert!(rows.windows(2).all(|w| w[1] > w[0]), "{rows:?}");
        let one = rasterize_trajectory(&traj[..1], &cfg).unwrap();
        assert_eq!(one.grids[0], rasterize_point(traj[0], &cfg).unwrap());
    }

    #[test]
    fn stacked_channel_layout() {
        let scene = Tensor::from_fn(&[3, 4, 5], |i| i as f64);
        let grids = Tensor::zeros(&[8, 4, 5]);
        let states: Vec<f64> = (0..30).map(|k| k as f64 * 0.1).collect();
        let x = stack_discriminator_input(&scene, &grids, &states).unwrap();
        assert_eq!(x.shape(), &[41, 4, 5]);
        assert_eq!(&x.data()[..60], scene.data());
        assert!(x.data()[60..60 + 160].iter().all(|v| *v == 0.0));
        assert!(x.data()[220..240].iter().all(|v| *v == 0.0));
        assert!(x.data()[240..260].iter().all(|v| *v == 0.1));
        let bad = Tensor::zeros(&[8, 4, 6]);
        assert!(stack_discriminator_input(&scene, &bad, &states).is_err());
    }
}
