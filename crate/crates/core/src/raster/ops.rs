//! Graph operations for batched trajectory rasterization.
//!
//! `Rasterize` maps points `[N, T, 2]` to grids `[N, T, H, W]`. Its backward
//! pass is `PointVjp`, whose own derivatives are `PointJvp` (w.r.t. the
//! upstream grids) and `PointHvp` (w.r.t. the points), so the penalty term
//! can be differentiated through the rasterizer a second time.

use std::sync::Arc;

use super::{Kernel, RasterConfig};
use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Graph, Tensor, Var};

fn points_shape(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, k, 2] => Ok((n, k)),
        ref s => Err(Error::shape(op, format!("points must be [N,T,2], got {s:?}"))),
    }
}

fn check_grids(op: &'static str, t: &Tensor, n: usize, k: usize, cfg: &RasterConfig) -> Result<()> {
    if t.shape() != [n, k, cfg.height, cfg.width] {
        return Err(Error::shape(
            op,
            format!(
                "expected [{n},{k},{},{}], got {:?}",
                cfg.height,
                cfg.width,
                t.shape()
            ),
        ));
    }
    Ok(())
}

fn check_points_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{op}: trajectory coordinates")))
    }
}

fn point(t: &Tensor, idx: usize) -> [f64; 2] {
    [t.data()[2 * idx], t.data()[2 * idx + 1]]
}

#[derive(Debug)]
pub struct Rasterize {
    pub cfg: RasterConfig,
}

#[derive(Debug)]
struct PointVjp {
    cfg: RasterConfig,
}

#[derive(Debug)]
struct PointJvp {
    cfg: RasterConfig,
}

#[derive(Debug)]
struct PointHvp {
    cfg: RasterConfig,
}

impl CustomOp for Rasterize {
    fn name(&self) -> &'static str {
        "rasterize"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let p = inputs[0];
        let (n, k) = points_shape("rasterize", p)?;
        check_points_finite("rasterize", p)?;
        let cells = self.cfg.cells();
        let mut out = vec![0.0; n * k * cells];
        for (idx, chunk) in out.chunks_mut(cells).enumerate() {
            Kernel::new(point(p, idx), &self.cfg).write(chunk);
        }
        Tensor::new(vec![n, k, self.cfg.height, self.cfg.width], out)
    }

    fn backward(
        &self,
        g: &mut Graph,
        inputs: &[Var],
        _output: Var,
        grad: Var,
        _needs: &[bool],
    ) -> Result<Vec<Option<Var>>> {
        let op = Arc::new(PointVjp { cfg: self.cfg });
        Ok(vec![Some(g.custom(op, &[inputs[0], grad])?)])
    }
}

impl CustomOp for PointVjp {
    fn name(&self) -> &'static str {
        "rasterize_vjp"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (p, up) = (inputs[0], inputs[1]);
        let (n, k) = points_shape("rasterize_vjp", p)?;
        check_grids("rasterize_vjp", up, n, k, &self.cfg)?;
        let cells = self.cfg.cells();
        let s2 = self.cfg.sigma * self.cfg.sigma;
        let mut out = Vec::with_capacity(2 * n * k);
        for idx in 0..n * k {
            let g = Kernel::new(point(p, idx), &self.cfg)
                .vjp(&up.data()[idx * cells..(idx + 1) * cells], s2);
            out.extend_from_slice(&g);
        }
        Tensor::new(vec![n, k, 2], out)
    }

    fn backward(
        &self,
        g: &mut Graph,
        inputs: &[Var],
        _output: Var,
        grad: Var,
        needs: &[bool],
    ) -> Result<Vec<Option<Var>>> {
        let (p, up) = (inputs[0], inputs[1]);
        let dp = if needs[0] {
            Some(g.custom(Arc::new(PointHvp { cfg: self.cfg }), &[p, up, grad])?)
        } else {
            None
        };
        let dup = if needs[1] {
            Some(g.custom(Arc::new(PointJvp { cfg: self.cfg }), &[p, grad])?)
        } else {
            None
        };
        Ok(vec![dp, dup])
    }
}

impl CustomOp for PointJvp {
    fn name(&self) -> &'static str {
        "rasterize_jvp"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (p, v) = (inputs[0], inputs[1]);
        let (n, k) = points_shape("rasterize_jvp", p)?;
        if v.shape() != p.shape() {
            return Err(Error::shape(
                "rasterize_jvp",
                format!("tangent {:?} vs points {:?}", v.shape(), p.shape()),
            ));
        }
        let cells = self.cfg.cells();
        let s2 = self.cfg.sigma * self.cfg.sigma;
        let mut out = vec![0.0; n * k * cells];
        for (idx, chunk) in out.chunks_mut(cells).enumerate() {
            Kernel::new(point(p, idx), &self.cfg).jvp(point(v, idx), s2, chunk);
        }
        Tensor::new(vec![n, k, self.cfg.height, self.cfg.width], out)
    }

    fn backward(
        &self,
        g: &mut Graph,
        inputs: &[Var],
        _output: Var,
        grad: Var,
        needs: &[bool],
    ) -> Result<Vec<Option<Var>>> {
        let (p, v) = (inputs[0], inputs[1]);
        // out = J v is linear in v with adjoint J^T; its derivative in p
        // contracted with `grad` is the Hessian form again.
        let dp = if needs[0] {
            Some(g.custom(Arc::new(PointHvp { cfg: self.cfg }), &[p, grad, v])?)
        } else {
            None
        };
        let dv = if needs[1] {
            Some(g.custom(Arc::new(PointVjp { cfg: self.cfg }), &[p, grad])?)
        } else {
            None
        };
        Ok(vec![dp, dv])
    }
}

impl CustomOp for PointHvp {
    fn name(&self) -> &'static str {
        "rasterize_hvp"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (p, up, v) = (inputs[0], inputs[1], inputs[2]);
        let (n, k) = points_shape("rasterize_hvp", p)?;
        check_grids("rasterize_hvp", up, n, k, &self.cfg)?;
        if v.shape() != p.shape() {
            return Err(Error::shape(
                "rasterize_hvp",
                format!("direction {:?} vs points {:?}", v.shape(), p.shape()),
            ));
        }
        let cells = self.cfg.cells();
        let s2 = self.cfg.sigma * self.cfg.sigma;
        let mut out = Vec::with_capacity(2 * n * k);
        for idx in 0..n * k {
            let h = Kernel::new(point(p, idx), &self.cfg).hvp(
                &up.data()[idx * cells..(idx + 1) * cells],
                point(v, idx),
                s2,
            );
            out.extend_from_slice(&h);
        }
        Tensor::new(vec![n, k, 2], out)
    }

    fn backward(
        &self,
        _g: &mut Graph,
        _inputs: &[Var],
        _output: Var,
        _grad: Var,
        _needs: &[bool],
    ) -> Result<Vec<Option<Var>>> {
        Err(Error::Unsupported(
            "third derivatives of the rasterizer are not implemented".into(),
        ))
    }
}

/// Rasterizes `points: [N, T, 2]` into `[N, T, H, W]` density grids.
pub fn rasterize(g: &mut Graph, points: Var, cfg: &RasterConfig) -> Result<Var> {
    g.custom(Arc::new(Rasterize { cfg: *cfg }), &[points])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check, GradcheckOptions};

    fn cfg() -> RasterConfig {
        RasterConfig {
            height: 12,
            width: 10,
            resolution: 1.0,
            origin_row: 3,
            origin_col: 5,
            sigma: 1.4,
        }
    }

    fn weights(n: usize) -> Tensor {
        Tensor::from_fn(&[n], |i| ((i * 37 % 11) as f64 - 5.0) / 5.0)
    }

    fn pts() -> Tensor {
        Tensor::new(vec![2, 2, 2], vec![0.3, -0.7, 4.1, 1.2, -2.5, 3.3, 9.5, -6.0]).unwrap()
    }

    #[test]
    fn forward_matches_single_point_raster() {
        let c = cfg();
        let mut g = Graph::new();
        let p = g.input(pts());
        let r = rasterize(&mut g, p, &c).unwrap();
        let out = g.value(r);
        let one = super::super::rasterize_point([4.1, 1.2], &c).unwrap();
        assert_eq!(&out.data()[c.cells()..2 * c.cells()], &one.values[..]);
    }

    #[test]
    fn first_and_second_order_gradients() {
        let c = cfg();
        let w = weights(4 * c.cells()).reshape(&[2, 2, 12, 10]).unwrap();
        let opts = GradcheckOptions::default();
        // first order through the rasterizer
        let e = check(
            "rasterize",
            |g, v| {
                let r = rasterize(g, v[0], &c)?;
                let wv = g.constant(w.clone());
                let m = g.mul(r, wv)?;
                g.sum_all(m)
            },
            &[pts()],
            &opts,
        )
        .unwrap();
        assert!(e.passed, "{e:?}");
        // squared gradient norm, differentiated w.r.t. points and weights
        let e = check(
            "rasterize second order",
            |g, v| {
                let r = rasterize(g, v[0], &c)?;
                let m = g.mul(r, v[1])?;
                let m = g.tanh(m);
                let s = g.sum_all(m)?;
                let dp = g.grad(s, &[v[0]])?[0];
                let sq = g.square(dp);
                g.sum_all(sq)
            },
            &[pts(), w.clone()],
            &GradcheckOptions {
                max_coords: Some(60),
                ..opts
            },
        )
        .unwrap();
        assert!(e.passed, "{e:?}");
    }

    #[test]
    fn non_finite_points_are_rejected() {
        let mut g = Graph::new();
        let p = g.input(Tensor::new(vec![1, 1, 2], vec![f64::INFINITY, 0.0]).unwrap());
        assert!(rasterize(&mut g, p, &cfg()).is_err());
    }
}
