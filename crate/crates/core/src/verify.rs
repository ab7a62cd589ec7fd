//! Finite-difference verification of every differentiable piece: the
//! rasterizer (first and second order), the layer ops, and the critics
//! end to end.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::models::{Discriminator, Generator, ModelConfig, Variant, STATE_FEATURES};
use crate::raster::ops::Rasterize;
use crate::raster::RasterConfig;
use crate::tensor::gradcheck::{check, relative_error, GradcheckEntry, GradcheckOptions, GradcheckReport};
use crate::tensor::{CustomOp, Graph, ParameterSet, Tensor, Var};
use crate::training::{gradient_penalty, variety_l2};

pub const RASTER_TOL: f64 = 1e-6;
pub const LAYER_TOL: f64 = 1e-6;
pub const END_TO_END_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Negates the rasterizer's backward pass, to show the suite catches it.
    pub inject_sign_flip: bool,
}

/// Rasterizer whose backward has the wrong sign.
#[derive(Debug)]
struct FlippedRasterize(Rasterize);

impl CustomOp for FlippedRasterize {
    fn name(&self) -> &'static str {
        "rasterize_sign_flipped"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        self.0.forward(inputs)
    }

    fn backward(
        &self,
        g: &mut Graph,
        inputs: &[Var],
        output: Var,
        grad: Var,
        needs: &[bool],
    ) -> Result<Vec<Option<Var>>> {
        let d = self.0.backward(g, inputs, output, grad, needs)?;
        Ok(d.into_iter().map(|v| v.map(|v| g.neg(v))).collect())
    }
}

fn rasterizer(cfg: &RasterConfig, fault: bool) -> Arc<dyn CustomOp> {
    let op = Rasterize { cfg: *cfg };
    if fault {
        Arc::new(FlippedRasterize(op))
    } else {
        Arc::new(op)
    }
}

fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

pub trait Parameterized: Clone {
    fn params(&self) -> &ParameterSet;
    fn params_mut(&mut self) -> &mut ParameterSet;
}

impl Parameterized for Discriminator {
    fn params(&self) -> &ParameterSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }
}

impl Parameterized for Generator {
    fn params(&self) -> &ParameterSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }
}

/// Central differences over the named parameter tensors of `model`,
/// against [`Graph::param_grads`]. `build` must produce a one-element
/// output.
pub fn check_params<M, F>(
    name: &str,
    build: F,
    model: &M,
    names: &[&str],
    opts: &GradcheckOptions,
) -> Result<GradcheckEntry>
where
    M: Parameterized,
    F: Fn(&mut Graph, &M) -> Result<Var>,
{
    let params = model.params();
    let mut g = Graph::new();
    let out = build(&mut g, model)?;
    let f0 = g.value(out).item();
    let grads = g.param_grads(out, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = model.clone();
    let eval = |m: &M| -> Result<f64> {
        let mut g = Graph::new();
        let o = build(&mut g, m)?;
        Ok(g.value(o).item())
    };
    let (mut max_err, mut checked, mut excluded) = (0.0f64, 0, 0);
    for &pname in names {
        let base = params
            .get(pname)
            .ok_or_else(|| crate::Error::Contract(format!("no parameter `{pname}`")))?
            .clone();
        let analytic = grads
            .get(pname)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(base.shape()));
        let n = base.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut c = rand::seq::index::sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let mut t = base.clone();
            t.data_mut()[i] += opts.step;
            work.params_mut().set(pname, t.clone())?;
            let fp = eval(&work)?;
            t.data_mut()[i] -= 2.0 * opts.step;
            work.params_mut().set(pname, t)?;
            let fm = eval(&work)?;
            work.params_mut().set(pname, base.clone())?;
            let (right, left) = ((fp - f0) / opts.step, (f0 - fm) / opts.step);
            if (right - left).abs() > 1e-2 * right.abs().max(left.abs()).max(1.0) {
                excluded += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.step);
            max_err = max_err.max(relative_error(analytic.data()[i], numeric, opts.floor));
            checked += 1;
        }
    }
    Ok(GradcheckEntry {
        name: name.to_string(),
        max_rel_err: max_err,
        checked,
        excluded,
        tol: opts.tol,
        passed: max_err < opts.tol && max_err.is_finite(),
    })
}

/// A 16x16 configuration small enough for exhaustive end-to-end checks.
pub fn small_model(variant: Variant) -> ModelConfig {
    let mut m = ModelConfig::default().with_variant(variant);
    m.raster = RasterConfig {
        height: 16,
        width: 16,
        resolution: 2.0,
        origin_row: 3,
        origin_col: 8,
        sigma: 2.0,
    };
    m.generator.conv_channels = vec![4, 4];
    m.discriminator.conv_channels = vec![4, 4];
    m.discriminator.embed_width = 8;
    m
}

/// Critic inputs for `n` examples; the trajectory runs off the raster
/// after a few points.
pub fn critic_inputs(cfg: &ModelConfig, n: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor, Tensor) {
    let rc = &cfg.raster;
    let t = cfg.generator.horizon;
    let scene = Tensor::from_fn(&[n, 3, rc.height, rc.width], |_| rng.random::<f64>());
    let states = random(&[n, STATE_FEATURES], 1.0, rng);
    let reach = (rc.height - rc.origin_row) as f64 * rc.resolution;
    let traj = Tensor::from_fn(&[n, t, 2], |i| {
        let step = (i / 2 % t) as f64 + 1.0;
        if i % 2 == 0 {
            step * reach / (t as f64 - 2.0) + rng.random_range(-0.5..0.5)
        } else {
            rng.random_range(-3.0..3.0)
        }
    });
    (scene, states, traj)
}

pub fn gradcheck_suite(opts: &SuiteOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradcheckReport::default();
    let base = GradcheckOptions {
        seed: opts.seed,
        ..GradcheckOptions::default()
    };
    let raster_opts = GradcheckOptions {
        tol: RASTER_TOL,
        ..base
    };

    // rasterizer on the desk-scale grid, some points near or past the edge
    for sigma in [1.4, 2.0, 3.0] {
        let rc = RasterConfig::desk_scale().with_sigma(sigma);
        let op = rasterizer(&rc, opts.inject_sign_flip);
        let pts = Tensor::from_fn(&[1, 6, 2], |i| {
            if i % 2 == 0 {
                rng.random_range(-12.0..60.0)
            } else {
                rng.random_range(-34.0..34.0)
            }
        });
        let w = random(&[1, 6, rc.height, rc.width], 1.0, &mut rng);
        report.push(check(
            &format!("rasterize sigma={sigma}"),
            |g, v| {
                let r = g.custom(op.clone(), &[v[0]])?;
                let wv = g.constant(w.clone());
                let m = g.mul(r, wv)?;
                g.sum_all(m)
            },
            &[pts],
            &raster_opts,
        )?);
    }
    {
        let rc = RasterConfig {
            height: 12,
            width: 10,
            resolution: 1.0,
            origin_row: 3,
            origin_col: 5,
            sigma: 1.4,
        };
        let op = rasterizer(&rc, opts.inject_sign_flip);
        let pts = Tensor::from_fn(&[1, 3, 2], |i| rng.random_range(-3.0..4.0) + (i % 2) as f64);
        let w = random(&[1, 3, 12, 10], 1.0, &mut rng);
        report.push(check(
            "rasterize second order",
            |g, v| {
                let r = g.custom(op.clone(), &[v[0]])?;
                let m = g.mul(r, v[1])?;
                let m = g.tanh(m);
                let s = g.sum_all(m)?;
                let dp = g.grad(s, &[v[0]])?[0];
                let sq = g.square(dp);
                g.sum_all(sq)
            },
            &[pts, w],
            &GradcheckOptions {
                max_coords: Some(60),
                ..raster_opts
            },
        )?);
    }

    let layer = GradcheckOptions {
        tol: LAYER_TOL,
        ..base
    };
    let mut push_layer = |name: &str,
                          f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>,
                          inputs: Vec<Tensor>,
                          rng: &mut ChaCha8Rng|
     -> Result<()> {
        let probe = {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
            let o = f(&mut g, &vars)?;
            g.shape(o).to_vec()
        };
        let w = random(&probe, 1.0, rng);
        report.push(check(
            name,
            |g, v| {
                let o = f(g, v)?;
                let wv = g.constant(w.clone());
                let m = g.mul(o, wv)?;
                g.sum_all(m)
            },
            &inputs,
            &layer,
        )?);
        Ok(())
    };
    push_layer(
        "linear",
        &|g, v| g.linear(v[0], v[1], v[2]),
        vec![random(&[3, 5], 1.0, &mut rng), random(&[4, 5], 1.0, &mut rng), random(&[4], 1.0, &mut rng)],
        &mut rng,
    )?;
    push_layer(
        "matmul transposed",
        &|g, v| g.matmul(v[0], v[1], true, true),
        vec![random(&[4, 3], 1.0, &mut rng), random(&[2, 4], 1.0, &mut rng)],
        &mut rng,
    )?;
    push_layer(
        "conv2d stride 2 pad 1",
        &|g, v| g.conv2d(v[0], v[1], 2, 1),
        vec![random(&[2, 3, 8, 8], 1.0, &mut rng), random(&[4, 3, 4, 4], 1.0, &mut rng)],
        &mut rng,
    )?;
    push_layer(
        "conv2d stride 1 pad 0",
        &|g, v| g.conv2d(v[0], v[1], 1, 0),
        vec![random(&[1, 2, 5, 5], 1.0, &mut rng), random(&[3, 2, 3, 3], 1.0, &mut rng)],
        &mut rng,
    )?;
    push_layer(
        "channel bias + global average pool",
        &|g, v| {
            let y = g.add_channel_bias(v[0], v[1])?;
            g.global_avg_pool(y)
        },
        vec![random(&[2, 3, 4, 4], 1.0, &mut rng), random(&[3], 1.0, &mut rng)],
        &mut rng,
    )?;
    push_layer(
        "leaky relu",
        &|g, v| Ok(g.leaky_relu(v[0], 0.2)),
        vec![random(&[20], 1.0, &mut rng)],
        &mut rng,
    )?;
    push_layer(
        "tanh, sqrt, square, pow",
        &|g, v| {
            let a = g.tanh(v[0]);
            let b = g.square(a);
            let b = g.add_scalar(b, 0.5);
            let c = g.sqrt(b);
            Ok(g.pow(c, 1.5))
        },
        vec![random(&[10], 2.0, &mut rng)],
        &mut rng,
    )?;
    push_layer(
        "concat, slice, pad",
        &|g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            let s = g.slice(c, 1, 1, 3)?;
            g.pad(s, 1, 2, 6)
        },
        vec![random(&[2, 2, 3], 1.0, &mut rng), random(&[2, 3, 3], 1.0, &mut rng)],
        &mut rng,
    )?;
    push_layer(
        "broadcast, reduce_sum, reshape",
        &|g, v| {
            let b = g.broadcast(v[0], &[3, 4, 2])?;
            let r = g.reduce_sum(b, &[0, 2])?;
            g.reshape(r, &[2, 2])
        },
        vec![random(&[3, 1, 2], 1.0, &mut rng)],
        &mut rng,
    )?;
    push_layer(
        "select_max, max_along",
        &|g, v| {
            let s = g.select_max(v[0], v[0], 1)?;
            let m = g.max_along(v[1], 1)?;
            let m = g.reshape(m, &[6])?;
            let s = g.reshape(s, &[3])?;
            g.concat(&[s, m], 0)
        },
        vec![random(&[3, 4], 1.0, &mut rng), random(&[2, 5, 3], 1.0, &mut rng)],
        &mut rng,
    )?;
    push_layer(
        "variety loss",
        &|g, v| variety_l2(g, v[0], v[1]),
        vec![random(&[2, 3, 4, 2], 2.0, &mut rng), random(&[2, 4, 2], 2.0, &mut rng)],
        &mut rng,
    )?;

    let e2e = GradcheckOptions {
        tol: END_TO_END_TOL,
        ..base
    };
    for variant in Variant::ALL {
        let cfg = small_model(variant);
        let disc = Discriminator::new(&cfg, opts.seed.wrapping_add(17))?;
        let (scene, states, traj) = critic_inputs(&cfg, 2, &mut rng);
        report.push(check(
            &format!("critic {} w.r.t. trajectory", variant.name()),
            |g, v| {
                let s = g.constant(scene.clone());
                let st = g.constant(states.clone());
                let out = disc.score(g, s, st, v[0])?;
                g.sum_all(out)
            },
            &[traj.clone()],
            &e2e,
        )?);
        let fake = critic_inputs(&cfg, 2, &mut rng).2;
        let eps = [0.3, 0.8];
        let names: Vec<String> = disc.params.names().map(str::to_string).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        report.push(check_params(
            &format!("gradient penalty {} w.r.t. critic weights", variant.name()),
            |g, d: &Discriminator| {
                let s = g.constant(scene.clone());
                let st = g.constant(states.clone());
                let (gp, _) = gradient_penalty(g, |g, x| d.score(g, s, st, x), &traj, &fake, &eps)?;
                g.sum_all(gp)
            },
            &disc,
            &names,
            &GradcheckOptions {
                max_coords: Some(6),
                ..e2e
            },
        )?);
    }
    Ok(report)
}
