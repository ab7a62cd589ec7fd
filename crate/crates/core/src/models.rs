//! Trajectory generator and critic variants.
//!
//! Shapes, for a batch of `N` examples with horizon `T`:
//!
//! * scene rasters `[N, 3, H, W]`
//! * target state history `[N, F]`, `F = 5 * 6`, see [`state_features`]
//! * noise `[N, d]`
//! * trajectories `[N, T, 2]`, actor frame, metres
//!
//! The `sc` critic stacks the scene planes, one occupancy grid per
//! trajectory point, and one constant plane per state feature (in that
//! order) and scores them with a fully convolutional network. `one_channel`
//! collapses the occupancy grids with an elementwise max first. `no_scene`
//! and `concat_scene` embed the flattened trajectory with a dense layer.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::ops::rasterize;
use crate::raster::RasterConfig;
use crate::scene::{Scene, FUTURE_DT, FUTURE_LEN, HISTORY_LEN, STATE_DIM};
use crate::tensor::{Graph, ParameterSet, Tensor, Var};

pub const LEAK: f64 = 0.2;

/// Metres (and metres per second) per unit of the normalised position and
/// speed features.
pub const STATE_SCALE: f64 = 10.0;

/// Normalised target history in its current frame, oldest state first:
/// `x/10, y/10, v/10, a/3, heading, yaw_rate` per state.
pub fn state_features(scene: &Scene) -> Vec<f64> {
    scene
        .target_state_features()
        .chunks(STATE_DIM)
        .flat_map(|s| {
            [
                s[0] / STATE_SCALE,
                s[1] / STATE_SCALE,
                s[2] / STATE_SCALE,
                s[3] / 3.0,
                s[4],
                s[5],
            ]
        })
        .collect()
}

/// What the generator's decoder output is added to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prior {
    /// The decoder emits the trajectory directly.
    None,
    /// The decoder emits offsets from driving straight ahead at the
    /// current speed.
    #[default]
    ConstantVelocity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub noise_dim: usize,
    /// Output channels of the strided 4x4 conv blocks of the scene encoder.
    pub conv_channels: Vec<usize>,
    pub state_width: usize,
    pub hidden: usize,
    pub horizon: usize,
    /// The decoder's raw outputs are multiplied by this many metres.
    pub output_scale: f64,
    pub prior: Prior,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            noise_dim: 16,
            conv_channels: vec![8, 16, 32, 32],
            state_width: 32,
            hidden: 128,
            horizon: FUTURE_LEN,
            output_scale: 10.0,
            prior: Prior::ConstantVelocity,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Sc,
    ConcatScene,
    NoScene,
    OneChannel,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Sc,
        Variant::ConcatScene,
        Variant::NoScene,
        Variant::OneChannel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sc => "sc",
            Variant::ConcatScene => "concat_scene",
            Variant::NoScene => "no_scene",
            Variant::OneChannel => "one_channel",
        }
    }

    /// Whether the critic sees trajectories as occupancy grids.
    pub fn raster_space(self) -> bool {
        matches!(self, Variant::Sc | Variant::OneChannel)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}` (expected sc, concat_scene, no_scene or one_channel)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub variant: Variant,
    /// Strided 4x4 conv blocks (raster-space critics and the scene encoder
    /// of `concat_scene`).
    pub conv_channels: Vec<usize>,
    /// Width of the dense trajectory/state embeddings.
    pub embed_width: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            variant: Variant::Sc,
            conv_channels: vec![16, 32, 32, 32],
            embed_width: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub raster: RasterConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            raster: RasterConfig::desk_scale(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

pub const SCENE_CHANNELS: usize = 3;
pub const STATE_FEATURES: usize = HISTORY_LEN * STATE_DIM;

impl ModelConfig {
    pub fn with_variant(mut self, v: Variant) -> Self {
        self.discriminator.variant = v;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.raster.validate()?;
        let g = &self.generator;
        if g.noise_dim == 0 || g.horizon == 0 || g.hidden == 0 || g.state_width == 0 {
            return Err(Error::Config(
                "generator widths, noise_dim and horizon must be positive".into(),
            ));
        }
        for (who, plan) in [
            ("generator", &g.conv_channels),
            ("discriminator", &self.discriminator.conv_channels),
        ] {
            if plan.is_empty() || plan.contains(&0) {
                return Err(Error::Config(format!("{who} conv_channels must be non-empty and positive")));
            }
            let mut h = self.raster.height.min(self.raster.width);
            for _ in plan {
                if h < 2 {
                    return Err(Error::Config(format!(
                        "{who}: {} strided blocks do not fit a {}x{} raster",
                        plan.len(),
                        self.raster.height,
                        self.raster.width
                    )));
                }
                h /= 2;
            }
        }
        if self.discriminator.embed_width == 0 {
            return Err(Error::Config("embed_width must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form; stored in checkpoints.
    pub fn hash(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).into()
    }
}

fn conv_params(
    p: &mut ParameterSet,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    p.insert_fan_in_normal(&format!("{name}.w"), &[cout, cin, k, k], cin * k * k, 1.0, rng)?;
    p.insert(&format!("{name}.b"), Tensor::zeros(&[cout]))
}

fn dense_params(
    p: &mut ParameterSet,
    name: &str,
    cin: usize,
    cout: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    p.insert_fan_in_normal(&format!("{name}.w"), &[cout, cin], cin, 1.0, rng)?;
    p.insert(&format!("{name}.b"), Tensor::zeros(&[cout]))
}

fn conv(g: &mut Graph, p: &ParameterSet, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = g.param(p, &format!("{name}.w"))?;
    let b = g.param(p, &format!("{name}.b"))?;
    let y = g.conv2d(x, w, stride, pad)?;
    g.add_channel_bias(y, b)
}

fn dense(g: &mut Graph, p: &ParameterSet, name: &str, x: Var) -> Result<Var> {
    let w = g.param(p, &format!("{name}.w"))?;
    let b = g.param(p, &format!("{name}.b"))?;
    g.linear(x, w, b)
}

/// Strided conv blocks with leaky activations.
fn encoder(g: &mut Graph, p: &ParameterSet, prefix: &str, x: Var, blocks: usize) -> Result<Var> {
    encoder_from(g, p, prefix, x, 0, blocks)
}

fn encoder_from(
    g: &mut Graph,
    p: &ParameterSet,
    prefix: &str,
    mut x: Var,
    first: usize,
    blocks: usize,
) -> Result<Var> {
    for k in first..blocks {
        x = conv(g, p, &format!("{prefix}.conv{k}"), x, 2, 1)?;
        x = g.leaky_relu(x, LEAK);
    }
    Ok(x)
}

fn encoder_params(
    p: &mut ParameterSet,
    prefix: &str,
    cin: usize,
    plan: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    encoder_params_from(p, prefix, 0, cin, plan, rng)
}

fn encoder_params_from(
    p: &mut ParameterSet,
    prefix: &str,
    first: usize,
    cin: usize,
    plan: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut c = cin;
    for (k, &o) in plan.iter().enumerate() {
        conv_params(p, &format!("{prefix}.conv{}", first + k), c, o, 4, rng)?;
        c = o;
    }
    Ok(())
}

fn check_batch(op: &'static str, g: &Graph, v: Var, tail: &[usize]) -> Result<usize> {
    let s = g.shape(v);
    if s.len() != tail.len() + 1 || s[1..] != *tail {
        return Err(Error::shape(op, format!("expected [N, {tail:?}], got {s:?}")));
    }
    Ok(s[0])
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: ModelConfig,
    pub params: ParameterSet,
}

impl Generator {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Generator> {
        cfg.validate()?;
        let gc = &cfg.generator;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterSet::new();
        encoder_params(&mut p, "gen.scene", SCENE_CHANNELS, &gc.conv_channels, &mut rng)?;
        dense_params(&mut p, "gen.state", STATE_FEATURES, gc.state_width, &mut rng)?;
        let feat = gc.conv_channels.last().unwrap() + gc.state_width + gc.noise_dim;
        dense_params(&mut p, "gen.hidden", feat, gc.hidden, &mut rng)?;
        // small initial outputs: samples start near the prior
        p.insert_fan_in_normal("gen.out.w", &[2 * gc.horizon, gc.hidden], gc.hidden, 0.1, &mut rng)?;
        p.insert("gen.out.b", Tensor::zeros(&[2 * gc.horizon]))?;
        Ok(Generator {
            cfg: cfg.clone(),
            params: p,
        })
    }

    /// `scene [N,3,H,W]`, `states [N,F]`, `z [N,d]` to trajectories `[N,T,2]`.
    pub fn forward(&self, g: &mut Graph, scene: Var, states: Var, z: Var) -> Result<Var> {
        let gc = &self.cfg.generator;
        let rc = &self.cfg.raster;
        let n = check_batch("generator scene", g, scene, &[SCENE_CHANNELS, rc.height, rc.width])?;
        if check_batch("generator states", g, states, &[STATE_FEATURES])? != n
            || check_batch("generator noise", g, z, &[gc.noise_dim])? != n
        {
            return Err(Error::shape("generator", "batch sizes differ".to_string()));
        }
        let p = &self.params;
        let f = encoder(g, p, "gen.scene", scene, gc.conv_channels.len())?;
        let f = g.global_avg_pool(f)?;
        let s = dense(g, p, "gen.state", states)?;
        let s = g.leaky_relu(s, LEAK);
        let h = g.concat(&[f, s, z], 1)?;
        let h = dense(g, p, "gen.hidden", h)?;
        let h = g.leaky_relu(h, LEAK);
        let o = dense(g, p, "gen.out", h)?;
        let o = g.scale(o, gc.output_scale);
        let o = match gc.prior {
            Prior::None => o,
            Prior::ConstantVelocity => {
                let v = g.slice(states, 1, STATE_FEATURES - STATE_DIM + 2, 1)?;
                let mut ramp = vec![0.0; 2 * gc.horizon];
                for k in 0..gc.horizon {
                    ramp[2 * k] = STATE_SCALE * FUTURE_DT * (k + 1) as f64;
                }
                let ramp = g.constant(Tensor::new(vec![1, 2 * gc.horizon], ramp)?);
                let base = g.matmul(v, ramp, false, false)?;
                g.add(o, base)?
            }
        };
        g.reshape(o, &[n, gc.horizon, 2])
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub cfg: ModelConfig,
    pub params: ParameterSet,
}

impl Discriminator {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Discriminator> {
        cfg.validate()?;
        let dc = &cfg.discriminator;
        let t = cfg.generator.horizon;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterSet::new();
        let last = *dc.conv_channels.last().unwrap();
        let e = dc.embed_width;
        match dc.variant {
            Variant::Sc | Variant::OneChannel => {
                let traj_ch = if dc.variant == Variant::Sc { t } else { 1 };
                let spatial = SCENE_CHANNELS + traj_ch;
                let o = dc.conv_channels[0];
                let fan_in = (spatial + STATE_FEATURES) * 16;
                p.insert_fan_in_normal("disc.enc.conv0.w", &[o, spatial, 4, 4], fan_in, 1.0, &mut rng)?;
                p.insert_fan_in_normal(
                    "disc.enc.conv0.ws",
                    &[STATE_FEATURES, o, 4, 4],
                    fan_in,
                    1.0,
                    &mut rng,
                )?;
                p.insert("disc.enc.conv0.b", Tensor::zeros(&[o]))?;
                encoder_params_from(&mut p, "disc.enc", 1, o, &dc.conv_channels[1..], &mut rng)?;
                conv_params(&mut p, "disc.head", last, 1, 1, &mut rng)?;
            }
            Variant::NoScene | Variant::ConcatScene => {
                dense_params(&mut p, "disc.traj", 2 * t, e, &mut rng)?;
                dense_params(&mut p, "disc.state", STATE_FEATURES, e, &mut rng)?;
                let mut width = 2 * e;
                if dc.variant == Variant::ConcatScene {
                    encoder_params(&mut p, "disc.scene", SCENE_CHANNELS, &dc.conv_channels, &mut rng)?;
                    width += last;
                }
                dense_params(&mut p, "disc.hidden", width, e, &mut rng)?;
                dense_params(&mut p, "disc.out", e, 1, &mut rng)?;
            }
        }
        Ok(Discriminator {
            cfg: cfg.clone(),
            params: p,
        })
    }

    pub fn variant(&self) -> Variant {
        self.cfg.discriminator.variant
    }

    /// Critic input planes of the raster-space variants, `[N, C+T+F, H, W]`
    /// (`[N, C+1+F, H, W]` for `one_channel`). Occupancy grids are scaled
    /// by `2 pi sigma^2` so that a grid peaks at one.
    pub fn stacked_input(&self, g: &mut Graph, scene: Var, states: Var, traj: Var) -> Result<Var> {
        let rc = self.cfg.raster;
        let n = g.shape(traj)[0];
        let grids = rasterize(g, traj, &rc)?;
        let grids = g.scale(grids, 2.0 * std::f64::consts::PI * rc.sigma * rc.sigma);
        let grids = if self.variant() == Variant::OneChannel {
            g.max_along(grids, 1)?
        } else {
            grids
        };
        let planes = g.reshape(states, &[n, STATE_FEATURES, 1, 1])?;
        let planes = g.broadcast(planes, &[n, STATE_FEATURES, rc.height, rc.width])?;
        g.concat(&[scene, grids, planes], 1)
    }

    /// First conv block of the raster-space critics applied to
    /// [`Discriminator::stacked_input`]. The state planes are constant, so
    /// their contribution is the kernel response to a ones plane
    /// (which only varies near the padded border) weighted by the state
    /// values; this skips convolving `F` constant planes per example.
    fn first_block(&self, g: &mut Graph, scene: Var, states: Var, traj: Var) -> Result<Var> {
        let rc = self.cfg.raster;
        let p = &self.params;
        let n = g.shape(traj)[0];
        let o = self.cfg.discriminator.conv_channels[0];
        let grids = rasterize(g, traj, &rc)?;
        let grids = g.scale(grids, 2.0 * std::f64::consts::PI * rc.sigma * rc.sigma);
        let grids = if self.variant() == Variant::OneChannel {
            g.max_along(grids, 1)?
        } else {
            grids
        };
        let x = g.concat(&[scene, grids], 1)?;
        let w = g.param(p, "disc.enc.conv0.w")?;
        let y = g.conv2d(x, w, 2, 1)?;
        let (oh, ow) = (g.shape(y)[2], g.shape(y)[3]);
        let ws = g.param(p, "disc.enc.conv0.ws")?;
        let ws = g.reshape(ws, &[STATE_FEATURES * o, 1, 4, 4])?;
        let ones = g.constant(Tensor::full(&[1, 1, rc.height, rc.width], 1.0));
        let resp = g.conv2d(ones, ws, 2, 1)?;
        let resp = g.reshape(resp, &[STATE_FEATURES, o * oh * ow])?;
        let st = g.matmul(states, resp, false, false)?;
        let st = g.reshape(st, &[n, o, oh, ow])?;
        let y = g.add(y, st)?;
        let b = g.param(p, "disc.enc.conv0.b")?;
        let y = g.add_channel_bias(y, b)?;
        Ok(g.leaky_relu(y, LEAK))
    }

    /// Unbounded critic scores `[N]`.
    pub fn score(&self, g: &mut Graph, scene: Var, states: Var, traj: Var) -> Result<Var> {
        let rc = &self.cfg.raster;
        let dc = &self.cfg.discriminator;
        let t = self.cfg.generator.horizon;
        let n = check_batch("critic trajectory", g, traj, &[t, 2])?;
        if check_batch("critic scene", g, scene, &[SCENE_CHANNELS, rc.height, rc.width])? != n
            || check_batch("critic states", g, states, &[STATE_FEATURES])? != n
        {
            return Err(Error::shape("critic", "batch sizes differ".to_string()));
        }
        let p = &self.params;
        let out = match dc.variant {
            Variant::Sc | Variant::OneChannel => {
                let x = self.first_block(g, scene, states, traj)?;
                let x = encoder_from(g, p, "disc.enc", x, 1, dc.conv_channels.len())?;
                let x = conv(g, p, "disc.head", x, 1, 0)?;
                g.global_avg_pool(x)?
            }
            Variant::NoScene | Variant::ConcatScene => {
                let flat = g.reshape(traj, &[n, 2 * t])?;
                let flat = g.scale(flat, 0.1);
                let e = dense(g, p, "disc.traj", flat)?;
                let e = g.leaky_relu(e, LEAK);
                let s = dense(g, p, "disc.state", states)?;
                let s = g.leaky_relu(s, LEAK);
                let mut parts = vec![e, s];
                if dc.variant == Variant::ConcatScene {
                    let f = encoder(g, p, "disc.scene", scene, dc.conv_channels.len())?;
                    parts.push(g.global_avg_pool(f)?);
                }
                let h = g.concat(&parts, 1)?;
                let h = dense(g, p, "disc.hidden", h)?;
                let h = g.leaky_relu(h, LEAK);
                dense(g, p, "disc.out", h)?
            }
        };
        g.reshape(out, &[n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{rasterize_trajectory, render::render_scene, stack_discriminator_input};
    use crate::scene::{generate_scene, Template};

    fn small() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.raster = RasterConfig {
            height: 16,
            width: 16,
            resolution: 2.0,
            origin_row: 3,
            origin_col: 8,
            sigma: 2.0,
        };
        c.generator.conv_channels = vec![4, 4];
        c.discriminator.conv_channels = vec![4, 4];
        c.discriminator.embed_width = 8;
        c
    }

    fn inputs(cfg: &ModelConfig, seed: u64) -> (Tensor, Tensor, Tensor) {
        let s = generate_scene(Template::LeftTurnOnly, seed);
        let r = render_scene(&s, 0, &cfg.raster).unwrap().to_tensor();
        let scene = r.reshape(&[1, 3, cfg.raster.height, cfg.raster.width]).unwrap();
        let states = Tensor::new(vec![1, STATE_FEATURES], state_features(&s)).unwrap();
        let traj = Tensor::new(vec![1, 8, 2], s.future.iter().flatten().copied().collect()).unwrap();
        (scene, states, traj)
    }

    #[test]
    fn generator_shapes_and_determinism() {
        let cfg = small();
        let gen = Generator::new(&cfg, 1).unwrap();
        let (scene, states, _) = inputs(&cfg, 0);
        let run = |z: f64| {
            let mut g = Graph::new();
            let (a, b) = (g.input(scene.clone()), g.input(states.clone()));
            let z = g.input(Tensor::full(&[1, 16], z));
            let o = gen.forward(&mut g, a, b, z).unwrap();
            g.value(o).clone()
        };
        assert_eq!(run(0.3).shape(), &[1, 8, 2]);
        assert_eq!(run(0.3), run(0.3));
        assert_ne!(run(0.3), run(-0.3));
    }

    #[test]
    fn stacked_planes_match_the_reference_layout() {
        let cfg = small();
        let d = Discriminator::new(&cfg, 2).unwrap();
        let (scene, states, traj) = inputs(&cfg, 1);
        let mut g = Graph::new();
        let (a, b, c) = (g.input(scene.clone()), g.input(states.clone()), g.input(traj.clone()));
        let x = d.stacked_input(&mut g, a, b, c).unwrap();
        let pts: Vec<[f64; 2]> = traj.data().chunks(2).map(|p| [p[0], p[1]]).collect();
        let k = 2.0 * std::f64::consts::PI * 4.0;
        let grids = rasterize_trajectory(&pts, &cfg.raster).unwrap().to_tensor().map(|v| v * k);
        let scene3 = scene.clone().reshape(&[3, 16, 16]).unwrap();
        let reference = stack_discriminator_input(&scene3, &grids, states.data()).unwrap();
        assert_eq!(g.value(x).data(), reference.data());
        assert_eq!(g.shape(x), &[1, 41, 16, 16]);
    }

    #[test]
    fn state_plane_shortcut_matches_a_full_convolution() {
        for v in [Variant::Sc, Variant::OneChannel] {
            let cfg = small().with_variant(v);
            let d = Discriminator::new(&cfg, 5).unwrap();
            let (scene, states, traj) = inputs(&cfg, 3);
            let mut g = Graph::new();
            let (a, b, c) = (g.input(scene), g.input(states), g.input(traj));
            let fast = d.first_block(&mut g, a, b, c).unwrap();

            let x = d.stacked_input(&mut g, a, b, c).unwrap();
            let w = d.params.get("disc.enc.conv0.w").unwrap();
            let ws = d.params.get("disc.enc.conv0.ws").unwrap();
            let (o, spatial) = (w.shape()[0], w.shape()[1]);
            let cin = spatial + STATE_FEATURES;
            let full = Tensor::from_fn(&[o, cin, 4, 4], |i| {
                let (oc, rest) = (i / (cin * 16), i % (cin * 16));
                let (ci, tap) = (rest / 16, rest % 16);
                if ci < spatial {
                    w.data()[(oc * spatial + ci) * 16 + tap]
                } else {
                    ws.data()[((ci - spatial) * o + oc) * 16 + tap]
                }
            });
            let wf = g.constant(full);
            let y = g.conv2d(x, wf, 2, 1).unwrap();
            let bias = g.param(&d.params, "disc.enc.conv0.b").unwrap();
            let y = g.add_channel_bias(y, bias).unwrap();
            let slow = g.leaky_relu(y, LEAK);
            let (f, s) = (g.value(fast), g.value(slow));
            assert_eq!(f.shape(), s.shape());
            for (a, b) in f.data().iter().zip(s.data()) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn variants_build_and_score() {
        for v in Variant::ALL {
            let cfg = small().with_variant(v);
            let d = Discriminator::new(&cfg, 3).unwrap();
            let (scene, states, traj) = inputs(&cfg, 2);
            let mut g = Graph::new();
            let (a, b, c) = (g.input(scene), g.input(states), g.input(traj));
            let s = d.score(&mut g, a, b, c).unwrap();
            assert_eq!(g.shape(s), &[1]);
            assert!(g.value(s).all_finite());
        }
        assert!("bogus".parse::<Variant>().is_err());
        assert_eq!("one_channel".parse::<Variant>().unwrap(), Variant::OneChannel);
    }

    #[test]
    fn config_hash_tracks_changes() {
        let a = ModelConfig::default();
        let b = a.clone().with_variant(Variant::NoScene);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), ModelConfig::default().hash());
        let mut bad = small();
        bad.discriminator.conv_channels = vec![4; 6];
        assert!(bad.validate().is_err());
    }
}
