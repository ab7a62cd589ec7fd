//! Alternating WGAN-GP training of a generator and a critic.
//!
//! Each training step runs `d_steps` critic updates followed by one
//! generator update. All randomness of step `s` (batch indices, noise,
//! interpolation weights) comes from a ChaCha stream keyed by
//! `(seed, s)`, so a run restored from a checkpoint replays the same
//! losses as an uninterrupted one.

pub mod data;
pub mod losses;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::metrics::{Example as MetricsExample, MetricsReport, Reducer};
use crate::models::{Discriminator, Generator, ModelConfig};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{AdamConfig, Graph, Tensor};

pub use data::{Batch, Example, ExampleSet};
pub use losses::{critic_loss, gradient_penalty, variety_l2, wgan_gp_loss};

pub const LOG_HEADER: &str = "step,d_loss,g_loss,gp_mean,ade,orfp";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_gp: f64,
    /// Generator samples per example for the variety loss.
    pub variety_k: usize,
    /// Zero disables the variety loss.
    pub variety_weight: f64,
    pub d_steps: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Generator updates.
    pub steps: u64,
    pub seed: u64,
    /// Zero disables validation rows in the log.
    pub eval_interval: u64,
    /// Zero disables periodic checkpoints; a final one is always written.
    pub checkpoint_interval: u64,
    /// Validation examples scored at every evaluation.
    pub eval_examples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_gp: 10.0,
            variety_k: 3,
            variety_weight: 0.0,
            d_steps: 3,
            batch_size: 16,
            lr_g: 1e-4,
            lr_d: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            steps: 1000,
            seed: 0,
            eval_interval: 100,
            checkpoint_interval: 500,
            eval_examples: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda_gp >= 0.0) {
            return bad("lambda_gp must be >= 0");
        }
        if self.variety_k < 1 {
            return bad("variety_k must be >= 1");
        }
        if !(self.variety_weight >= 0.0) {
            return bad("variety_weight must be >= 0");
        }
        if self.d_steps < 1 {
            return bad("d_steps must be >= 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1");
        }
        for (name, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(&format!("{name} must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticStats {
    pub d_loss: f64,
    /// `mean(real) - mean(fake)`
    pub wasserstein: f64,
    pub gp_mean: f64,
    /// Mean coordinate-gradient norm at the interpolates.
    pub grad_norm_mean: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorStats {
    pub g_loss: f64,
    pub variety: f64,
}

/// Losses of one training step; critic values are averaged over its
/// critic updates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub critic: CriticStats,
    pub generator: GeneratorStats,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub gp_mean: f64,
    pub ade: f64,
    /// Percent.
    pub orfp: f64,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.d_loss, self.g_loss, self.gp_mean, self.ade, self.orfp
        )
    }

    fn to_array(self) -> [f64; 6] {
        [
            self.step as f64,
            self.d_loss,
            self.g_loss,
            self.gp_mean,
            self.ade,
            self.orfp,
        ]
    }

    fn from_slice(v: &[f64]) -> LogRow {
        LogRow {
            step: v[0] as u64,
            d_loss: v[1],
            g_loss: v[2],
            gp_mean: v[3],
            ade: v[4],
            orfp: v[5],
        }
    }
}

fn sample_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Draws `k` trajectories per example; returns `[N][k]` point lists.
pub fn sample_trajectories(
    gen: &Generator,
    batch: &Batch,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<Vec<Point>>>> {
    let n = batch.indices.len();
    let t = gen.cfg.generator.horizon;
    let mut g = Graph::new();
    let scene = g.constant(data::repeat_each(&batch.scene, k));
    let states = g.constant(data::repeat_each(&batch.states, k));
    let z = g.constant(sample_normal(rng, &[n * k, gen.cfg.generator.noise_dim]));
    let out = gen.forward(&mut g, scene, states, z)?;
    let v = g.value(out).data();
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("generator output".into()));
    }
    Ok((0..n)
        .map(|i| {
            (0..k)
                .map(|j| {
                    let base = (i * k + j) * t * 2;
                    (0..t).map(|s| [v[base + 2 * s], v[base + 2 * s + 1]]).collect()
                })
                .collect()
        })
        .collect())
}

/// Scores `k` generator samples per example. Example `i` draws its noise
/// from stream `i` of `seed`, so results do not depend on the chunking.
pub fn evaluate_generator(
    gen: &Generator,
    set: &ExampleSet,
    ks: &[usize],
    seed: u64,
) -> Result<MetricsReport> {
    let k = ks.iter().copied().max().unwrap_or(1).max(1);
    let mut samples = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        let mut rng = step_rng(seed, i as u64);
        let b = set.batch(&[i])?;
        samples.push(sample_trajectories(gen, &b, k, &mut rng)?.remove(0));
    }
    let examples: Vec<MetricsExample<'_>> = set
        .examples
        .iter()
        .zip(&samples)
        .map(|(e, s)| MetricsExample {
            samples: s,
            gt: &e.gt,
            region: &e.region,
        })
        .collect();
    MetricsReport::evaluate(&examples, ks)
}

/// Generator, critic and the loop state needed to continue training.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub gen: Generator,
    pub disc: Discriminator,
    /// Completed training steps.
    pub step: u64,
    pub history: Vec<LogRow>,
}

impl Trainer {
    /// Fresh networks; the generator and the critic use seeds derived from
    /// `cfg.seed`.
    pub fn new(model: &ModelConfig, cfg: &TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        model.validate()?;
        Ok(Trainer {
            cfg: cfg.clone(),
            gen: Generator::new(model, cfg.seed.wrapping_mul(2).wrapping_add(1))?,
            disc: Discriminator::new(model, cfg.seed.wrapping_mul(2).wrapping_add(2))?,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn model(&self) -> &ModelConfig {
        &self.gen.cfg
    }

    fn draw_batch(&self, set: &ExampleSet, rng: &mut ChaCha8Rng) -> Result<Batch> {
        if set.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        let idx: Vec<usize> = (0..self.cfg.batch_size)
            .map(|_| rng.random_range(0..set.len()))
            .collect();
        set.batch(&idx)
    }

    /// One critic update on `batch` against fresh generator samples.
    pub fn critic_step(&mut self, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<CriticStats> {
        let n = batch.indices.len();
        let fake = {
            let mut g = Graph::new();
            let s = g.constant(batch.scene.clone());
            let st = g.constant(batch.states.clone());
            let z = g.constant(sample_normal(rng, &[n, self.gen.cfg.generator.noise_dim]));
            let out = self.gen.forward(&mut g, s, st, z)?;
            g.value(out).clone()
        };
        let eps: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();

        let disc = &self.disc;
        let mut g = Graph::new();
        let scene = g.constant(batch.scene.clone());
        let states = g.constant(batch.states.clone());
        let real = g.constant(batch.gt.clone());
        let fake_v = g.constant(fake.clone());
        let real_s = disc.score(&mut g, scene, states, real)?;
        let fake_s = disc.score(&mut g, scene, states, fake_v)?;
        let (gp, norm) = gradient_penalty(
            &mut g,
            |g, x| disc.score(g, scene, states, x),
            &batch.gt,
            &fake,
            &eps,
        )?;
        let loss = critic_loss(&mut g, real_s, fake_s, gp, self.cfg.lambda_gp)?;
        let mean = |g: &Graph, v| g.value(v).sum() / n as f64;
        let stats = CriticStats {
            d_loss: g.value(loss).item(),
            wasserstein: mean(&g, real_s) - mean(&g, fake_s),
            gp_mean: mean(&g, gp),
            grad_norm_mean: mean(&g, norm),
        };
        if !stats.d_loss.is_finite() {
            return Err(Error::NonFinite(format!("critic loss {}", stats.d_loss)));
        }
        let grads = g.param_grads(loss, &self.disc.params)?;
        if !grads.global_norm().is_finite() {
            return Err(Error::NonFinite("critic gradient".into()));
        }
        self.disc.params.adam_step(&grads, &self.cfg.adam(self.cfg.lr_d))?;
        Ok(stats)
    }

    /// One generator update: adversarial term on one sample per example,
    /// plus the weighted variety loss over `variety_k` samples when enabled.
    pub fn generator_step(&mut self, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<GeneratorStats> {
        let n = batch.indices.len();
        let k = if self.cfg.variety_weight > 0.0 {
            self.cfg.variety_k
        } else {
            1
        };
        let gc = &self.gen.cfg.generator;
        let (t, d) = (gc.horizon, gc.noise_dim);
        let mut g = Graph::new();
        let scene = g.constant(data::repeat_each(&batch.scene, k));
        let states = g.constant(data::repeat_each(&batch.states, k));
        let z = g.constant(sample_normal(rng, &[n * k, d]));
        let out = self.gen.forward(&mut g, scene, states, z)?;
        let out4 = g.reshape(out, &[n, k, t, 2])?;
        let first = g.slice(out4, 1, 0, 1)?;
        let first = g.reshape(first, &[n, t, 2])?;
        let s1 = g.constant(batch.scene.clone());
        let st1 = g.constant(batch.states.clone());
        let score = self.disc.score(&mut g, s1, st1, first)?;
        let mean = g.mean_all(score)?;
        let adv = g.neg(mean);
        let g_loss = g.value(adv).item();
        let (loss, variety) = if k > 1 || self.cfg.variety_weight > 0.0 {
            let gt = g.constant(batch.gt.clone());
            let v = variety_l2(&mut g, out4, gt)?;
            let vw = g.scale(v, self.cfg.variety_weight);
            (g.add(adv, vw)?, g.value(v).item())
        } else {
            (adv, f64::NAN)
        };
        if !g.value(loss).item().is_finite() {
            return Err(Error::NonFinite(format!("generator loss {}", g.value(loss).item())));
        }
        let grads = g.param_grads(loss, &self.gen.params)?;
        if !grads.global_norm().is_finite() {
            return Err(Error::NonFinite("generator gradient".into()));
        }
        self.gen.params.adam_step(&grads, &self.cfg.adam(self.cfg.lr_g))?;
        Ok(GeneratorStats { g_loss, variety })
    }

    /// Runs step `self.step + 1`. On a non-finite value the error is
    /// returned together with the batch that caused it.
    pub fn train_step(&mut self, set: &ExampleSet) -> std::result::Result<StepStats, (Error, Option<Batch>)> {
        let step = self.step + 1;
        let mut rng = step_rng(self.cfg.seed, step);
        let mut acc = CriticStats {
            d_loss: 0.0,
            wasserstein: 0.0,
            gp_mean: 0.0,
            grad_norm_mean: 0.0,
        };
        for _ in 0..self.cfg.d_steps {
            let b = self.draw_batch(set, &mut rng).map_err(|e| (e, None))?;
            let c = self.critic_step(&b, &mut rng).map_err(|e| (e, Some(b)))?;
            acc.d_loss += c.d_loss;
            acc.wasserstein += c.wasserstein;
            acc.gp_mean += c.gp_mean;
            acc.grad_norm_mean += c.grad_norm_mean;
        }
        let m = self.cfg.d_steps as f64;
        acc.d_loss /= m;
        acc.wasserstein /= m;
        acc.gp_mean /= m;
        acc.grad_norm_mean /= m;
        let b = self.draw_batch(set, &mut rng).map_err(|e| (e, None))?;
        let gs = self.generator_step(&b, &mut rng).map_err(|e| (e, Some(b)))?;
        self.step = step;
        Ok(StepStats {
            step,
            critic: acc,
            generator: gs,
        })
    }

    /// Single-sample ADE and pooled ORFP of the first `eval_examples`
    /// validation examples.
    pub fn validation_metrics(&self, val: &ExampleSet) -> Result<(f64, f64)> {
        let n = self.cfg.eval_examples.min(val.len());
        let subset = ExampleSet {
            raster: val.raster,
            examples: val.examples[..n].to_vec(),
        };
        let report = evaluate_generator(&self.gen, &subset, &[1], self.cfg.seed)?;
        let row = report
            .row(1, Reducer::Mean)
            .ok_or_else(|| Error::Contract("evaluation produced no rows".into()))?;
        Ok((row.ade, row.orfp_avg))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.model().hash(), self.step);
        c.insert_params("gen", &self.gen.params);
        c.insert_params("disc", &self.disc.params);
        let rows: Vec<f64> = self.history.iter().flat_map(|r| r.to_array()).collect();
        let hist = Tensor::new(vec![self.history.len(), 6], rows).expect("six columns");
        c.tensors.insert("history".into(), hist);
        c
    }

    /// Rebuilds a trainer from a checkpoint written by [`Trainer::checkpoint`].
    pub fn restore(model: &ModelConfig, cfg: &TrainConfig, ck: &Checkpoint) -> Result<Trainer> {
        let expected = model.hash();
        if ck.config_hash != expected {
            return Err(Error::HashMismatch {
                what: "model config",
                expected: crate::tensor::checkpoint::hex(&expected),
                found: ck.config_hash_hex(),
            });
        }
        let mut t = Trainer::new(model, cfg)?;
        ck.restore_params("gen", &mut t.gen.params)?;
        ck.restore_params("disc", &mut t.disc.params)?;
        t.step = ck.step;
        if let Some(h) = ck.tensors.get("history") {
            t.history = h.data().chunks(6).map(LogRow::from_slice).collect();
        }
        Ok(t)
    }

    /// Trains until `cfg.steps`, appending validation rows to
    /// `out/metrics.csv` and writing checkpoints to `out/`.
    pub fn run(&mut self, train: &ExampleSet, val: &ExampleSet, out: &Path) -> Result<()> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let log_path = out.join("metrics.csv");
        self.rewrite_log(&log_path)?;
        let mut log = fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        while self.step < self.cfg.steps {
            let stats = match self.train_step(train) {
                Ok(s) => s,
                Err((e, batch)) => {
                    if matches!(e, Error::NonFinite(_)) {
                        self.dump_diagnostics(out, &e, batch.as_ref())?;
                    }
                    return Err(e);
                }
            };
            let step = stats.step;
            if self.cfg.eval_interval > 0 && step % self.cfg.eval_interval == 0 {
                let (ade, orfp) = self.validation_metrics(val)?;
                let row = LogRow {
                    step,
                    d_loss: stats.critic.d_loss,
                    g_loss: stats.generator.g_loss,
                    gp_mean: stats.critic.gp_mean,
                    ade,
                    orfp,
                };
                writeln!(log, "{}", row.to_csv()).map_err(|e| Error::io(&log_path, e))?;
                self.history.push(row);
            }
            if self.cfg.checkpoint_interval > 0 && step % self.cfg.checkpoint_interval == 0 {
                self.save(out)?;
            }
        }
        self.save(out).map(|_| ())
    }

    /// Writes `ckpt_<step>.bin` and `latest.bin`.
    pub fn save(&self, out: &Path) -> Result<PathBuf> {
        let c = self.checkpoint();
        let path = out.join(format!("ckpt_{:08}.bin", self.step));
        c.write(&path)?;
        c.write(&out.join("latest.bin"))?;
        Ok(path)
    }

    fn rewrite_log(&self, path: &Path) -> Result<()> {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.history {
            s.push_str(&r.to_csv());
            s.push('\n');
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    fn dump_diagnostics(&self, out: &Path, err: &Error, batch: Option<&Batch>) -> Result<()> {
        let path = out.join("diagnostics.json");
        let dump = serde_json::json!({
            "error": err.to_string(),
            "step": self.step + 1,
            "batch_indices": batch.map(|b| b.indices.clone()),
            "batch_gt": batch.map(|b| b.gt.data().to_vec()),
            "batch_states": batch.map(|b| b.states.data().to_vec()),
            "generator_norms": self.gen.params.norms(),
            "critic_norms": self.disc.params.norms(),
        });
        let text = serde_json::to_string_pretty(&dump)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}
