//! `trajgan`: dataset generation, gradient checks, training, evaluation
//! and rendering for the scene-compliant trajectory GAN.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use trajgan::models::{Generator, ModelConfig, Variant};
use trajgan::raster::render::{
    draw_trajectories, grid_image, render_scene, save_png, scene_image, RgbImage,
};
use trajgan::raster::{gradient_norm_field, rasterize_trajectory, RasterConfig, RasterGrid};
use trajgan::scene::dataset::{build_dataset, Dataset, DatasetConfig, Split};
use trajgan::tensor::checkpoint::{hex, Checkpoint};
use trajgan::training::{evaluate_generator, sample_trajectories, ExampleSet, TrainConfig, Trainer};
use trajgan::verify::{gradcheck_suite, SuiteOptions};
use trajgan::Error;

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "trajgan", version, about = "Scene-compliant trajectory GAN toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Bitwise-reproducible execution. Every command already runs on a
    /// single thread; the flag is recorded in the run manifest.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    /// Negate the rasterizer's backward pass.
    SignFlip,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset from a TOML config.
    GenData {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, value_enum)]
        inject_fault: Option<Fault>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a generator against one of the critic variants.
    Train {
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        /// Continue from `<out>/latest.bin`.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Score a trained generator on a dataset split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Sample counts; each gets a mean-over-K and a min-over-K row.
        #[arg(long, value_delimiter = ',', default_value = "3,20")]
        k: Vec<usize>,
        /// Only score the first N examples of the split.
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Render a scene, occupancy grids, gradient-norm maps and sample overlays.
    Render {
        #[arg(long)]
        data: PathBuf,
        /// Dataset record index.
        #[arg(long)]
        scene: usize,
        /// Model config of a checkpoint to overlay; pairs with `--checkpoint`.
        #[arg(long)]
        config: Vec<PathBuf>,
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        /// Pixels per raster cell in the PNGs.
        #[arg(long, default_value_t = 4)]
        scale: u32,
        #[command(flatten)]
        common: Common,
    },
}

/// Model and training settings of a run. Evaluation and rendering only
/// read the model part.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(default)]
    model: ModelConfig,
    train: Option<TrainConfig>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::usage(e.to_string()),
            _ => Failure::runtime(e.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::runtime(format!("{}: {e}", path.display()))
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("configs serialize")
}

fn write_manifest(m: &RunManifest, out: &Path) -> Result<(), Failure> {
    m.write(out).map(|_| ()).map_err(|e| io_failure(out, e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, common } => gen_data(&config, &common),
        Command::Gradcheck {
            inject_fault,
            common,
        } => gradcheck(inject_fault, &common),
        Command::Train {
            config,
            data,
            variant,
            resume,
            common,
        } => train(&config, &data, variant, resume, &common),
        Command::Eval {
            config,
            checkpoint,
            data,
            split,
            k,
            limit,
            common,
        } => eval(&config, &checkpoint, &data, split, &k, limit, &common),
        Command::Render {
            data,
            scene,
            config,
            checkpoint,
            scale,
            common,
        } => render(&data, scene, &config, &checkpoint, scale, &common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn gen_data(config: &Path, common: &Common) -> Result<(), Failure> {
    let mut cfg: DatasetConfig = read_toml(config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    let mut m = RunManifest::new("gen-data", to_json(&cfg), common.deterministic).seed("dataset", cfg.seed);
    m.outputs = vec![out.clone()];
    write_manifest(&m, &out)?;
    let dm = build_dataset(&cfg, &out)?;
    m.dataset_sha256 = Some(dm.sha256.clone());
    write_manifest(&m, &out)?;
    println!(
        "wrote {} scenes to {} (sha256 {})",
        cfg.n_scenes,
        out.display(),
        dm.sha256
    );
    for (t, n) in &dm.template_counts {
        println!("  {:<20} {n}", t.name());
    }
    Ok(())
}

fn gradcheck(fault: Option<Fault>, common: &Common) -> Result<(), Failure> {
    let opts = SuiteOptions {
        seed: common.seed.unwrap_or(0),
        inject_sign_flip: matches!(fault, Some(Fault::SignFlip)),
    };
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("gradcheck"));
    let json_path = out.join("gradcheck.json");
    let mut m = RunManifest::new("gradcheck", to_json(&opts), common.deterministic).seed("suite", opts.seed);
    m.outputs = vec![json_path.clone(), out.join("gradcheck.txt")];
    write_manifest(&m, &out)?;
    let report = gradcheck_suite(&opts)?;
    let text = report.to_text();
    fs::write(&json_path, serde_json::to_string_pretty(&report).expect("report serializes"))
        .map_err(|e| io_failure(&json_path, e))?;
    let txt = out.join("gradcheck.txt");
    fs::write(&txt, &text).map_err(|e| io_failure(&txt, e))?;
    print!("{text}");
    if report.passed() {
        println!("all {} checks passed", report.entries.len());
        Ok(())
    } else {
        Err(Failure::runtime(format!(
            "{} of {} gradient checks failed; report at {}",
            report.failing().count(),
            report.entries.len(),
            json_path.display()
        )))
    }
}

fn load_examples(ds: &Dataset, split: Split, raster: &RasterConfig, limit: Option<usize>) -> Result<ExampleSet, Failure> {
    let mut scenes = ds.split(split);
    if let Some(n) = limit {
        scenes.truncate(n);
    }
    Ok(ExampleSet::from_scenes(&scenes, raster)?)
}

fn train(
    config: &Path,
    data: &Path,
    variant: Option<Variant>,
    resume: bool,
    common: &Common,
) -> Result<(), Failure> {
    let mut rc: RunConfig = read_toml(config)?;
    if let Some(v) = variant {
        rc.model.discriminator.variant = v;
    }
    let mut tc = rc
        .train
        .clone()
        .ok_or_else(|| Failure::usage(format!("{}: missing [train] section", config.display())))?;
    if let Some(s) = common.seed {
        tc.seed = s;
    }
    tc.validate()?;
    rc.model.validate()?;
    rc.train = Some(tc.clone());
    let variant = rc.model.discriminator.variant;
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(variant.name()));

    let mut m = RunManifest::new("train", to_json(&rc), common.deterministic).seed("train", tc.seed);
    m.outputs = vec![out.join("metrics.csv"), out.join("latest.bin")];
    write_manifest(&m, &out)?;
    let snapshot = out.join("config.toml");
    let toml_text = toml::to_string(&rc).map_err(|e| Failure::runtime(e.to_string()))?;
    fs::write(&snapshot, toml_text).map_err(|e| io_failure(&snapshot, e))?;

    let ds = Dataset::read(data)?;
    m.dataset_sha256 = Some(ds.manifest.sha256.clone());
    write_manifest(&m, &out)?;
    let train_set = load_examples(&ds, Split::Train, &rc.model.raster, None)?;
    let val_set = load_examples(&ds, Split::Val, &rc.model.raster, None)?;
    if train_set.is_empty() {
        return Err(Failure::usage("dataset has no training scenes"));
    }

    let mut trainer = if resume {
        let path = out.join("latest.bin");
        if !path.exists() {
            return Err(Failure::usage(format!("--resume: no checkpoint at {}", path.display())));
        }
        let ck = Checkpoint::read(&path)?;
        match Trainer::restore(&rc.model, &tc, &ck) {
            Err(e @ Error::HashMismatch { .. }) => return Err(Failure::usage(e.to_string())),
            r => r?,
        }
    } else {
        Trainer::new(&rc.model, &tc)?
    };
    let start = trainer.step;
    println!(
        "training {} from step {start} to {} on {} scenes ({} validation)",
        variant.name(),
        tc.steps,
        train_set.len(),
        val_set.len()
    );
    match trainer.run(&train_set, &val_set, &out) {
        Ok(()) => {}
        Err(e @ Error::NonFinite(_)) => {
            return Err(Failure::runtime(format!(
                "{e}; diagnostics at {}",
                out.join("diagnostics.json").display()
            )))
        }
        Err(e) => return Err(e.into()),
    }
    if let Some(r) = trainer.history.last() {
        println!(
            "step {}: d_loss {:.4} g_loss {:.4} gp {:.4} val ADE {:.3} m, ORFP {:.2}%",
            r.step, r.d_loss, r.g_loss, r.gp_mean, r.ade, r.orfp
        );
    }
    println!("checkpoint {}", out.join("latest.bin").display());
    Ok(())
}

/// Loads the generator of `checkpoint`, refusing checkpoints trained with a
/// different model config (exit code 2).
fn load_generator(model: &ModelConfig, checkpoint: &Path) -> Result<Generator, Failure> {
    let ck = Checkpoint::read(checkpoint)?;
    if ck.config_hash != model.hash() {
        return Err(Failure::usage(format!(
            "{} was trained with model config {}, but the given config hashes to {}",
            checkpoint.display(),
            ck.config_hash_hex(),
            hex(&model.hash())
        )));
    }
    let mut gen = Generator::new(model, 0)?;
    ck.restore_params("gen", &mut gen.params)?;
    Ok(gen)
}

fn eval(
    config: &Path,
    checkpoint: &Path,
    data: &Path,
    split: Split,
    ks: &[usize],
    limit: Option<usize>,
    common: &Common,
) -> Result<(), Failure> {
    let rc: RunConfig = read_toml(config)?;
    rc.model.validate()?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(Failure::usage("--k values must be positive"));
    }
    let seed = common.seed.unwrap_or(0);
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("eval"));
    let mut m = RunManifest::new(
        "eval",
        serde_json::json!({
            "model": rc.model,
            "checkpoint": checkpoint,
            "split": split.name(),
            "k": ks,
            "limit": limit,
        }),
        common.deterministic,
    )
    .seed("sampling", seed);
    m.outputs = vec![out.join("report.csv"), out.join("report.txt")];
    write_manifest(&m, &out)?;
    let gen = load_generator(&rc.model, checkpoint)?;
    let ds = Dataset::read(data)?;
    m.dataset_sha256 = Some(ds.manifest.sha256.clone());
    write_manifest(&m, &out)?;
    let set = load_examples(&ds, split, &rc.model.raster, limit)?;
    if set.is_empty() {
        return Err(Failure::usage(format!("split {} is empty", split.name())));
    }
    let report = evaluate_generator(&gen, &set, ks, seed)?;
    let csv = out.join("report.csv");
    fs::write(&csv, report.to_csv()).map_err(|e| io_failure(&csv, e))?;
    let txt = out.join("report.txt");
    let table = report.to_table();
    fs::write(&txt, &table).map_err(|e| io_failure(&txt, e))?;
    print!("{table}");
    Ok(())
}

fn max_over(grids: &[RasterGrid]) -> RasterGrid {
    let mut out = grids[0].clone();
    for g in &grids[1..] {
        for (o, v) in out.values.iter_mut().zip(&g.values) {
            *o = o.max(*v);
        }
    }
    out
}

const SAMPLE_COLOURS: [[u8; 3]; 3] = [[0, 200, 255], [255, 140, 0], [200, 0, 255]];

fn render(
    data: &Path,
    index: usize,
    configs: &[PathBuf],
    checkpoints: &[PathBuf],
    scale: u32,
    common: &Common,
) -> Result<(), Failure> {
    if configs.len() != checkpoints.len() {
        return Err(Failure::usage("--config and --checkpoint must be given in pairs"));
    }
    if scale == 0 {
        return Err(Failure::usage("--scale must be positive"));
    }
    let models = configs
        .iter()
        .map(|c| read_toml::<RunConfig>(c).map(|r| r.model))
        .collect::<Result<Vec<_>, _>>()?;
    let raster = models.first().map_or_else(RasterConfig::default, |m| m.raster);
    let seed = common.seed.unwrap_or(0);
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("render"));
    let mut m = RunManifest::new(
        "render",
        serde_json::json!({
            "scene": index,
            "raster": raster,
            "models": models,
            "checkpoints": checkpoints,
            "scale": scale,
        }),
        common.deterministic,
    )
    .seed("sampling", seed);
    write_manifest(&m, &out)?;

    let ds = Dataset::read(data)?;
    m.dataset_sha256 = Some(ds.manifest.sha256.clone());
    let rec = ds
        .records
        .iter()
        .find(|r| r.index == index)
        .ok_or_else(|| Failure::usage(format!("dataset has no scene {index}")))?;
    let scene = &rec.scene;
    let mut outputs = Vec::new();
    let mut save = |img: RgbImage, name: String| -> Result<(), Failure> {
        let path = out.join(name);
        save_png(&img, &path)?;
        outputs.push(path);
        Ok(())
    };

    let base = render_scene(scene, scene.target, &raster)?;
    save(scene_image(&base, scale), "scene.png".into())?;
    let mid = scene.future[scene.future.len() / 2];
    for sigma in [1.4, 2.0, 3.0] {
        let cfg = raster.with_sigma(sigma);
        let stack = rasterize_trajectory(&scene.future, &cfg)?;
        save(grid_image(&max_over(&stack.grids), scale), format!("grid_sigma_{sigma}.png"))?;
        let field = gradient_norm_field(mid, &cfg)?;
        save(grid_image(&field, scale), format!("gradnorm_sigma_{sigma}.png"))?;
    }

    for (i, (model, ck)) in models.iter().zip(checkpoints).enumerate() {
        let gen = load_generator(model, ck)?;
        let set = ExampleSet::from_scenes(&[scene], &model.raster)?;
        let batch = set.batch(&[0])?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let samples = sample_trajectories(&gen, &batch, 3, &mut rng)?.remove(0);
        let r = render_scene(scene, scene.target, &model.raster)?;
        let mut img = scene_image(&r, scale);
        let mut lines = vec![(scene.future.clone(), [255, 255, 255])];
        lines.extend(samples.into_iter().zip(SAMPLE_COLOURS));
        draw_trajectories(&mut img, &model.raster, scale, &lines);
        let name = format!("overlay_{i}_{}.png", model.discriminator.variant.name());
        save(img, name)?;
    }
    m.outputs = outputs;
    write_manifest(&m, &out)?;
    for p in &m.outputs {
        println!("{}", p.display());
    }
    Ok(())
}
