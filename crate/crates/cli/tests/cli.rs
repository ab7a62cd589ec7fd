use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn trajgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trajgan"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const DATA_TOML: &str = r#"
n_scenes = 25
seed = 3

[template_mix]
straight = 1.0
left_turn_only = 1.0
right_turn_only = 1.0
intersection_unprotected_left = 1.0
"#;

const RUN_TOML: &str = r#"
[model.raster]
height = 16
width = 16
resolution = 4.0
origin_row = 2
origin_col = 8
sigma = 4.0

[model.generator]
conv_channels = [4, 4]
hidden = 16

[model.discriminator]
variant = "sc"
conv_channels = [4, 4]
embed_width = 8

[train]
lambda_gp = 10.0
variety_k = 3
variety_weight = 0.0
d_steps = 3
batch_size = 4
lr_g = 0.0001
lr_d = 0.0001
beta1 = 0.5
beta2 = 0.9
steps = 200
seed = 1
eval_interval = 50
checkpoint_interval = 100
eval_examples = 4
"#;

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("data.toml"), DATA_TOML).unwrap();
        fs::write(dir.path().join("run.toml"), RUN_TOML).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn gen_data(&self, out: &str) -> Output {
        trajgan(&["gen-data", s(&self.path("data.toml")), "--out", s(&self.path(out))])
    }

    fn with_run_config(&self, name: &str, edit: impl Fn(&str) -> String) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, edit(RUN_TOML)).unwrap();
        p
    }
}

fn manifest_sha(dir: &Path) -> String {
    let text = fs::read_to_string(dir.join("manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["sha256"].as_str().unwrap().to_string()
}

#[test]
fn gen_data_writes_a_reproducible_dataset() {
    let f = Fixture::new();
    let a = f.gen_data("a");
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert!(f.path("a/scenes.jsonl").exists());
    assert!(f.path("a/run_manifest.json").exists());
    let b = f.gen_data("b");
    assert_eq!(code(&b), 0);
    assert_eq!(manifest_sha(&f.path("a")), manifest_sha(&f.path("b")));
    assert_eq!(
        fs::read(f.path("a/scenes.jsonl")).unwrap(),
        fs::read(f.path("b/scenes.jsonl")).unwrap()
    );
}

#[test]
fn gen_data_names_a_missing_field() {
    let f = Fixture::new();
    let p = f.path("bad.toml");
    fs::write(&p, DATA_TOML.replace("n_scenes = 25", "")).unwrap();
    let o = trajgan(&["gen-data", s(&p), "--out", s(&f.path("x"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("n_scenes"), "{}", stderr(&o));
    let o = trajgan(&["gen-data", s(&f.path("nope.toml"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_passes_and_catches_an_injected_fault() {
    let f = Fixture::new();
    let ok = trajgan(&["gradcheck", "--out", s(&f.path("gc"))]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("gc/gradcheck.json")).unwrap()).unwrap();
    let entries = report["entries"].as_array().unwrap();
    assert!(entries.len() > 10);
    assert!(entries.iter().all(|e| e["max_rel_err"].is_number() && e["name"].is_string()));

    let bad = trajgan(&[
        "gradcheck",
        "--inject-fault",
        "sign-flip",
        "--out",
        s(&f.path("gc_bad")),
    ]);
    assert_eq!(code(&bad), 1);
    assert!(stderr(&bad).contains("gradcheck.json"), "{}", stderr(&bad));
}

fn log_rows(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("metrics.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(str::to_string)
        .collect()
}

#[test]
fn train_eval_and_render_share_plumbing() {
    let f = Fixture::new();
    assert_eq!(code(&f.gen_data("data")), 0);
    let data = f.path("data");
    let run = f.path("run.toml");

    // smoke runs for two critic variants
    for variant in ["sc", "no_scene"] {
        let out = f.path(&format!("run_{variant}"));
        let o = trajgan(&[
            "train",
            s(&run),
            "--data",
            s(&data),
            "--variant",
            variant,
            "--out",
            s(&out),
        ]);
        assert_eq!(code(&o), 0, "{variant}: {}", stderr(&o));
        let rows = log_rows(&out);
        assert_eq!(rows.len(), 200 / 50);
        assert!(rows[3].starts_with("200,"));
        assert!(out.join("latest.bin").exists());
        assert!(out.join("run_manifest.json").exists());
        let snap = fs::read_to_string(out.join("config.toml")).unwrap();
        assert!(snap.contains(&format!("variant = \"{variant}\"")));
    }

    // resume continues the step counter
    let longer = f.with_run_config("longer.toml", |t| t.replace("steps = 200", "steps = 300"));
    let out = f.path("run_sc");
    let o = trajgan(&["train", s(&longer), "--data", s(&data), "--out", s(&out), "--resume"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = log_rows(&out);
    assert_eq!(rows.len(), 6);
    assert!(rows[5].starts_with("300,"));
    assert!(out.join("ckpt_00000300.bin").exists());

    // evaluation of the trained sc generator
    let ck = out.join("latest.bin");
    let eval_out = f.path("eval");
    let o = trajgan(&[
        "eval",
        "--config",
        s(&longer),
        "--checkpoint",
        s(&ck),
        "--data",
        s(&data),
        "--k",
        "1,3",
        "--out",
        s(&eval_out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(eval_out.join("report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], trajgan::metrics::CSV_HEADER);
    assert_eq!(lines.len(), 1 + 4);
    let cols = |l: &str| l.split(',').map(str::to_string).collect::<Vec<_>>();
    let (mean1, min1) = (cols(lines[1]), cols(lines[2]));
    assert_eq!(&mean1[..2], &["1", "mean"]);
    assert_eq!(&min1[..2], &["1", "min"]);
    assert_eq!(mean1[2..], min1[2..]);
    for l in &lines[1..] {
        for v in &cols(l)[2..8] {
            assert!(v.parse::<f64>().unwrap().is_finite(), "{l}");
        }
    }
    // a different model config is refused
    let other = f.with_run_config("other.toml", |t| t.replace("hidden = 16", "hidden = 12"));
    let o = trajgan(&[
        "eval",
        "--config",
        s(&other),
        "--checkpoint",
        s(&ck),
        "--data",
        s(&data),
        "--out",
        s(&f.path("eval2")),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    // rendering: sigma sweep plus one overlay, reproducible
    let render = |dir: &str| {
        let o = trajgan(&[
            "render",
            "--data",
            s(&data),
            "--scene",
            "4",
            "--config",
            s(&longer),
            "--checkpoint",
            s(&ck),
            "--out",
            s(&f.path(dir)),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    render("r1");
    render("r2");
    for sigma in ["1.4", "2", "3"] {
        assert!(f.path(&format!("r1/grid_sigma_{sigma}.png")).exists());
        assert!(f.path(&format!("r1/gradnorm_sigma_{sigma}.png")).exists());
    }
    for name in ["scene.png", "overlay_0_sc.png", "grid_sigma_2.png"] {
        assert_eq!(
            fs::read(f.path(&format!("r1/{name}"))).unwrap(),
            fs::read(f.path(&format!("r2/{name}"))).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let f = Fixture::new();
    let o = trajgan(&["train", s(&f.path("run.toml")), "--data", "x", "--variant", "bogus"]);
    assert_eq!(code(&o), 2);
    let o = trajgan(&["frobnicate"]);
    assert_eq!(code(&o), 2);
    let bad = f.with_run_config("bad.toml", |t| t.replace("lambda_gp = 10.0", "lambda_gp = -1.0"));
    assert_eq!(code(&f.gen_data("d")), 0);
    let o = trajgan(&["train", s(&bad), "--data", s(&f.path("d")), "--out", s(&f.path("r"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("lambda_gp"));
}
