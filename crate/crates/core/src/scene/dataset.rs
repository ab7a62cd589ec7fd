//! Scene datasets on disk: `scenes.jsonl` (one record per line, in index
//! order) plus `manifest.json`.
//!
//! Record schema (version 1):
//!
//! | field   | type   | meaning                                   |
//! |---------|--------|-------------------------------------------|
//! | `index` | int    | position in the dataset, from 0           |
//! | `split` | string | `train`, `val` or `test`                  |
//! | `scene` | object | [`Scene`] as serialized by serde          |
//!
//! Splits are assigned by `index mod 5`: residues 0-2 train, 3 val, 4 test.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{generate_scene_rng, Scene, SynthConfig, Template};
use crate::error::{Error, Result};
use crate::tensor::checkpoint::hex;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const RECORDS_FILE: &str = "scenes.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn of_index(index: usize) -> Split {
        match index % 5 {
            0..=2 => Split::Train,
            3 => Split::Val,
            _ => Split::Test,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_scenes: usize,
    pub seed: u64,
    /// Relative template weights; templates left out are never drawn.
    pub template_mix: BTreeMap<Template, f64>,
    #[serde(default)]
    pub synth: SynthConfig,
}

impl DatasetConfig {
    /// Equal weight on every template.
    pub fn uniform(n_scenes: usize, seed: u64) -> Self {
        DatasetConfig {
            n_scenes,
            seed,
            template_mix: Template::ALL.iter().map(|&t| (t, 1.0)).collect(),
            synth: SynthConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_scenes == 0 {
            return Err(Error::Config("n_scenes must be positive".into()));
        }
        let total: f64 = self.template_mix.values().sum();
        if self.template_mix.values().any(|w| !(w.is_finite() && *w >= 0.0)) || !(total > 0.0) {
            return Err(Error::Config(
                "template_mix weights must be non-negative with a positive sum".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub index: usize,
    pub split: Split,
    pub scene: Scene,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub template_counts: BTreeMap<Template, usize>,
    pub split_counts: BTreeMap<Split, usize>,
    pub records_file: String,
    /// SHA-256 of the records file, hex.
    pub sha256: String,
}

/// Record `index` depends only on `(seed, index)`.
pub fn generate_record(cfg: &DatasetConfig, index: usize) -> Record {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let total: f64 = cfg.template_mix.values().sum();
    let mut u = rng.random_range(0.0..total);
    let mut template = *cfg
        .template_mix
        .iter()
        .rev()
        .find(|(_, w)| **w > 0.0)
        .expect("validated mix")
        .0;
    for (&t, &w) in &cfg.template_mix {
        if u < w {
            template = t;
            break;
        }
        u -= w;
    }
    Record {
        index,
        split: Split::of_index(index),
        scene: generate_scene_rng(template, &mut rng, &cfg.synth),
    }
}

/// Writes the dataset into `dir` (created if missing) and returns its manifest.
pub fn build_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(RECORDS_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    let mut hasher = Sha256::new();
    let mut template_counts = BTreeMap::new();
    let mut split_counts = BTreeMap::new();
    for index in 0..cfg.n_scenes {
        let rec = generate_record(cfg, index);
        *template_counts.entry(rec.scene.template).or_insert(0) += 1;
        *split_counts.entry(rec.split).or_insert(0) += 1;
        let mut line = serde_json::to_string(&rec)?;
        line.push('\n');
        hasher.update(line.as_bytes());
        out.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))?;
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        config: cfg.clone(),
        template_counts,
        split_counts,
        records_file: RECORDS_FILE.to_string(),
        sha256: hex(&hasher.finalize()),
    };
    let mpath = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub records: Vec<Record>,
}

impl Dataset {
    /// Loads and verifies a dataset directory written by [`build_dataset`].
    pub fn read(dir: &Path) -> Result<Dataset> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: mpath.clone(),
            detail: e.to_string(),
        })?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Format {
                path: mpath,
                detail: format!("unsupported format version {}", manifest.format_version),
            });
        }
        let path = dir.join(&manifest.records_file);
        let found = file_sha256(&path)?;
        if found != manifest.sha256 {
            return Err(Error::HashMismatch {
                what: "dataset records",
                expected: manifest.sha256.clone(),
                found,
            });
        }
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Format {
                path: path.clone(),
                detail: format!("line {}: {e}", n + 1),
            })?;
            rec.scene.validate()?;
            records.push(rec);
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
            records,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&Scene> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| &r.scene)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_three_one_one() {
        let mut c = BTreeMap::new();
        for i in 0..100 {
            *c.entry(Split::of_index(i)).or_insert(0) += 1;
        }
        assert_eq!(c[&Split::Train], 60);
        assert_eq!(c[&Split::Val], 20);
        assert_eq!(c[&Split::Test], 20);
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig::uniform(12, 7);
        let m = build_dataset(&cfg, dir.path()).unwrap();
        let ds = Dataset::read(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        for r in &ds.records {
            assert_eq!(r, &generate_record(&cfg, r.index));
        }
        assert_eq!(m.template_counts.values().sum::<usize>(), 12);
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(&DatasetConfig::uniform(3, 1), dir.path()).unwrap();
        let p = dir.path().join(RECORDS_FILE);
        let mut text = std::fs::read_to_string(&p).unwrap();
        text.push('\n');
        std::fs::write(&p, text).unwrap();
        assert!(matches!(
            Dataset::read(dir.path()),
            Err(Error::HashMismatch { .. })
        ));
    }

    #[test]
    fn single_template_mix() {
        let mut cfg = DatasetConfig::uniform(10, 3);
        cfg.template_mix = BTreeMap::from([(Template::RightTurnOnly, 1.0)]);
        assert!((0..10).all(|i| generate_record(&cfg, i).scene.template == Template::RightTurnOnly));
        cfg.template_mix.clear();
        assert!(cfg.validate().is_err());
    }
}
