//! Pre-rendered training examples and batch assembly.

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::models::{state_features, SCENE_CHANNELS, STATE_FEATURES};
use crate::raster::render::render_scene;
use crate::raster::RasterConfig;
use crate::scene::region::{target_region, DrivableRegion};
use crate::scene::Scene;
use crate::tensor::Tensor;

/// One scene reduced to model inputs. Rasters are cached in single
/// precision to keep a few thousand scenes in memory.
#[derive(Clone, Debug)]
pub struct Example {
    pub raster: Vec<f32>,
    pub states: Vec<f64>,
    pub gt: Vec<Point>,
    pub region: DrivableRegion,
}

#[derive(Clone, Debug)]
pub struct ExampleSet {
    pub raster: RasterConfig,
    pub examples: Vec<Example>,
}

/// Model inputs for a list of examples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// `[N, 3, H, W]`
    pub scene: Tensor,
    /// `[N, F]`
    pub states: Tensor,
    /// `[N, T, 2]`
    pub gt: Tensor,
}

impl ExampleSet {
    pub fn from_scenes(scenes: &[&Scene], raster: &RasterConfig) -> Result<ExampleSet> {
        raster.validate()?;
        let examples = scenes
            .iter()
            .map(|s| {
                let r = render_scene(s, s.target, raster)?;
                Ok(Example {
                    raster: r.data.iter().map(|&v| v as f32).collect(),
                    states: state_features(s),
                    gt: s.future.clone(),
                    region: target_region(s),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ExampleSet {
            raster: *raster,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let (h, w) = (self.raster.height, self.raster.width);
        let t = self.examples.first().map_or(0, |e| e.gt.len());
        let mut scene = Vec::with_capacity(indices.len() * SCENE_CHANNELS * h * w);
        let mut states = Vec::with_capacity(indices.len() * STATE_FEATURES);
        let mut gt = Vec::with_capacity(indices.len() * t * 2);
        for &i in indices {
            let e = self.examples.get(i).ok_or_else(|| {
                Error::Contract(format!("example {i} out of range ({})", self.len()))
            })?;
            if e.gt.len() != t {
                return Err(Error::shape("batch", "ragged ground-truth horizons".to_string()));
            }
            scene.extend(e.raster.iter().map(|&v| v as f64));
            states.extend_from_slice(&e.states);
            gt.extend(e.gt.iter().flatten());
        }
        let n = indices.len();
        Ok(Batch {
            indices: indices.to_vec(),
            scene: Tensor::new(vec![n, SCENE_CHANNELS, h, w], scene)?,
            states: Tensor::new(vec![n, STATE_FEATURES], states)?,
            gt: Tensor::new(vec![n, t, 2], gt)?,
        })
    }
}

/// Repeats every example along the batch axis `k` times in place:
/// `[a, b]` becomes `[a, a, b, b]` for `k = 2`.
pub fn repeat_each(t: &Tensor, k: usize) -> Tensor {
    let n = t.shape()[0];
    let per = t.len() / n.max(1);
    let mut shape = t.shape().to_vec();
    shape[0] = n * k;
    let mut data = Vec::with_capacity(t.len() * k);
    for row in t.data().chunks(per.max(1)).take(n) {
        for _ in 0..k {
            data.extend_from_slice(row);
        }
    }
    Tensor::new(shape, data).expect("shape preserved")
}
