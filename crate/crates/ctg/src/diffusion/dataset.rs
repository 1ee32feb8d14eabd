//! Training datasets: (context, future actions) pairs in the shared
//! container format, one record per example.

use super::container::{Container, ContainerError};
use super::context::SceneContext;
use super::normalizer::Normalizer;
use super::DiffusionError;
use crate::dynamics::{self, AgentState};
use ndarray::{Array2, ArrayD, IxDyn};
use serde_json::json;
use std::path::Path;

/// One supervised example: conditioning context plus the physical future
/// action trajectory `(T, 2)` (states follow by rollout).
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub context: SceneContext,
    pub actions: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub examples: Vec<TrainExample>,
    pub dt: f64,
    pub horizon: usize,
    pub history: usize,
    pub neighbors: usize,
    pub raster_size: usize,
}

impl Dataset {
    pub fn new(dt: f64, horizon: usize, history: usize, neighbors: usize, raster_size: usize) -> Self {
        Self { examples: Vec::new(), dt, horizon, history, neighbors, raster_size }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn push(&mut self, example: TrainExample) {
        assert_eq!(example.actions.dim(), (self.horizon, 2));
        self.examples.push(example);
    }

    /// Channel statistics over all examples; states come from rolling the
    /// actions out in the agent frame.
    pub fn fit_normalizer(&self) -> Result<Normalizer, DiffusionError> {
        if self.examples.is_empty() {
            return Err(DiffusionError::EmptyDataset);
        }
        let mut actions = Vec::with_capacity(self.examples.len());
        let mut states = Vec::with_capacity(self.examples.len());
        for ex in &self.examples {
            let s0 = AgentState::new(0.0, 0.0, ex.context.v0, 0.0);
            states.push(dynamics::rollout(s0, ex.actions.view(), self.dt)?);
            actions.push(ex.actions.clone());
        }
        Ok(Normalizer::fit(
            actions.iter().map(|a| a.view()),
            states.iter().map(|s| s.view()),
        ))
    }

    pub fn save(&self, path: &Path) -> Result<(), ContainerError> {
        let n = self.examples.len();
        let r = self.raster_size;
        let slots = self.neighbors + 1;
        let hsteps = self.history + 1;
        let t = self.horizon;

        let mut raster = vec![0f32; n * 3 * r * r];
        let mut past = vec![0f32; n * slots * hsteps * 4];
        let mut mask = vec![0f32; n * slots];
        let mut v0 = vec![0f32; n];
        let mut actions = vec![0f32; n * t * 2];
        for (i, ex) in self.examples.iter().enumerate() {
            for (j, v) in ex.context.raster.iter().enumerate() {
                raster[i * 3 * r * r + j] = *v as f32;
            }
            for (j, v) in ex.context.past.iter().enumerate() {
                past[i * slots * hsteps * 4 + j] = *v as f32;
            }
            for (j, v) in ex.context.mask.iter().enumerate() {
                mask[i * slots + j] = *v as f32;
            }
            v0[i] = ex.context.v0 as f32;
            for (j, v) in ex.actions.iter().enumerate() {
                actions[i * t * 2 + j] = *v as f32;
            }
        }

        let meta = json!({
            "kind": "dataset",
            "count": n,
            "dt": self.dt,
            "horizon": t,
            "history": self.history,
            "neighbors": self.neighbors,
            "raster_size": r,
        });
        let mut c = Container::new(meta);
        c.insert("raster", &[n, 3, r, r], raster);
        c.insert("past", &[n, slots, hsteps, 4], past);
        c.insert("mask", &[n, slots], mask);
        c.insert("v0", &[n], v0);
        c.insert("actions", &[n, t, 2], actions);
        c.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self, DiffusionError> {
        let c = Container::read_from(path)?;
        let meta = &c.meta;
        let get = |k: &str| -> Result<usize, DiffusionError> {
            meta.get(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| DiffusionError::BadConfig(format!("dataset meta missing `{k}`")))
        };
        let n = get("count")?;
        let t = get("horizon")?;
        let history = get("history")?;
        let neighbors = get("neighbors")?;
        let r = get("raster_size")?;
        let dt = meta
            .get("dt")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| DiffusionError::BadConfig("dataset meta missing `dt`".into()))?;

        let slots = neighbors + 1;
        let hsteps = history + 1;
        let tensor = |name: &str| -> Result<&(Vec<usize>, Vec<f32>), DiffusionError> {
            c.tensors
                .get(name)
                .ok_or_else(|| DiffusionError::BadConfig(format!("dataset tensor `{name}` missing")))
        };
        let raster = tensor("raster")?;
        let past = tensor("past")?;
        let mask = tensor("mask")?;
        let v0 = tensor("v0")?;
        let actions = tensor("actions")?;

        let mut ds = Dataset::new(dt, t, history, neighbors, r);
        for i in 0..n {
            let mut ctx = SceneContext::zeroed(neighbors, history, r);
            ctx.raster = ArrayD::from_shape_fn(IxDyn(&[3, r, r]), |idx| {
                raster.1[i * 3 * r * r + (idx[0] * r + idx[1]) * r + idx[2]] as f64
            });
            ctx.past = ArrayD::from_shape_fn(IxDyn(&[slots, hsteps, 4]), |idx| {
                past.1[i * slots * hsteps * 4 + (idx[0] * hsteps + idx[1]) * 4 + idx[2]] as f64
            });
            ctx.mask = (0..slots).map(|s| mask.1[i * slots + s] as f64).collect();
            ctx.v0 = v0.1[i] as f64;
            let acts = Array2::from_shape_fn((t, 2), |(ti, ci)| {
                actions.1[i * t * 2 + ti * 2 + ci] as f64
            });
            ds.push(TrainExample { context: ctx, actions: acts });
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ds = Dataset::new(0.1, 8, 2, 1, 16);
        for _ in 0..n {
            let mut ctx = SceneContext::zeroed(1, 2, 16);
            ctx.raster.mapv_inplace(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
            ctx.mask = vec![1.0, 0.0];
            ctx.past.mapv_inplace(|_| rng.gen_range(-1.0f64..1.0));
            ctx.apply_mask();
            ctx.v0 = rng.gen_range(0.0..8.0);
            let actions = Array2::from_shape_fn((8, 2), |_| rng.gen_range(-1.0f64..1.0));
            // Keep values on the f32 grid so save/load is lossless.
            let actions = actions.mapv(|v| v as f32 as f64);
            ctx.past.mapv_inplace(|v| v as f32 as f64);
            ctx.v0 = ctx.v0 as f32 as f64;
            ds.push(TrainExample { context: ctx, actions });
        }
        ds
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.ctgd");
        let ds = random_dataset(5, 3);
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back.len(), 5);
        for (a, b) in ds.examples.iter().zip(back.examples.iter()) {
            assert_eq!(a.actions, b.actions);
            assert_eq!(a.context.raster, b.context.raster);
            assert_eq!(a.context.past, b.context.past);
            assert_eq!(a.context.mask, b.context.mask);
            assert_eq!(a.context.v0, b.context.v0);
        }
        // Saving the loaded dataset reproduces the file byte for byte.
        let path2 = dir.path().join("data2.ctgd");
        back.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn empty_dataset_cannot_fit_normalizer() {
        let ds = Dataset::new(0.1, 8, 2, 1, 16);
        assert!(matches!(ds.fit_normalizer(), Err(DiffusionError::EmptyDataset)));
    }
}
