//! Checkpoint save/load on the shared container format.
//!
//! The JSON header carries the architecture, schedule betas, normalizer
//! statistics, and the training step; weight arrays live in the f32
//! payload under `param.<name>`, optimizer moments under `adam_m.<name>` /
//! `adam_v.<name>`.

use super::container::Container;
use super::net::{param_shapes, ArchConfig, ParamStore};
use super::normalizer::Normalizer;
use super::sample::Model;
use super::schedule::VarianceSchedule;
use super::DiffusionError;
use ndarray::{ArrayD, IxDyn};
use serde_json::json;
use std::collections::HashMap;
use std::path::Path;

/// Optimizer state persisted alongside the weights so training can resume
/// with a continuing step counter.
#[derive(Debug, Clone, Default)]
pub struct TrainerState {
    pub step: usize,
    pub adam_m: HashMap<String, ArrayD<f64>>,
    pub adam_v: HashMap<String, ArrayD<f64>>,
}

fn to_f32(a: &ArrayD<f64>) -> Vec<f32> {
    a.iter().map(|v| *v as f32).collect()
}

fn from_f32(shape: &[usize], data: &[f32]) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(shape), data.iter().map(|v| *v as f64).collect())
        .expect("tensor shape")
}

pub fn save_model(
    path: &Path,
    model: &Model,
    trainer: Option<&TrainerState>,
) -> Result<(), DiffusionError> {
    let meta = json!({
        "kind": "checkpoint",
        "arch": serde_json::to_value(&model.arch).expect("arch json"),
        "schedule": { "betas": model.schedule.betas() },
        "normalizer": serde_json::to_value(&model.normalizer).expect("normalizer json"),
        "train_step": trainer.map(|t| t.step),
    });
    let mut c = Container::new(meta);
    for (name, value) in model.params.iter() {
        c.insert(&format!("param.{name}"), value.shape(), to_f32(value));
    }
    if let Some(trainer) = trainer {
        for (name, value) in &trainer.adam_m {
            c.insert(&format!("adam_m.{name}"), value.shape(), to_f32(value));
        }
        for (name, value) in &trainer.adam_v {
            c.insert(&format!("adam_v.{name}"), value.shape(), to_f32(value));
        }
    }
    c.write_to(path)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(Model, Option<TrainerState>), DiffusionError> {
    let c = Container::read_from(path)?;
    let arch: ArchConfig = serde_json::from_value(c.meta["arch"].clone())
        .map_err(|e| DiffusionError::ArchMismatch(format!("bad arch header: {e}")))?;
    let betas: Vec<f64> = serde_json::from_value(c.meta["schedule"]["betas"].clone())
        .map_err(|e| DiffusionError::ArchMismatch(format!("bad schedule header: {e}")))?;
    let normalizer: Normalizer = serde_json::from_value(c.meta["normalizer"].clone())
        .map_err(|e| DiffusionError::ArchMismatch(format!("bad normalizer header: {e}")))?;
    let schedule = VarianceSchedule::from_betas(betas);

    let mut params = ParamStore::default();
    for (name, shape) in param_shapes(&arch) {
        let key = format!("param.{name}");
        let (got_shape, data) = c
            .tensor(&key)
            .ok_or_else(|| DiffusionError::ArchMismatch(format!("checkpoint missing `{key}`")))?;
        if got_shape != shape.as_slice() {
            return Err(DiffusionError::ArchMismatch(format!(
                "tensor `{key}` has shape {got_shape:?}, architecture expects {shape:?}"
            )));
        }
        params.insert(&name, from_f32(got_shape, data));
    }

    let step = c.meta["train_step"].as_u64().map(|s| s as usize);
    let trainer = step.map(|step| {
        let mut state = TrainerState { step, ..TrainerState::default() };
        for (key, (shape, data)) in &c.tensors {
            if let Some(name) = key.strip_prefix("adam_m.") {
                state.adam_m.insert(name.to_string(), from_f32(shape, data));
            } else if let Some(name) = key.strip_prefix("adam_v.") {
                state.adam_v.insert(name.to_string(), from_f32(shape, data));
            }
        }
        state
    });

    Ok((Model::new(arch, params, schedule, normalizer), trainer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::net::init_params;

    fn quantized_model() -> Model {
        let arch = ArchConfig::tiny();
        let mut params = init_params(&arch, 5);
        params.quantize_f32();
        Model::new(
            arch.clone(),
            params,
            VarianceSchedule::cosine(arch.diffusion_steps),
            Normalizer::identity(),
        )
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ctgc");
        let model = quantized_model();
        save_model(&path, &model, None).unwrap();
        let (loaded, trainer) = load_model(&path).unwrap();
        assert!(trainer.is_none());
        assert_eq!(loaded.arch, model.arch);
        assert_eq!(loaded.normalizer, model.normalizer);
        for (name, value) in model.params.iter() {
            assert_eq!(loaded.params.get(name), value, "{name}");
        }
        // Save -> load -> save reproduces identical bytes.
        let path2 = dir.path().join("model2.ctgc");
        save_model(&path2, &loaded, None).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn mismatched_architecture_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ctgc");
        let model = quantized_model();
        save_model(&path, &model, None).unwrap();

        // Corrupt the header so a wider network is expected.
        let mut c = Container::read_from(&path).unwrap();
        c.meta["arch"]["base_width"] = serde_json::json!(model.arch.base_width * 2);
        c.write_to(&path).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(matches!(err, DiffusionError::ArchMismatch(_)), "{err}");
    }
}
