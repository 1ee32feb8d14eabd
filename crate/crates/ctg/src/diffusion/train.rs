//! Training: clean-trajectory prediction with the loss on normalized
//! actions plus `lambda_state` times the loss on normalized rollout states.

use super::checkpoint::{load_model, save_model, TrainerState};
use super::dataset::{Dataset, TrainExample};
use super::net::{self, ArchConfig, NetVars, ParamStore};
use super::normalizer::Normalizer;
use super::sample::{self, forward_corrupt, standard_normal, Model};
use super::schedule::VarianceSchedule;
use super::DiffusionError;
use crate::autodiff::{Tape, Var};
use crate::dynamics::{self, AgentState};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight on the state part of the loss; 0 reproduces the action-only
    /// ablation.
    pub lambda_state: f64,
    pub seed: u64,
    /// Checkpoint every this many steps (0 = final checkpoint only).
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 64,
            learning_rate: 1e-3,
            lambda_state: 1.0,
            seed: 0,
            checkpoint_every: 1000,
            log_every: 50,
        }
    }
}

pub struct TrainOutput {
    pub model: Model,
    /// `(step, batch loss)` samples.
    pub history: Vec<(usize, f64)>,
    pub final_step: usize,
}

/// Convert a `(T, C)` array to the tape's `[1, C, T]` layout.
fn to_c_t(a: &Array2<f64>) -> ArrayD<f64> {
    let (t_len, c_len) = a.dim();
    ArrayD::from_shape_fn(IxDyn(&[1, c_len, t_len]), |idx| a[[idx[2], idx[1]]])
}

/// Build the per-example training loss on the tape.
pub(crate) fn example_loss(
    tape: &mut Tape,
    vars: &NetVars,
    arch: &ArchConfig,
    normalizer: &Normalizer,
    schedule: &VarianceSchedule,
    example: &TrainExample,
    k: usize,
    eps: &Array2<f64>,
    lambda_state: f64,
) -> Result<Var, DiffusionError> {
    let s0 = example.context.s0();

    // Targets.
    let a0_norm = normalizer.normalize_actions(example.actions.view());
    let gt_states = dynamics::rollout(s0, example.actions.view(), arch.dt)?;
    let s0_norm = normalizer.normalize_states(gt_states.view());

    // Noisy input at step k, with its rolled-out states.
    let ak_norm = forward_corrupt(&a0_norm, k, schedule, eps)?;
    let input = sample::assemble_input(arch, normalizer, &ak_norm, example.context.v0)?;

    let feat = net::encode_context(tape, vars, arch, &[&example.context])?;
    let kemb = tape.constant(net::k_embedding(arch, &[k]));
    let cond = net::cond_features(tape, vars, kemb, feat)?;
    let input_v = tape.constant(to_c_t(&input));
    let pred = net::denoise(tape, vars, arch, input_v, cond)?;

    let action_target = tape.constant(to_c_t(&a0_norm));
    let action_loss = tape.mean_sq_diff(pred, action_target);

    // State supervision through the rollout of the predicted actions.
    let (dscale, dshift) = normalizer.action_denorm_affine();
    let pred_phys = tape.affine_channels(pred, &dscale, &dshift);
    let pred_states = tape.rollout_unicycle(pred_phys, vec![s0], arch.dt)?;
    let (nscale, nshift) = normalizer.state_norm_affine();
    let pred_states_norm = tape.affine_channels(pred_states, &nscale, &nshift);
    let state_target = tape.constant(to_c_t(&s0_norm));
    let state_loss = tape.mean_sq_diff(pred_states_norm, state_target);

    Ok(tape.add_scaled(action_loss, state_loss, lambda_state))
}

pub(crate) struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
    pub m: HashMap<String, ArrayD<f64>>,
    pub v: HashMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: HashMap::new(), v: HashMap::new() }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &HashMap<String, ArrayD<f64>>) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = params.names().to_vec();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let p = params.get(&name).clone();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            m.zip_mut_with(g, |m, g| *m = 0.9 * *m + 0.1 * g);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            v.zip_mut_with(g, |v, g| *v = 0.999 * *v + 0.001 * g * g);

            let target = params.get_mut(&name);
            for ((t, m), v) in target.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mh = m / b1t;
                let vh = v / b2t;
                *t -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Train (or resume) a model on a dataset. The returned parameters are
/// quantized to the f32 grid so checkpoint round-trips are lossless.
pub fn train(
    dataset: &Dataset,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    checkpoint_path: Option<&Path>,
    resume_from: Option<&Path>,
) -> Result<TrainOutput, DiffusionError> {
    arch.validate().map_err(DiffusionError::BadConfig)?;
    if dataset.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    if dataset.horizon != arch.horizon
        || dataset.history != arch.history
        || dataset.neighbors != arch.neighbors
        || dataset.raster_size != arch.raster_size
    {
        return Err(DiffusionError::BadConfig(format!(
            "dataset geometry (T={}, H={}, M={}, R={}) does not match the architecture",
            dataset.horizon, dataset.history, dataset.neighbors, dataset.raster_size
        )));
    }

    let schedule = VarianceSchedule::cosine(arch.diffusion_steps);
    let (mut params, normalizer, mut adam, start_step) = match resume_from {
        Some(path) => {
            let (model, trainer) = load_model(path)?;
            if model.arch != *arch {
                return Err(DiffusionError::ArchMismatch(
                    "resume checkpoint was trained with a different architecture".into(),
                ));
            }
            let trainer = trainer.unwrap_or_default();
            let mut adam = Adam::new(cfg.learning_rate);
            adam.m = trainer.adam_m;
            adam.v = trainer.adam_v;
            adam.t = trainer.step;
            (model.params, model.normalizer, adam, trainer.step)
        }
        None => (
            net::init_params(arch, cfg.seed),
            dataset.fit_normalizer()?,
            Adam::new(cfg.learning_rate),
            0,
        ),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(start_step as u64));
    let mut history = Vec::new();
    let k_max = schedule.steps();
    let n = dataset.len();

    for local in 0..cfg.steps {
        let step = start_step + local + 1;
        // Draw the whole batch plan up front so the RNG stream does not
        // depend on thread scheduling.
        let plan: Vec<(usize, usize, Array2<f64>)> = (0..cfg.batch_size)
            .map(|_| {
                let idx = rng.gen_range(0..n);
                let k = rng.gen_range(1..=k_max);
                let eps = standard_normal(&mut rng, arch.horizon, 2);
                (idx, k, eps)
            })
            .collect();

        let results: Vec<Result<(f64, Vec<(String, ArrayD<f64>)>), DiffusionError>> = plan
            .par_iter()
            .map(|(idx, k, eps)| {
                let mut tape = Tape::new();
                let vars = net::stage_params(&mut tape, &params, true);
                let loss = example_loss(
                    &mut tape,
                    &vars,
                    arch,
                    &normalizer,
                    &schedule,
                    &dataset.examples[*idx],
                    *k,
                    eps,
                    cfg.lambda_state,
                )?;
                let loss_value = tape.value(loss)[[]];
                let mut grads = tape.backward(loss);
                let mut out = Vec::new();
                for (name, var) in vars.iter() {
                    if let Some(g) = crate::autodiff::take_grad(&mut grads, *var) {
                        out.push((name.clone(), g));
                    }
                }
                Ok((loss_value, out))
            })
            .collect();

        let mut batch_loss = 0.0;
        let mut grad_sum: HashMap<String, ArrayD<f64>> = HashMap::new();
        for r in results {
            let (loss_value, grads) = r?;
            batch_loss += loss_value;
            for (name, g) in grads {
                match grad_sum.get_mut(&name) {
                    Some(acc) => *acc += &g,
                    None => {
                        grad_sum.insert(name, g);
                    }
                }
            }
        }
        batch_loss /= cfg.batch_size as f64;
        if !batch_loss.is_finite() {
            return Err(DiffusionError::NonFiniteLoss { step, loss: batch_loss });
        }
        let scale = 1.0 / cfg.batch_size as f64;
        for g in grad_sum.values_mut() {
            g.mapv_inplace(|x| x * scale);
        }
        adam.step(&mut params, &grad_sum);

        if cfg.log_every > 0 && (local % cfg.log_every == 0 || local + 1 == cfg.steps) {
            history.push((step, batch_loss));
        }
        if let (Some(path), true) = (
            checkpoint_path,
            cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && local + 1 != cfg.steps,
        ) {
            let model = Model::new(arch.clone(), params.clone(), schedule.clone(), normalizer.clone());
            let trainer = TrainerState { step, adam_m: adam.m.clone(), adam_v: adam.v.clone() };
            save_model(path, &model, Some(&trainer))?;
        }
    }

    params.quantize_f32();
    let final_step = start_step + cfg.steps;
    let model = Model::new(arch.clone(), params, schedule, normalizer);
    if let Some(path) = checkpoint_path {
        let trainer = TrainerState {
            step: final_step,
            adam_m: adam.m.clone(),
            adam_v: adam.v.clone(),
        };
        save_model(path, &model, Some(&trainer))?;
    }
    Ok(TrainOutput { model, history, final_step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::context::SceneContext;

    fn tiny_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ds = Dataset::new(0.1, 10, 2, 1, 16);
        for _ in 0..n {
            let mut ctx = SceneContext::zeroed(1, 2, 16);
            ctx.mask = vec![1.0, 0.0];
            ctx.v0 = rng.gen_range(1.0..5.0);
            ctx.raster.mapv_inplace(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
            ctx.past.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
            ctx.apply_mask();
            let actions = Array2::from_shape_fn((10, 2), |_| rng.gen_range(-0.5f64..0.5));
            ds.push(TrainExample { context: ctx, actions });
        }
        ds
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let arch = ArchConfig::tiny();
        let ds = tiny_dataset(1, 1);
        let normalizer = ds.fit_normalizer().unwrap();
        let schedule = VarianceSchedule::cosine(arch.diffusion_steps);
        let params = net::init_params(&arch, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = 7;
        let eps = standard_normal(&mut rng, arch.horizon, 2);

        let eval = |params: &ParamStore| -> f64 {
            let mut tape = Tape::new();
            let vars = net::stage_params(&mut tape, params, false);
            let loss = example_loss(
                &mut tape, &vars, &arch, &normalizer, &schedule, &ds.examples[0], k, &eps, 1.0,
            )
            .unwrap();
            tape.value(loss)[[]]
        };

        // Analytic gradients.
        let mut tape = Tape::new();
        let vars = net::stage_params(&mut tape, &params, true);
        let loss = example_loss(
            &mut tape, &vars, &arch, &normalizer, &schedule, &ds.examples[0], k, &eps, 1.0,
        )
        .unwrap();
        let mut grads = tape.backward(loss);
        let analytic: HashMap<String, ArrayD<f64>> = vars
            .iter()
            .filter_map(|(n, v)| crate::autodiff::take_grad(&mut grads, *v).map(|g| (n.clone(), g)))
            .collect();

        // Probe a few entries of every weight array.
        let h = 1e-3;
        for name in params.names() {
            let g = analytic.get(name).unwrap_or_else(|| panic!("no grad for {name}"));
            let len = params.get(name).len();
            let stride = (len / 4).max(1);
            for flat in (0..len).step_by(stride) {
                let mut plus = params.clone();
                plus.get_mut(name).as_slice_mut().unwrap()[flat] += h;
                let mut minus = params.clone();
                minus.get_mut(name).as_slice_mut().unwrap()[flat] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = g.as_slice().unwrap()[flat];
                let denom = fd.abs().max(a.abs()).max(1e-4);
                assert!(
                    (fd - a).abs() / denom < 1e-3,
                    "{name}[{flat}]: fd {fd} vs analytic {a}"
                );
            }
        }
    }

    #[test]
    fn overfits_a_single_example() {
        let arch = ArchConfig::tiny();
        let ds = tiny_dataset(1, 9);
        let cfg = TrainConfig {
            steps: 500,
            batch_size: 4,
            learning_rate: 2e-3,
            lambda_state: 1.0,
            seed: 4,
            checkpoint_every: 0,
            log_every: 100,
        };
        let out = train(&ds, &arch, &cfg, None, None).unwrap();
        let final_loss = out.history.last().unwrap().1;
        assert!(final_loss < 1e-3, "final loss {final_loss}");
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let arch = ArchConfig::tiny();
        let ds = tiny_dataset(4, 12);
        let cfg = TrainConfig {
            steps: 20,
            batch_size: 3,
            learning_rate: 1e-3,
            lambda_state: 1.0,
            seed: 77,
            checkpoint_every: 0,
            log_every: 1,
        };
        let a = train(&ds, &arch, &cfg, None, None).unwrap();
        let b = train(&ds, &arch, &cfg, None, None).unwrap();
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn action_only_ablation_ignores_state_error() {
        // With lambda 0 the loss must not change when the state target
        // would: gradient flows only through the action branch.
        let arch = ArchConfig::tiny();
        let ds = tiny_dataset(1, 21);
        let normalizer = ds.fit_normalizer().unwrap();
        let schedule = VarianceSchedule::cosine(arch.diffusion_steps);
        let params = net::init_params(&arch, 0);
        let eps = Array2::zeros((arch.horizon, 2));

        let mut tape = Tape::new();
        let vars = net::stage_params(&mut tape, &params, false);
        let with_state = example_loss(
            &mut tape, &vars, &arch, &normalizer, &schedule, &ds.examples[0], 3, &eps, 1.0,
        )
        .unwrap();
        let without_state = example_loss(
            &mut tape, &vars, &arch, &normalizer, &schedule, &ds.examples[0], 3, &eps, 0.0,
        )
        .unwrap();
        assert!(tape.value(with_state)[[]] > tape.value(without_state)[[]]);
    }

    #[test]
    fn resume_continues_step_counter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.ctgc");
        let arch = ArchConfig::tiny();
        let ds = tiny_dataset(2, 30);
        let cfg = TrainConfig {
            steps: 5,
            batch_size: 2,
            learning_rate: 1e-3,
            lambda_state: 1.0,
            seed: 1,
            checkpoint_every: 0,
            log_every: 1,
        };
        let first = train(&ds, &arch, &cfg, Some(&path), None).unwrap();
        assert_eq!(first.final_step, 5);
        let second = train(&ds, &arch, &cfg, Some(&path), Some(&path)).unwrap();
        assert_eq!(second.final_step, 10);
        assert_eq!(second.history.first().unwrap().0, 6);
    }
}
