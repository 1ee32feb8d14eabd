//! Forward corruption and the unguided reverse process, packaged with the
//! trained weights as a [`Model`].
//!
//! The diffusion variable is the *normalized action* trajectory `(T, 2)`;
//! states are always rebuilt by rolling the denormalized actions out from
//! the agent-frame initial state, so every intermediate trajectory is
//! dynamically feasible.

use super::context::SceneContext;
use super::net::{self, ArchConfig, NetVars, ParamStore};
use super::normalizer::Normalizer;
use super::schedule::VarianceSchedule;
use super::DiffusionError;
use crate::autodiff::Tape;
use crate::dynamics::{self, AgentState, Trajectory};
use ndarray::{Array1, Array2, ArrayD, ArrayView1, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

/// `tau^k_a = sqrt(alpha_bar_k) tau^0_a + sqrt(1 - alpha_bar_k) eps`.
pub fn forward_corrupt(
    clean: &Array2<f64>,
    k: usize,
    schedule: &VarianceSchedule,
    eps: &Array2<f64>,
) -> Result<Array2<f64>, DiffusionError> {
    if clean.dim() != eps.dim() {
        return Err(DiffusionError::ShapeMismatch {
            what: "forward_corrupt noise",
            expected: format!("{:?}", clean.dim()),
            got: format!("{:?}", eps.dim()),
        });
    }
    let ab = schedule.alpha_bar(k);
    let signal = ab.sqrt();
    let noise = (1.0 - ab).sqrt();
    Ok(clean.mapv(|v| v * signal) + &eps.mapv(|v| v * noise))
}

/// Standard-normal array draw.
pub fn standard_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// A trained denoiser plus everything needed to run it.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: ArchConfig,
    pub params: ParamStore,
    pub schedule: VarianceSchedule,
    pub normalizer: Normalizer,
}

/// Cached per-agent context feature (the encoder runs once per replan, not
/// once per denoising step).
#[derive(Debug, Clone)]
pub struct ContextFeat {
    pub feature: Array1<f64>,
    pub v0: f64,
}

impl Model {
    pub fn new(
        arch: ArchConfig,
        params: ParamStore,
        schedule: VarianceSchedule,
        normalizer: Normalizer,
    ) -> Self {
        Self { arch, params, schedule, normalizer }
    }

    /// Encode a batch of contexts into conditioning features.
    pub fn encode_contexts(
        &self,
        contexts: &[&SceneContext],
    ) -> Result<Vec<ContextFeat>, DiffusionError> {
        let mut tape = Tape::new();
        let vars = net::stage_params(&mut tape, &self.params, false);
        let feat = net::encode_context(&mut tape, &vars, &self.arch, contexts)?;
        let value = tape.value(feat);
        Ok(contexts
            .iter()
            .enumerate()
            .map(|(i, ctx)| ContextFeat {
                feature: Array1::from_iter(
                    (0..self.arch.context_width).map(|c| value[[i, c]]),
                ),
                v0: ctx.v0,
            })
            .collect())
    }

    /// Stack normalized actions with the normalized states they roll out
    /// to: the `(T, 6)` denoiser input.
    pub fn assemble_input(
        &self,
        actions_norm: &Array2<f64>,
        v0: f64,
    ) -> Result<Array2<f64>, DiffusionError> {
        let t_len = actions_norm.nrows();
        let phys = self.normalizer.denormalize_actions(actions_norm.view());
        let states =
            dynamics::rollout(AgentState::new(0.0, 0.0, v0, 0.0), phys.view(), self.arch.dt)?;
        let states_norm = self.normalizer.normalize_states(states.view());
        let mut out = Array2::zeros((t_len, 6));
        for t in 0..t_len {
            out[[t, 0]] = actions_norm[[t, 0]];
            out[[t, 1]] = actions_norm[[t, 1]];
            for c in 0..4 {
                out[[t, 2 + c]] = states_norm[[t, c]];
            }
        }
        Ok(out)
    }

    /// One denoiser forward pass for a batch of agents sharing a diffusion
    /// step: predicted clean normalized actions, one `(T, 2)` per input.
    pub fn denoise_predict_batch(
        &self,
        inputs: &[Array2<f64>],
        k: usize,
        feats: &[&ContextFeat],
    ) -> Result<Vec<Array2<f64>>, DiffusionError> {
        assert_eq!(inputs.len(), feats.len());
        let b = inputs.len();
        let t_len = self.arch.horizon;
        let mut batch = ArrayD::zeros(IxDyn(&[b, 6, t_len]));
        for (bi, input) in inputs.iter().enumerate() {
            assert_eq!(input.dim(), (t_len, 6), "denoiser input must be (T, 6)");
            for t in 0..t_len {
                for c in 0..6 {
                    batch[[bi, c, t]] = input[[t, c]];
                }
            }
        }
        let mut feat_arr = ArrayD::zeros(IxDyn(&[b, self.arch.context_width]));
        for (bi, f) in feats.iter().enumerate() {
            for c in 0..self.arch.context_width {
                feat_arr[[bi, c]] = f.feature[c];
            }
        }

        let mut tape = Tape::new();
        let vars = net::stage_params(&mut tape, &self.params, false);
        let kemb = tape.constant(net::k_embedding(&self.arch, &vec![k; b]));
        let featv = tape.constant(feat_arr);
        let cond = net::cond_features(&mut tape, &vars, kemb, featv)?;
        let inputv = tape.constant(batch);
        let outv = net::denoise(&mut tape, &vars, &self.arch, inputv, cond)?;
        let out = tape.value(outv);

        Ok((0..b)
            .map(|bi| {
                Array2::from_shape_fn((t_len, 2), |(t, c)| out[[bi, c, t]])
            })
            .collect())
    }

    /// Single-agent variant of [`Model::denoise_predict_batch`].
    pub fn denoise_predict(
        &self,
        input: &Array2<f64>,
        k: usize,
        feat: &ContextFeat,
    ) -> Result<Array2<f64>, DiffusionError> {
        Ok(self.denoise_predict_batch(std::slice::from_ref(input), k, &[feat])?.remove(0))
    }

    /// Posterior mean of the reverse transition given the predicted clean
    /// sample.
    pub fn posterior_mean(
        &self,
        x0_hat: &Array2<f64>,
        x_k: &Array2<f64>,
        k: usize,
    ) -> Array2<f64> {
        let (c0, ck) = self.schedule.posterior_coeffs(k);
        x0_hat.mapv(|v| v * c0) + &x_k.mapv(|v| v * ck)
    }

    /// Predicted posterior mean for one agent at step `k` (denoiser forward
    /// plus posterior coefficients).
    pub fn predict_mean(
        &self,
        actions_norm: &Array2<f64>,
        k: usize,
        feat: &ContextFeat,
    ) -> Result<Array2<f64>, DiffusionError> {
        let input = self.assemble_input(actions_norm, feat.v0)?;
        let x0_hat = self.denoise_predict(&input, k, feat)?;
        Ok(self.posterior_mean(&x0_hat, actions_norm, k))
    }

    /// Sample around a mean with the schedule's fixed variance `beta_k`;
    /// the final step `k = 1` is deterministic.
    pub fn sample_with_variance(
        &self,
        mean: &Array2<f64>,
        k: usize,
        rng: &mut impl Rng,
    ) -> Array2<f64> {
        if k <= 1 {
            return mean.clone();
        }
        let sigma = self.schedule.beta(k).sqrt();
        let z = standard_normal(rng, mean.nrows(), mean.ncols());
        mean + &z.mapv(|v| v * sigma)
    }

    /// One unguided reverse step `k -> k-1` on normalized actions.
    pub fn reverse_step(
        &self,
        actions_norm: &Array2<f64>,
        k: usize,
        feat: &ContextFeat,
        rng: &mut impl Rng,
    ) -> Result<Array2<f64>, DiffusionError> {
        if k == 0 || k > self.schedule.steps() {
            return Err(DiffusionError::BadStep { k, steps: self.schedule.steps() });
        }
        let mean = self.predict_mean(actions_norm, k, feat)?;
        Ok(self.sample_with_variance(&mean, k, rng))
    }

    /// Full unguided sampling chain for one agent.
    pub fn sample_unguided(
        &self,
        feat: &ContextFeat,
        rng: &mut impl Rng,
    ) -> Result<Trajectory, DiffusionError> {
        let t_len = self.arch.horizon;
        let mut a = standard_normal(rng, t_len, 2);
        for k in (1..=self.schedule.steps()).rev() {
            a = self.reverse_step(&a, k, feat, rng)?;
        }
        self.to_trajectory(&a, feat.v0)
    }

    /// Convert normalized actions into a physical, dynamics-consistent
    /// trajectory in the agent frame.
    pub fn to_trajectory(
        &self,
        actions_norm: &Array2<f64>,
        v0: f64,
    ) -> Result<Trajectory, DiffusionError> {
        let phys = self.normalizer.denormalize_actions(actions_norm.view());
        Ok(Trajectory::from_actions(AgentState::new(0.0, 0.0, v0, 0.0), phys, self.arch.dt)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn corrupt_with_zero_noise_scales_input() {
        let schedule = VarianceSchedule::cosine(100);
        let clean = Array2::from_shape_fn((4, 2), |(t, c)| (t + c) as f64 * 0.3 - 0.5);
        let eps = Array2::zeros((4, 2));
        for k in [1, 17, 60, 100] {
            let out = forward_corrupt(&clean, k, &schedule, &eps).unwrap();
            let s = schedule.alpha_bar(k).sqrt();
            for (a, b) in out.iter().zip(clean.iter()) {
                assert_abs_diff_eq!(*a, b * s, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn corrupt_at_final_step_is_nearly_pure_noise() {
        let schedule = VarianceSchedule::cosine(100);
        let clean = Array2::from_elem((6, 2), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eps = standard_normal(&mut rng, 6, 2);
        let out = forward_corrupt(&clean, 100, &schedule, &eps).unwrap();
        for (o, e) in out.iter().zip(eps.iter()) {
            assert!((o - e).abs() < 0.01, "{o} vs {e}");
        }
    }

    #[test]
    fn corrupt_shape_mismatch_is_an_error() {
        let schedule = VarianceSchedule::cosine(10);
        let clean = Array2::zeros((4, 2));
        let eps = Array2::zeros((3, 2));
        assert!(forward_corrupt(&clean, 1, &schedule, &eps).is_err());
    }

    #[test]
    fn corrupt_moments_match_formula() {
        // Monte-Carlo check of per-entry mean and variance.
        let schedule = VarianceSchedule::cosine(100);
        let k = 40;
        let clean = Array2::from_elem((1, 1), 0.7);
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let eps = standard_normal(&mut rng, 1, 1);
            let out = forward_corrupt(&clean, k, &schedule, &eps).unwrap()[[0, 0]];
            sum += out;
            sum_sq += out * out;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let ab = schedule.alpha_bar(k);
        let true_mean = ab.sqrt() * 0.7;
        let true_var = 1.0 - ab;
        let mean_se = (true_var / n as f64).sqrt();
        let var_se = true_var * (2.0 / n as f64).sqrt();
        assert!((mean - true_mean).abs() <= 3.0 * mean_se, "mean {mean} vs {true_mean}");
        assert!((var - true_var).abs() <= 3.0 * var_se, "var {var} vs {true_var}");
    }

    /// Closed-form posterior-mean denoiser for a two-point mixture at +-1:
    /// `E[x0 | xk] = tanh(sqrt(alpha_bar_k) xk / (1 - alpha_bar_k))`.
    fn oracle_x0(xk: f64, ab: f64) -> f64 {
        (ab.sqrt() * xk / (1.0 - ab)).tanh()
    }

    #[test]
    fn oracle_denoiser_recovers_two_point_mixture() {
        let steps = 100;
        let schedule = VarianceSchedule::cosine(steps);
        let model = Model::new(
            ArchConfig::tiny(),
            ParamStore::default(),
            schedule.clone(),
            Normalizer::identity(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n_chains = 20_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n_chains {
            let mut x = standard_normal(&mut rng, 1, 1);
            for k in (1..=steps).rev() {
                let ab = schedule.alpha_bar(k);
                let x0_hat = Array2::from_elem((1, 1), oracle_x0(x[[0, 0]], ab));
                let mean = model.posterior_mean(&x0_hat, &x, k);
                x = model.sample_with_variance(&mean, k, &mut rng);
            }
            let v = x[[0, 0]];
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n_chains as f64;
        let var = sum_sq / n_chains as f64 - mean * mean;
        // True mixture: mean 0, variance 1.
        assert!(mean.abs() <= 0.05, "mixture mean off: {mean}");
        assert!((var - 1.0).abs() <= 0.05, "mixture variance off: {var}");
    }

    #[test]
    fn final_reverse_step_is_deterministic() {
        let arch = ArchConfig::tiny();
        let model = Model::new(
            arch.clone(),
            net::init_params(&arch, 3),
            VarianceSchedule::cosine(arch.diffusion_steps),
            Normalizer::identity(),
        );
        let feat = ContextFeat {
            feature: Array1::zeros(arch.context_width),
            v0: 1.0,
        };
        let a = Array2::from_shape_fn((arch.horizon, 2), |(t, c)| 0.1 * (t as f64) - c as f64);
        let mean = model.predict_mean(&a, 1, &feat).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = model.reverse_step(&a, 1, &feat, &mut rng).unwrap();
        assert_eq!(out, mean);
    }

    #[test]
    fn out_of_range_step_is_an_error() {
        let arch = ArchConfig::tiny();
        let model = Model::new(
            arch.clone(),
            net::init_params(&arch, 3),
            VarianceSchedule::cosine(arch.diffusion_steps),
            Normalizer::identity(),
        );
        let feat = ContextFeat { feature: Array1::zeros(arch.context_width), v0: 0.0 };
        let a = Array2::zeros((arch.horizon, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(model.reverse_step(&a, 0, &feat, &mut rng).is_err());
        assert!(model
            .reverse_step(&a, arch.diffusion_steps + 1, &feat, &mut rng)
            .is_err());
    }
}
