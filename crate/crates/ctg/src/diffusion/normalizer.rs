//! Per-channel affine normalization for action and state trajectories, plus
//! the physical action envelope applied when actions are executed.

use crate::dynamics::{AgentAction, AgentState};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

const STD_FLOOR: f64 = 1e-6;

/// Channel statistics computed on the training set. The diffusion operates
/// on normalized actions; states are normalized only for the loss and the
/// denoiser input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub action_mean: [f64; 2],
    pub action_std: [f64; 2],
    pub state_mean: [f64; 4],
    pub state_std: [f64; 4],
}

impl Normalizer {
    pub fn identity() -> Self {
        Self {
            action_mean: [0.0; 2],
            action_std: [1.0; 2],
            state_mean: [0.0; 4],
            state_std: [1.0; 4],
        }
    }

    /// Fit channel means and stds over stacked `(T, C)` arrays; stds are
    /// floored at 1e-6.
    pub fn fit<'a>(
        actions: impl Iterator<Item = ArrayView2<'a, f64>> + Clone,
        states: impl Iterator<Item = ArrayView2<'a, f64>> + Clone,
    ) -> Self {
        fn stats<const C: usize>(
            arrays: impl Iterator<Item = ArrayView2<'_, f64>> + Clone,
        ) -> ([f64; C], [f64; C]) {
            let mut mean = [0.0; C];
            let mut count = 0usize;
            for a in arrays.clone() {
                for row in a.rows() {
                    for c in 0..C {
                        mean[c] += row[c];
                    }
                    count += 1;
                }
            }
            let n = count.max(1) as f64;
            for m in mean.iter_mut() {
                *m /= n;
            }
            let mut var = [0.0; C];
            for a in arrays {
                for row in a.rows() {
                    for c in 0..C {
                        let d = row[c] - mean[c];
                        var[c] += d * d;
                    }
                }
            }
            let mut std = [0.0; C];
            for c in 0..C {
                std[c] = (var[c] / n).sqrt().max(STD_FLOOR);
            }
            (mean, std)
        }
        let (action_mean, action_std) = stats::<2>(actions);
        let (state_mean, state_std) = stats::<4>(states);
        Self { action_mean, action_std, state_mean, state_std }
    }

    pub fn normalize_actions(&self, a: ArrayView2<f64>) -> Array2<f64> {
        apply(a, &self.action_mean, &self.action_std, true)
    }

    pub fn denormalize_actions(&self, a: ArrayView2<f64>) -> Array2<f64> {
        apply(a, &self.action_mean, &self.action_std, false)
    }

    pub fn normalize_states(&self, s: ArrayView2<f64>) -> Array2<f64> {
        apply(s, &self.state_mean, &self.state_std, true)
    }

    pub fn denormalize_states(&self, s: ArrayView2<f64>) -> Array2<f64> {
        apply(s, &self.state_mean, &self.state_std, false)
    }

    /// `(scale, shift)` turning normalized action channels into physical
    /// ones, for the tape's per-channel affine op.
    pub fn action_denorm_affine(&self) -> (Vec<f64>, Vec<f64>) {
        (self.action_std.to_vec(), self.action_mean.to_vec())
    }

    /// `(scale, shift)` turning physical state channels into normalized
    /// ones.
    pub fn state_norm_affine(&self) -> (Vec<f64>, Vec<f64>) {
        let scale: Vec<f64> = self.state_std.iter().map(|s| 1.0 / s).collect();
        let shift: Vec<f64> =
            self.state_mean.iter().zip(&self.state_std).map(|(m, s)| -m / s).collect();
        (scale, shift)
    }
}

fn apply<const C: usize>(
    a: ArrayView2<f64>,
    mean: &[f64; C],
    std: &[f64; C],
    forward: bool,
) -> Array2<f64> {
    assert_eq!(a.ncols(), C);
    let mut out = a.to_owned();
    for mut row in out.rows_mut() {
        for c in 0..C {
            row[c] = if forward { (row[c] - mean[c]) / std[c] } else { row[c] * std[c] + mean[c] };
        }
    }
    out
}

/// Physical action envelope: accel/yaw-rate bounds plus a speed floor at
/// zero, applied when actions are executed (never inside the smooth
/// guidance chain).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionLimits {
    pub max_accel: f64,
    pub max_yaw_rate: f64,
}

impl Default for ActionLimits {
    fn default() -> Self {
        Self { max_accel: 4.0, max_yaw_rate: 1.0 }
    }
}

impl ActionLimits {
    /// Clamp an action so the next state stays inside the envelope; the
    /// accel floor keeps `v + accel * dt >= 0`.
    pub fn saturate(&self, state: &AgentState, a: AgentAction, dt: f64) -> AgentAction {
        let accel = a
            .accel
            .clamp(-self.max_accel, self.max_accel)
            .max(-state.v / dt);
        let yaw_rate = a.yaw_rate.clamp(-self.max_yaw_rate, self.max_yaw_rate);
        AgentAction::new(accel, yaw_rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn normalize_roundtrip() {
        let acts = array![[1.0, -0.5], [2.0, 0.5], [0.0, 0.0]];
        let states = array![[1.0, 2.0, 3.0, 0.1], [-1.0, 0.0, 5.0, -0.2]];
        let n = Normalizer::fit([acts.view()].into_iter(), [states.view()].into_iter());
        let back = n.denormalize_actions(n.normalize_actions(acts.view()).view());
        for (a, b) in acts.iter().zip(back.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
        let back = n.denormalize_states(n.normalize_states(states.view()).view());
        for (a, b) in states.iter().zip(back.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn constant_channel_gets_floored_std() {
        let acts = array![[1.0, 0.0], [1.0, 0.0]];
        let states = array![[0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]];
        let n = Normalizer::fit([acts.view()].into_iter(), [states.view()].into_iter());
        assert!(n.action_std.iter().all(|s| *s >= STD_FLOOR));
        assert!(n.state_std.iter().all(|s| *s >= STD_FLOOR));
    }

    #[test]
    fn saturate_keeps_speed_nonnegative() {
        let limits = ActionLimits::default();
        let s = AgentState::new(0.0, 0.0, 0.2, 0.0);
        let a = limits.saturate(&s, AgentAction::new(-8.0, 3.0), 0.1);
        assert_abs_diff_eq!(a.accel, -0.2 / 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(a.yaw_rate, 1.0, epsilon = 1e-12);
        // Resulting speed is exactly zero.
        assert_abs_diff_eq!(s.v + a.accel * 0.1, 0.0, epsilon = 1e-12);
    }
}
