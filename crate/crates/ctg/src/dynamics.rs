//! Unicycle dynamics: state/action types, exact rollout, and rollout
//! vector-Jacobian products.
//!
//! The transition is explicit Euler with a fixed step `dt`:
//!
//! ```text
//! x' = x + v cos(theta) dt      v' = v + accel dt
//! y' = y + v sin(theta) dt      theta' = theta + yaw_rate dt
//! ```
//!
//! State trajectories in this crate are *always* rollouts of action
//! trajectories; [`Trajectory`] enforces that at construction.

use ndarray::{Array2, ArrayView2};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("expected shape {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("action trajectory must have at least one step")]
    Empty,
    #[error("dt must be positive, got {0}")]
    BadDt(f64),
    #[error("states are not the rollout of actions: max deviation {0:.3e} at step {1}")]
    Infeasible(f64, usize),
}

/// Vehicle state: position (m), speed (m/s), heading (rad).
///
/// `theta` is unwrapped internally; use [`wrap_angle`] for display.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub theta: f64,
}

impl AgentState {
    pub fn new(x: f64, y: f64, v: f64, theta: f64) -> Self {
        Self { x, y, v, theta }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.v.is_finite() && self.theta.is_finite()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.v, self.theta]
    }

    pub fn from_row(row: &[f64]) -> Self {
        Self::new(row[0], row[1], row[2], row[3])
    }
}

/// Vehicle control: acceleration (m/s^2) and yaw rate (rad/s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentAction {
    pub accel: f64,
    pub yaw_rate: f64,
}

impl AgentAction {
    pub fn new(accel: f64, yaw_rate: f64) -> Self {
        Self { accel, yaw_rate }
    }

    pub fn is_finite(&self) -> bool {
        self.accel.is_finite() && self.yaw_rate.is_finite()
    }
}

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut a = theta % two_pi;
    if a <= -PI {
        a += two_pi;
    } else if a > PI {
        a -= two_pi;
    }
    a
}

/// One explicit Euler step of the unicycle model.
pub fn step(s: AgentState, a: AgentAction, dt: f64) -> Result<AgentState, DynamicsError> {
    if dt <= 0.0 || !dt.is_finite() {
        return Err(DynamicsError::BadDt(dt));
    }
    if !s.is_finite() {
        return Err(DynamicsError::NonFinite("state"));
    }
    if !a.is_finite() {
        return Err(DynamicsError::NonFinite("action"));
    }
    Ok(AgentState {
        x: s.x + s.v * s.theta.cos() * dt,
        y: s.y + s.v * s.theta.sin() * dt,
        v: s.v + a.accel * dt,
        theta: s.theta + a.yaw_rate * dt,
    })
}

/// Roll actions `(T, 2)` out from `s0`, returning states `(T, 4)`.
///
/// `states[t]` is the state after `t + 1` steps; `s0` itself is not a row.
pub fn rollout(
    s0: AgentState,
    actions: ArrayView2<f64>,
    dt: f64,
) -> Result<Array2<f64>, DynamicsError> {
    let t_len = actions.nrows();
    if t_len == 0 {
        return Err(DynamicsError::Empty);
    }
    if actions.ncols() != 2 {
        return Err(DynamicsError::ShapeMismatch {
            expected: format!("({t_len}, 2)"),
            got: format!("({}, {})", t_len, actions.ncols()),
        });
    }
    let mut states = Array2::zeros((t_len, 4));
    let mut s = s0;
    for t in 0..t_len {
        let a = AgentAction::new(actions[[t, 0]], actions[[t, 1]]);
        s = step(s, a, dt)?;
        states[[t, 0]] = s.x;
        states[[t, 1]] = s.y;
        states[[t, 2]] = s.v;
        states[[t, 3]] = s.theta;
    }
    Ok(states)
}

/// Reverse-mode accumulation through the rollout recurrence.
///
/// Given a cotangent `(T, 4)` on the state trajectory, returns
/// `d <cotangent, states> / d actions` as a `(T, 2)` array. Exact; no
/// finite differencing involved.
pub fn rollout_vjp(
    s0: AgentState,
    actions: ArrayView2<f64>,
    dt: f64,
    cotangent: ArrayView2<f64>,
) -> Result<Array2<f64>, DynamicsError> {
    let t_len = actions.nrows();
    if cotangent.dim() != (t_len, 4) {
        return Err(DynamicsError::ShapeMismatch {
            expected: format!("({t_len}, 4)"),
            got: format!("({}, {})", cotangent.nrows(), cotangent.ncols()),
        });
    }
    let states = rollout(s0, actions, dt)?;

    // Adjoint of the state entering step t (lambda over s_t).
    let mut lam = [0.0f64; 4];
    let mut grad = Array2::zeros((t_len, 2));
    for t in (0..t_len).rev() {
        lam[0] += cotangent[[t, 0]];
        lam[1] += cotangent[[t, 1]];
        lam[2] += cotangent[[t, 2]];
        lam[3] += cotangent[[t, 3]];

        grad[[t, 0]] = lam[2] * dt;
        grad[[t, 1]] = lam[3] * dt;

        // Propagate through s_{t} = F(s_{t-1}, a_t); the input state of
        // step t is states[t-1] (or s0 at t = 0).
        let (v_in, th_in) = if t == 0 {
            (s0.v, s0.theta)
        } else {
            (states[[t - 1, 2]], states[[t - 1, 3]])
        };
        let (sin_th, cos_th) = th_in.sin_cos();
        let new_v = lam[2] + lam[0] * cos_th * dt + lam[1] * sin_th * dt;
        let new_th = lam[3] + (-lam[0] * v_in * sin_th + lam[1] * v_in * cos_th) * dt;
        lam[2] = new_v;
        lam[3] = new_th;
    }
    Ok(grad)
}

/// An action trajectory paired with its dynamically consistent states.
///
/// The defining invariant `states == rollout(s0, actions)` is checked at
/// construction within 1e-9 per entry; [`Trajectory::from_actions`] builds
/// the states so the invariant holds exactly.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub s0: AgentState,
    pub actions: Array2<f64>,
    pub states: Array2<f64>,
    pub dt: f64,
}

impl Trajectory {
    pub fn from_actions(
        s0: AgentState,
        actions: Array2<f64>,
        dt: f64,
    ) -> Result<Self, DynamicsError> {
        let states = rollout(s0, actions.view(), dt)?;
        Ok(Self { s0, actions, states, dt })
    }

    pub fn new(
        s0: AgentState,
        actions: Array2<f64>,
        states: Array2<f64>,
        dt: f64,
    ) -> Result<Self, DynamicsError> {
        let rolled = rollout(s0, actions.view(), dt)?;
        if states.dim() != rolled.dim() {
            return Err(DynamicsError::ShapeMismatch {
                expected: format!("{:?}", rolled.dim()),
                got: format!("{:?}", states.dim()),
            });
        }
        let mut worst = 0.0f64;
        let mut worst_step = 0;
        for t in 0..rolled.nrows() {
            for c in 0..4 {
                let d = (states[[t, c]] - rolled[[t, c]]).abs();
                if d > worst {
                    worst = d;
                    worst_step = t;
                }
            }
        }
        if worst > 1e-9 {
            return Err(DynamicsError::Infeasible(worst, worst_step));
        }
        Ok(Self { s0, actions, states, dt })
    }

    pub fn len(&self) -> usize {
        self.actions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.nrows() == 0
    }

    /// Maximum per-entry deviation between `states` and the rollout of
    /// `actions`; zero for trajectories built through this module.
    pub fn feasibility_residual(&self) -> f64 {
        let rolled = match rollout(self.s0, self.actions.view(), self.dt) {
            Ok(r) => r,
            Err(_) => return f64::INFINITY,
        };
        let mut worst = 0.0f64;
        for (a, b) in self.states.iter().zip(rolled.iter()) {
            worst = worst.max((a - b).abs());
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::{prop_assert, proptest};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    // Step-by-step re-implementation, kept deliberately independent of
    // `rollout` (scalar loop, no ndarray indexing tricks).
    fn rollout_reference(s0: AgentState, actions: &Array2<f64>, dt: f64) -> Vec<[f64; 4]> {
        let mut out = Vec::new();
        let (mut x, mut y, mut v, mut th) = (s0.x, s0.y, s0.v, s0.theta);
        for t in 0..actions.nrows() {
            let nx = x + v * th.cos() * dt;
            let ny = y + v * th.sin() * dt;
            let nv = v + actions[[t, 0]] * dt;
            let nth = th + actions[[t, 1]] * dt;
            out.push([nx, ny, nv, nth]);
            x = nx;
            y = ny;
            v = nv;
            th = nth;
        }
        out
    }

    fn random_actions(rng: &mut impl Rng, t_len: usize) -> Array2<f64> {
        Array2::from_shape_fn((t_len, 2), |_| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn step_straight_line() {
        let s = step(
            AgentState::new(0.0, 0.0, 1.0, 0.0),
            AgentAction::new(0.0, 0.0),
            0.1,
        )
        .unwrap();
        assert_abs_diff_eq!(s.x, 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(s.y, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.v, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.theta, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn step_zero_speed_integrates_accel() {
        let s = step(
            AgentState::new(0.0, 0.0, 0.0, 0.7),
            AgentAction::new(2.0, 0.0),
            0.1,
        )
        .unwrap();
        assert_abs_diff_eq!(s.x, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.y, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.v, 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(s.theta, 0.7, epsilon = 1e-15);
    }

    #[test]
    fn step_turning() {
        let s = step(
            AgentState::new(0.0, 0.0, 2.0, PI / 2.0),
            AgentAction::new(0.0, 0.5),
            0.1,
        )
        .unwrap();
        assert_abs_diff_eq!(s.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.y, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(s.v, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.theta, PI / 2.0 + 0.05, epsilon = 1e-15);
    }

    #[test]
    fn step_rejects_non_finite() {
        let bad = AgentState::new(f64::NAN, 0.0, 0.0, 0.0);
        assert!(step(bad, AgentAction::new(0.0, 0.0), 0.1).is_err());
        let s = AgentState::new(0.0, 0.0, 0.0, 0.0);
        assert!(step(s, AgentAction::new(f64::INFINITY, 0.0), 0.1).is_err());
        assert!(step(s, AgentAction::new(0.0, 0.0), 0.0).is_err());
    }

    #[test]
    fn rollout_constant_speed() {
        let actions = Array2::zeros((3, 2));
        let states = rollout(AgentState::new(0.0, 0.0, 1.0, 0.0), actions.view(), 0.1).unwrap();
        for (t, expected_x) in [(0, 0.1), (1, 0.2), (2, 0.3)] {
            assert_abs_diff_eq!(states[[t, 0]], expected_x, epsilon = 1e-12);
            assert_abs_diff_eq!(states[[t, 1]], 0.0, epsilon = 1e-15);
            assert_abs_diff_eq!(states[[t, 2]], 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn rollout_first_row_is_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s0 = AgentState::new(1.0, -2.0, 3.0, 0.4);
        let actions = random_actions(&mut rng, 5);
        let states = rollout(s0, actions.view(), 0.1).unwrap();
        let first = step(s0, AgentAction::new(actions[[0, 0]], actions[[0, 1]]), 0.1).unwrap();
        assert_eq!(states[[0, 0]], first.x);
        assert_eq!(states[[0, 1]], first.y);
        assert_eq!(states[[0, 2]], first.v);
        assert_eq!(states[[0, 3]], first.theta);
    }

    #[test]
    fn rollout_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s0 = AgentState::new(0.5, 0.2, 2.0, -0.3);
        let actions = random_actions(&mut rng, 10);
        let states = rollout(s0, actions.view(), 0.1).unwrap();
        let reference = rollout_reference(s0, &actions, 0.1);
        for (t, row) in reference.iter().enumerate() {
            for c in 0..4 {
                assert_abs_diff_eq!(states[[t, c]], row[c], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn rollout_rejects_empty() {
        let actions = Array2::zeros((0, 2));
        assert!(matches!(
            rollout(AgentState::new(0.0, 0.0, 0.0, 0.0), actions.view(), 0.1),
            Err(DynamicsError::Empty)
        ));
    }

    #[test]
    fn vjp_zero_cotangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let actions = random_actions(&mut rng, 6);
        let cot = Array2::zeros((6, 4));
        let g = rollout_vjp(
            AgentState::new(0.0, 0.0, 1.0, 0.1),
            actions.view(),
            0.1,
            cot.view(),
        )
        .unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn vjp_final_speed_chain() {
        // d v_{T-1} / d accel_t = dt for every t.
        let t_len = 5;
        let dt = 0.1;
        let actions = Array2::zeros((t_len, 2));
        let mut cot = Array2::zeros((t_len, 4));
        cot[[t_len - 1, 2]] = 1.0;
        let g = rollout_vjp(
            AgentState::new(0.0, 0.0, 1.0, 0.0),
            actions.view(),
            dt,
            cot.view(),
        )
        .unwrap();
        for t in 0..t_len {
            assert_abs_diff_eq!(g[[t, 0]], dt, epsilon = 1e-15);
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let s0 = AgentState::new(0.3, -0.7, 1.5, 0.8);
        let dt = 0.1;
        let t_len = 8;
        let actions = random_actions(&mut rng, t_len);
        let cot = Array2::from_shape_fn((t_len, 4), |_| rng.gen_range(-1.0..1.0));
        let g = rollout_vjp(s0, actions.view(), dt, cot.view()).unwrap();

        let objective = |a: &Array2<f64>| -> f64 {
            let s = rollout(s0, a.view(), dt).unwrap();
            s.iter().zip(cot.iter()).map(|(x, c)| x * c).sum()
        };
        let h = 1e-6;
        for t in 0..t_len {
            for c in 0..2 {
                let mut plus = actions.clone();
                plus[[t, c]] += h;
                let mut minus = actions.clone();
                minus[[t, c]] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let denom = fd.abs().max(g[[t, c]].abs()).max(1e-8);
                assert!(
                    (g[[t, c]] - fd).abs() / denom < 1e-5,
                    "vjp mismatch at ({t},{c}): {} vs fd {}",
                    g[[t, c]],
                    fd
                );
            }
        }
    }

    #[test]
    fn trajectory_rejects_perturbed_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s0 = AgentState::new(0.0, 0.0, 1.0, 0.0);
        let actions = random_actions(&mut rng, 4);
        let mut states = rollout(s0, actions.view(), 0.1).unwrap();
        states[[2, 1]] += 1e-6;
        assert!(matches!(
            Trajectory::new(s0, actions, states, 0.1),
            Err(DynamicsError::Infeasible(..))
        ));
    }

    #[test]
    fn wrap_angle_range() {
        assert_abs_diff_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(0.25), 0.25, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn feasibility_by_construction(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s0 = AgentState::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(0.0..10.0),
                rng.gen_range(-3.0..3.0),
            );
            let t_len = rng.gen_range(1..12);
            let actions = random_actions(&mut rng, t_len);
            let traj = Trajectory::from_actions(s0, actions, 0.1).unwrap();
            prop_assert!(traj.feasibility_residual() == 0.0);
        }

        #[test]
        fn rollout_rigid_equivariance(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
            let phi = rng.gen_range(-3.0..3.0);
            let (ox, oy) = (rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
            let v0 = rng.gen_range(0.0..8.0);
            let actions = random_actions(&mut rng, 10);

            let base = rollout(AgentState::new(0.0, 0.0, v0, 0.0), actions.view(), 0.1).unwrap();
            let moved = rollout(AgentState::new(ox, oy, v0, phi), actions.view(), 0.1).unwrap();

            let (sin_p, cos_p) = phi.sin_cos();
            for t in 0..10 {
                // Rotate the base positions by phi and translate by the offset.
                let rx = ox + base[[t, 0]] * cos_p - base[[t, 1]] * sin_p;
                let ry = oy + base[[t, 0]] * sin_p + base[[t, 1]] * cos_p;
                prop_assert!((moved[[t, 0]] - rx).abs() < 1e-9);
                prop_assert!((moved[[t, 1]] - ry).abs() < 1e-9);
                prop_assert!((moved[[t, 2]] - base[[t, 2]]).abs() < 1e-9);
                prop_assert!((moved[[t, 3]] - (base[[t, 3]] + phi)).abs() < 1e-9);
            }
        }

        #[test]
        fn rollout_composes_with_step(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2000));
            let s0 = AgentState::new(0.0, 0.0, rng.gen_range(0.0..5.0), rng.gen_range(-1.0..1.0));
            let actions = random_actions(&mut rng, 8);
            let full = rollout(s0, actions.view(), 0.1).unwrap();

            let mut s = s0;
            for t in 0..8 {
                s = step(s, AgentAction::new(actions[[t, 0]], actions[[t, 1]]), 0.1).unwrap();
                prop_assert!(s.x == full[[t, 0]]);
                prop_assert!(s.y == full[[t, 1]]);
                prop_assert!(s.v == full[[t, 2]]);
                prop_assert!(s.theta == full[[t, 3]]);
            }
        }
    }
}
