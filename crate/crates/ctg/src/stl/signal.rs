//! Signals: paired state/action arrays plus the per-scene constants that
//! derived channels resolve against.

use crate::map::{Pose2, SignedDistanceField, StopBox};
use ndarray::Array2;
use std::sync::Arc;

/// Scene-level constants referenced by formulas.
///
/// Geometry-valued constants (`goal`, `stop_box`, the off-road field,
/// neighbor tracks) are stored in world coordinates together with the
/// `frame` mapping signal coordinates into the world, so the same formula
/// evaluates consistently on world-frame logs (`frame` = identity) and on
/// agent-frame samples.
#[derive(Debug, Clone, Default)]
pub struct SceneConstants {
    pub frame: Option<Pose2>,
    pub goal: Option<(f64, f64)>,
    pub stop_box: Option<StopBox>,
    pub v_limit: Option<f64>,
    /// Per-step target speed aligned with the signal's step 0; reads past
    /// the end clamp to the final entry.
    pub v_target: Option<Vec<f64>>,
    pub offroad_field: Option<Arc<SignedDistanceField>>,
    /// World-frame positions of other scene agents, one `(T, 2)` array per
    /// agent, aligned with the signal's step 0.
    pub neighbor_tracks: Option<Arc<Vec<Array2<f64>>>>,
}

impl SceneConstants {
    pub fn frame(&self) -> Pose2 {
        self.frame.unwrap_or_else(Pose2::identity)
    }
}

/// A discrete-time signal: states `(T, 4)` as `(x, y, v, theta)`, actions
/// `(T, 2)` as `(accel, yaw_rate)`, a timestep, and scene constants.
#[derive(Debug, Clone)]
pub struct Signal {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub dt: f64,
    pub constants: SceneConstants,
}

impl Signal {
    pub fn new(states: Array2<f64>, actions: Array2<f64>, dt: f64) -> Self {
        assert!(states.nrows() >= 1, "signal needs at least one step");
        assert_eq!(states.nrows(), actions.nrows(), "state/action length mismatch");
        assert_eq!(states.ncols(), 4);
        assert_eq!(actions.ncols(), 2);
        assert!(dt > 0.0);
        Self { states, actions, dt, constants: SceneConstants::default() }
    }

    pub fn with_constants(mut self, constants: SceneConstants) -> Self {
        self.constants = constants;
        self
    }

    /// Convenience constructor for tests and single-channel fixtures: a
    /// signal whose speed channel follows `v`, everything else zero.
    pub fn from_speeds(v: &[f64], dt: f64) -> Self {
        let t_len = v.len();
        let mut states = Array2::zeros((t_len, 4));
        for (t, &val) in v.iter().enumerate() {
            states[[t, 2]] = val;
        }
        Self::new(states, Array2::zeros((t_len, 2)), dt)
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    pub fn position(&self, t: usize) -> (f64, f64) {
        (self.states[[t, 0]], self.states[[t, 1]])
    }
}
