//! Conditioning input for one agent: an agent-frame map raster plus the
//! recent history of the agent and its nearest neighbors.

use crate::dynamics::AgentState;
use ndarray::{ArrayD, IxDyn};

/// Agent-centric conditioning context.
///
/// - `raster`: `[3, R, R]` agent-frame crop (drivable flag, lane-direction
///   cos, lane-direction sin).
/// - `past`: `[M+1, H+1, 4]` agent-frame states over the previous `H`
///   steps plus the current one; slot 0 is the target agent.
/// - `mask`: `M+1` presence flags; absent neighbor slots are zero-filled.
/// - `v0`: current speed; the agent-frame initial state is `(0, 0, v0, 0)`.
#[derive(Debug, Clone)]
pub struct SceneContext {
    pub raster: ArrayD<f64>,
    pub past: ArrayD<f64>,
    pub mask: Vec<f64>,
    pub v0: f64,
}

impl SceneContext {
    pub fn zeroed(neighbors: usize, history: usize, raster_size: usize) -> Self {
        Self {
            raster: ArrayD::zeros(IxDyn(&[3, raster_size, raster_size])),
            past: ArrayD::zeros(IxDyn(&[neighbors + 1, history + 1, 4])),
            mask: vec![0.0; neighbors + 1],
            v0: 0.0,
        }
    }

    pub fn s0(&self) -> AgentState {
        AgentState::new(0.0, 0.0, self.v0, 0.0)
    }

    /// Zero out every slot whose mask is absent, enforcing the
    /// masked-means-zero-filled invariant.
    pub fn apply_mask(&mut self) {
        let slots = self.mask.len();
        for i in 0..slots {
            if self.mask[i] == 0.0 {
                let h = self.past.shape()[1];
                for t in 0..h {
                    for c in 0..4 {
                        self.past[[i, t, c]] = 0.0;
                    }
                }
            }
        }
    }
}
