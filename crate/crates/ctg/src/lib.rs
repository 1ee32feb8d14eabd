//! Controllable traffic generation at desk scale.
//!
//! The crate couples a conditional denoising diffusion model over vehicle
//! *action* trajectories with differentiable signal temporal logic (STL)
//! robustness, so that sampled traffic obeys user-specified rules while
//! states stay physically feasible by construction: every state trajectory
//! is the unicycle rollout of its action trajectory.
//!
//! The pieces, bottom-up:
//!
//! - [`dynamics`]: unicycle state/action types, rollout, and rollout
//!   vector-Jacobian products.
//! - [`stl`]: an STL formula language (parser + AST) with exact and
//!   temperature-smoothed robustness and exact gradients w.r.t. the signal.
//! - [`map`]: drivable grids, signed distance fields, and stop boxes.
//! - [`rules`]: traffic rules as parameterized STL formula builders plus
//!   their scalar violation metrics.
//! - [`autodiff`]: a small reverse-mode tape used by the denoiser network.
//! - [`diffusion`]: variance schedules, the conditional denoiser, training,
//!   and the unguided reverse process.
//! - [`guidance`]: iterative STL-guided sampling with inner Adam ascent,
//!   per-step clipping, filtration, and joint multi-agent guidance.
//! - [`simworld`]: synthetic scene generation, closed-loop simulation, and
//!   the rule / realism / failure evaluation metrics.
//! - [`config`] and [`cli`]: run configuration and the batch command-line
//!   surface used by the `ctg` binary.
//!
//! See the crate's `examples/` directory for one runnable program per major
//! capability.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod dynamics;
pub mod guidance;
pub mod map;
pub mod rules;
pub mod simworld;
pub mod stl;

pub use dynamics::{AgentAction, AgentState, Trajectory};
pub use stl::{RobustnessConfig, RobustnessMode, Signal, StlFormula};
