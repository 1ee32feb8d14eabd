//! Traffic rules as parameterized STL formula builders plus their scalar
//! violation metrics.
//!
//! Each rule kind builds one formula per agent (the scene-level conjunction
//! is factored across agents); `no_collision` instead yields a scene-level
//! guide descriptor because its robustness couples agents pairwise.
//! Violation metrics `h` are non-negative sums over agents and steps and
//! are independent of the STL path.

use crate::map::{SignedDistanceField, StopBox};
use crate::stl::{Channel, Interval, Predicate, SceneConstants, SignalExpr, StlFormula};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("rule `{rule}` carries parameters for {expected} agents but the scene has {got}")]
    AgentCountMismatch { rule: &'static str, expected: usize, got: usize },
    #[error("rule `{rule}` needs parameter `{param}`")]
    MissingParam { rule: &'static str, param: &'static str },
    #[error("rule `{rule}`: parameter `{param}` must be positive and finite, got {value}")]
    BadParam { rule: &'static str, param: &'static str, value: f64 },
    #[error("off-road evaluation needs the scene's distance field")]
    MissingDistanceField,
    #[error("agent {0} missing from the rollout")]
    AgentMissing(usize),
}

fn default_speed_eps() -> f64 {
    0.0
}
fn default_target_eps() -> f64 {
    0.5
}
fn default_offroad_eps() -> f64 {
    0.5
}
fn default_goal_radius() -> f64 {
    2.0
}
fn default_stop_duration() -> usize {
    5
}
fn default_stop_v_eps() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedLimitParams {
    pub v_limit: f64,
    #[serde(default = "default_speed_eps")]
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpeedParams {
    /// Per-agent, per-step target speeds.
    pub v_target: Vec<Vec<f64>>,
    #[serde(default = "default_target_eps")]
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoCollisionParams {
    /// Center-distance threshold; `None` derives `r_i + r_j` from the
    /// agents' circumscribed-circle radii.
    #[serde(default)]
    pub eps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoOffroadParams {
    #[serde(default = "default_offroad_eps")]
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalWaypointParams {
    /// One goal per agent, world frame.
    pub goals: Vec<(f64, f64)>,
    #[serde(default = "default_goal_radius")]
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopSignParams {
    /// One stop region per agent, world frame.
    pub boxes: Vec<StopBox>,
    #[serde(default = "default_stop_duration")]
    pub duration_steps: usize,
    #[serde(default = "default_stop_v_eps")]
    pub v_eps: f64,
}

/// A rule attached to a scene: `{"kind": ..., "params": {...}}` in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum RuleSpec {
    SpeedLimit(SpeedLimitParams),
    TargetSpeed(TargetSpeedParams),
    NoCollision(NoCollisionParams),
    NoOffroad(NoOffroadParams),
    GoalWaypoint(GoalWaypointParams),
    StopSign(StopSignParams),
    StopsignOffroad { stop: StopSignParams, offroad: NoOffroadParams },
    WaypointTargetspeed { waypoint: GoalWaypointParams, target_speed: TargetSpeedParams },
}

impl RuleSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            RuleSpec::SpeedLimit(_) => "speed_limit",
            RuleSpec::TargetSpeed(_) => "target_speed",
            RuleSpec::NoCollision(_) => "no_collision",
            RuleSpec::NoOffroad(_) => "no_offroad",
            RuleSpec::GoalWaypoint(_) => "goal_waypoint",
            RuleSpec::StopSign(_) => "stop_sign",
            RuleSpec::StopsignOffroad { .. } => "stopsign_offroad",
            RuleSpec::WaypointTargetspeed { .. } => "waypoint_targetspeed",
        }
    }

    pub fn validate(&self, n_agents: usize) -> Result<(), RuleError> {
        fn positive(rule: &'static str, param: &'static str, v: f64) -> Result<(), RuleError> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(RuleError::BadParam { rule, param, value: v })
            }
        }
        fn agents(rule: &'static str, expected: usize, got: usize) -> Result<(), RuleError> {
            if expected == got {
                Ok(())
            } else {
                Err(RuleError::AgentCountMismatch { rule, expected, got })
            }
        }
        match self {
            RuleSpec::SpeedLimit(p) => {
                if !p.v_limit.is_finite() || !p.eps.is_finite() || p.eps < 0.0 {
                    return Err(RuleError::BadParam {
                        rule: "speed_limit",
                        param: "v_limit/eps",
                        value: p.v_limit,
                    });
                }
                Ok(())
            }
            RuleSpec::TargetSpeed(p) => {
                positive("target_speed", "eps", p.eps)?;
                agents("target_speed", p.v_target.len(), n_agents)
            }
            RuleSpec::NoCollision(p) => {
                if let Some(eps) = p.eps {
                    positive("no_collision", "eps", eps)?;
                }
                Ok(())
            }
            RuleSpec::NoOffroad(p) => positive("no_offroad", "eps", p.eps),
            RuleSpec::GoalWaypoint(p) => {
                positive("goal_waypoint", "radius", p.radius)?;
                agents("goal_waypoint", p.goals.len(), n_agents)
            }
            RuleSpec::StopSign(p) => {
                positive("stop_sign", "v_eps", p.v_eps)?;
                agents("stop_sign", p.boxes.len(), n_agents)
            }
            RuleSpec::StopsignOffroad { stop, offroad } => {
                RuleSpec::StopSign(stop.clone()).validate(n_agents)?;
                RuleSpec::NoOffroad(offroad.clone()).validate(n_agents)
            }
            RuleSpec::WaypointTargetspeed { waypoint, target_speed } => {
                RuleSpec::GoalWaypoint(waypoint.clone()).validate(n_agents)?;
                RuleSpec::TargetSpeed(target_speed.clone()).validate(n_agents)
            }
        }
    }
}

/// Output of [`build_formula`]: per-agent formulas, or the scene-level
/// collision guide that couples agents pairwise.
#[derive(Debug, Clone)]
pub enum BuiltRule {
    PerAgent(Vec<StlFormula>),
    SceneCollision { eps: Option<f64> },
}

fn chan(c: Channel) -> SignalExpr {
    SignalExpr::Channel(c)
}

fn speed_limit_formula(p: &SpeedLimitParams) -> StlFormula {
    // always ((v - v_limit) < eps)
    StlFormula::always(
        Interval::unbounded(),
        StlFormula::Pred(Predicate::lt(
            SignalExpr::Sub(Box::new(chan(Channel::V)), Box::new(SignalExpr::Const(p.v_limit))),
            p.eps,
        )),
    )
}

fn target_speed_formula(p: &TargetSpeedParams) -> StlFormula {
    // always (abs(v - v_target) < eps)
    StlFormula::always(
        Interval::unbounded(),
        StlFormula::Pred(Predicate::lt(
            SignalExpr::Abs(Box::new(SignalExpr::Sub(
                Box::new(chan(Channel::V)),
                Box::new(chan(Channel::VTarget)),
            ))),
            p.eps,
        )),
    )
}

fn offroad_formula(p: &NoOffroadParams) -> StlFormula {
    // always (offroad_dist > eps)
    StlFormula::always(
        Interval::unbounded(),
        StlFormula::Pred(Predicate::gt(chan(Channel::OffroadDist), p.eps)),
    )
}

fn waypoint_formula(p: &GoalWaypointParams) -> StlFormula {
    // eventually (dist(x, y, goal_x, goal_y) < radius)
    StlFormula::eventually(
        Interval::unbounded(),
        StlFormula::Pred(Predicate::lt(
            SignalExpr::Dist(
                Box::new(chan(Channel::X)),
                Box::new(chan(Channel::Y)),
                Box::new(chan(Channel::GoalX)),
                Box::new(chan(Channel::GoalY)),
            ),
            p.radius,
        )),
    )
}

fn stop_sign_formula(p: &StopSignParams) -> StlFormula {
    // always (in_box implies eventually (always[0,m] (in_box and abs(v) < v_eps)))
    let stopped = StlFormula::and(
        StlFormula::Pred(Predicate::bare_channel(Channel::InBox)),
        StlFormula::Pred(Predicate::lt(SignalExpr::Abs(Box::new(chan(Channel::V))), p.v_eps)),
    );
    StlFormula::always(
        Interval::unbounded(),
        StlFormula::implies(
            StlFormula::Pred(Predicate::bare_channel(Channel::InBox)),
            StlFormula::eventually(
                Interval::unbounded(),
                StlFormula::always(Interval::new(0, Some(p.duration_steps)).unwrap(), stopped),
            ),
        ),
    )
}

/// Build the rule's STL form for every agent in the scene.
pub fn build_formula(spec: &RuleSpec, n_agents: usize) -> Result<BuiltRule, RuleError> {
    spec.validate(n_agents)?;
    let per_agent = |f: StlFormula| BuiltRule::PerAgent(vec![f; n_agents]);
    Ok(match spec {
        RuleSpec::SpeedLimit(p) => per_agent(speed_limit_formula(p)),
        RuleSpec::TargetSpeed(p) => per_agent(target_speed_formula(p)),
        RuleSpec::NoCollision(p) => BuiltRule::SceneCollision { eps: p.eps },
        RuleSpec::NoOffroad(p) => per_agent(offroad_formula(p)),
        RuleSpec::GoalWaypoint(p) => per_agent(waypoint_formula(p)),
        RuleSpec::StopSign(p) => per_agent(stop_sign_formula(p)),
        RuleSpec::StopsignOffroad { stop, offroad } => per_agent(StlFormula::and(
            stop_sign_formula(stop),
            offroad_formula(offroad),
        )),
        RuleSpec::WaypointTargetspeed { waypoint, target_speed } => per_agent(StlFormula::and(
            waypoint_formula(waypoint),
            target_speed_formula(target_speed),
        )),
    })
}

/// Fill the scene constants a rule set references for one agent. `v_target`
/// is shifted by `target_offset` steps so guidance windows starting
/// mid-episode see the right slice.
pub fn scene_constants(
    specs: &[RuleSpec],
    agent: usize,
    target_offset: usize,
    sdf: Option<Arc<SignedDistanceField>>,
) -> SceneConstants {
    let mut constants = SceneConstants { offroad_field: sdf, ..SceneConstants::default() };
    for spec in specs {
        apply_constants(spec, agent, target_offset, &mut constants);
    }
    constants
}

fn apply_constants(
    spec: &RuleSpec,
    agent: usize,
    target_offset: usize,
    constants: &mut SceneConstants,
) {
    match spec {
        RuleSpec::SpeedLimit(p) => constants.v_limit = Some(p.v_limit),
        RuleSpec::TargetSpeed(p) => {
            if let Some(track) = p.v_target.get(agent) {
                let start = target_offset.min(track.len().saturating_sub(1));
                constants.v_target = Some(track[start..].to_vec());
            }
        }
        RuleSpec::NoCollision(_) => {}
        RuleSpec::NoOffroad(_) => {}
        RuleSpec::GoalWaypoint(p) => {
            if let Some(goal) = p.goals.get(agent) {
                constants.goal = Some(*goal);
            }
        }
        RuleSpec::StopSign(p) => {
            if let Some(b) = p.boxes.get(agent) {
                constants.stop_box = Some(*b);
            }
        }
        RuleSpec::StopsignOffroad { stop, offroad } => {
            apply_constants(&RuleSpec::StopSign(stop.clone()), agent, target_offset, constants);
            apply_constants(&RuleSpec::NoOffroad(offroad.clone()), agent, target_offset, constants);
        }
        RuleSpec::WaypointTargetspeed { waypoint, target_speed } => {
            apply_constants(&RuleSpec::GoalWaypoint(waypoint.clone()), agent, target_offset, constants);
            apply_constants(&RuleSpec::TargetSpeed(target_speed.clone()), agent, target_offset, constants);
        }
    }
}

/// World-frame rollout of a whole scene plus the agent properties the
/// metrics need.
#[derive(Debug, Clone, Copy)]
pub struct MetricContext<'a> {
    /// Per-agent `(T, 4)` world states.
    pub states: &'a [Array2<f64>],
    pub dt: f64,
    /// Circumscribed-circle radius per agent.
    pub radii: &'a [f64],
    pub sdf: Option<&'a SignedDistanceField>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedMetric {
    pub name: String,
    pub total: f64,
    pub per_agent: Vec<f64>,
}

/// Per-rule violation report; composites carry both constituent metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuleMetricReport {
    pub kind: String,
    pub metrics: Vec<NamedMetric>,
}

impl RuleMetricReport {
    pub fn metric(&self, name: &str) -> Option<&NamedMetric> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn total(&self) -> f64 {
        self.metrics.iter().map(|m| m.total).sum()
    }
}

/// Evaluate the rule's violation metric `h` on a scene rollout.
pub fn evaluate_metric(
    spec: &RuleSpec,
    ctx: &MetricContext,
) -> Result<RuleMetricReport, RuleError> {
    let n = ctx.states.len();
    spec.validate(n)?;
    if ctx.radii.len() != n {
        return Err(RuleError::AgentMissing(ctx.radii.len()));
    }
    let metrics = metric_values(spec, ctx)?;
    Ok(RuleMetricReport { kind: spec.kind().to_string(), metrics })
}

fn metric_values(spec: &RuleSpec, ctx: &MetricContext) -> Result<Vec<NamedMetric>, RuleError> {
    Ok(match spec {
        RuleSpec::SpeedLimit(p) => {
            // sum_i sum_t max(0, v_{i,t} - v_limit)
            let per_agent: Vec<f64> = ctx
                .states
                .iter()
                .map(|s| (0..s.nrows()).map(|t| (s[[t, 2]] - p.v_limit).max(0.0)).sum())
                .collect();
            vec![named("speed_limit", per_agent)]
        }
        RuleSpec::TargetSpeed(p) => {
            // sum_i sum_t |v_{i,t} - v_target_{i,t}|
            let per_agent: Vec<f64> = ctx
                .states
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let tgt = &p.v_target[i];
                    (0..s.nrows())
                        .map(|t| (s[[t, 2]] - tgt[t.min(tgt.len() - 1)]).abs())
                        .sum()
                })
                .collect();
            vec![named("target_speed", per_agent)]
        }
        RuleSpec::NoCollision(p) => {
            // sum over unordered pairs and steps of 1[dist <= eps]; the
            // per-agent column counts steps an agent spends in collision.
            let n = ctx.states.len();
            let t_len = ctx.states.iter().map(|s| s.nrows()).min().unwrap_or(0);
            let mut per_agent = vec![0.0; n];
            let mut total = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    let eps = p.eps.unwrap_or(ctx.radii[i] + ctx.radii[j]);
                    for t in 0..t_len {
                        let dx = ctx.states[i][[t, 0]] - ctx.states[j][[t, 0]];
                        let dy = ctx.states[i][[t, 1]] - ctx.states[j][[t, 1]];
                        if (dx * dx + dy * dy).sqrt() <= eps {
                            total += 1.0;
                            per_agent[i] += 1.0;
                            per_agent[j] += 1.0;
                        }
                    }
                }
            }
            vec![NamedMetric { name: "no_collision".into(), total, per_agent }]
        }
        RuleSpec::NoOffroad(p) => {
            // 1 per agent that ever comes within eps of leaving the road.
            let sdf = ctx.sdf.ok_or(RuleError::MissingDistanceField)?;
            let per_agent: Vec<f64> = ctx
                .states
                .iter()
                .map(|s| {
                    let off = (0..s.nrows())
                        .any(|t| sdf.sample((s[[t, 0]], s[[t, 1]])) <= p.eps);
                    if off {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            vec![named("no_offroad", per_agent)]
        }
        RuleSpec::GoalWaypoint(p) => {
            // sum_i min_t ||pos - goal_i||
            let per_agent: Vec<f64> = ctx
                .states
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let (gx, gy) = p.goals[i];
                    (0..s.nrows())
                        .map(|t| {
                            let dx = s[[t, 0]] - gx;
                            let dy = s[[t, 1]] - gy;
                            (dx * dx + dy * dy).sqrt()
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            vec![named("goal_waypoint", per_agent)]
        }
        RuleSpec::StopSign(p) => {
            // sum_i min over in-box steps of |v|; agents that never enter
            // their stop region contribute 0.
            let per_agent: Vec<f64> = ctx
                .states
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let b = &p.boxes[i];
                    let min_v = (0..s.nrows())
                        .filter(|&t| b.contains((s[[t, 0]], s[[t, 1]])))
                        .map(|t| s[[t, 2]].abs())
                        .fold(f64::INFINITY, f64::min);
                    if min_v.is_finite() {
                        min_v
                    } else {
                        0.0
                    }
                })
                .collect();
            vec![named("stop_sign", per_agent)]
        }
        RuleSpec::StopsignOffroad { stop, offroad } => {
            let mut out = metric_values(&RuleSpec::StopSign(stop.clone()), ctx)?;
            out.extend(metric_values(&RuleSpec::NoOffroad(offroad.clone()), ctx)?);
            out
        }
        RuleSpec::WaypointTargetspeed { waypoint, target_speed } => {
            let mut out = metric_values(&RuleSpec::GoalWaypoint(waypoint.clone()), ctx)?;
            out.extend(metric_values(&RuleSpec::TargetSpeed(target_speed.clone()), ctx)?);
            out
        }
    })
}

fn named(name: &str, per_agent: Vec<f64>) -> NamedMetric {
    NamedMetric { name: name.into(), total: per_agent.iter().sum(), per_agent }
}
