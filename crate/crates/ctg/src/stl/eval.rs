//! Quantitative robustness evaluation with gradients.
//!
//! Exact mode implements the standard min/max semantics; smooth mode
//! replaces every min/max with a temperature-`nu` log-sum-exp soft version,
//! which over/under-shoots by at most `ln(n)/nu` per `n`-ary operator.
//! Gradients are exact reverse-mode accumulation through the evaluation
//! DAG; in exact mode ties route the subgradient to the first attaining
//! argument.

use super::ast::{Channel, CmpOp, Interval, Predicate, SignalExpr, StlFormula};
use super::signal::Signal;
use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty clamped window for `{op}` at step {t} (signal length {len})")]
    EmptyWindow { op: &'static str, t: usize, len: usize },
    #[error("formula references `{0}` but the signal carries no such scene constant")]
    MissingConstant(&'static str),
    #[error("agent_dist({idx}) out of range: signal has {count} neighbor tracks")]
    AgentIndex { idx: usize, count: usize },
    #[error("start step {t} is outside the signal (length {len})")]
    StartOutOfRange { t: usize, len: usize },
    #[error("robustness evaluated to a non-finite value (NaN)")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RobustnessMode {
    Exact,
    Smooth,
}

/// Evaluation mode plus smoothing temperature (used in smooth mode only).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustnessConfig {
    pub mode: RobustnessMode,
    pub temperature: f64,
}

impl RobustnessConfig {
    pub fn exact() -> Self {
        Self { mode: RobustnessMode::Exact, temperature: f64::INFINITY }
    }

    pub fn smooth(nu: f64) -> Self {
        assert!(nu > 0.0, "smoothing temperature must be positive");
        Self { mode: RobustnessMode::Smooth, temperature: nu }
    }
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self::exact()
    }
}

/// Robustness value together with its gradient w.r.t. every signal entry.
#[derive(Debug, Clone)]
pub struct RobustnessGrad {
    pub value: f64,
    /// `(T, 4)` gradient w.r.t. the state columns.
    pub d_states: Array2<f64>,
    /// `(T, 2)` gradient w.r.t. the action columns.
    pub d_actions: Array2<f64>,
}

/// Robustness of `formula` on `signal` starting at step `t`.
pub fn robustness(
    formula: &StlFormula,
    signal: &Signal,
    t: usize,
    cfg: &RobustnessConfig,
) -> Result<f64, EvalError> {
    if t >= signal.len() {
        return Err(EvalError::StartOutOfRange { t, len: signal.len() });
    }
    let mut ev = Evaluator::new(formula, signal, cfg);
    let v = ev.value(0, t)?;
    if v.is_nan() {
        return Err(EvalError::NonFinite);
    }
    Ok(v)
}

/// Robustness at step 0 plus its gradient w.r.t. every state and action
/// entry of the signal.
pub fn robustness_grad(
    formula: &StlFormula,
    signal: &Signal,
    cfg: &RobustnessConfig,
) -> Result<RobustnessGrad, EvalError> {
    if signal.is_empty() {
        return Err(EvalError::StartOutOfRange { t: 0, len: 0 });
    }
    let mut ev = Evaluator::new(formula, signal, cfg);
    let value = ev.value(0, 0)?;
    if value.is_nan() {
        return Err(EvalError::NonFinite);
    }
    ev.seed_cotangent(0, 0, 1.0);
    ev.backward()?;
    Ok(RobustnessGrad { value, d_states: ev.d_states, d_actions: ev.d_actions })
}

// ---------------------------------------------------------------------------
// Soft min/max.

fn hard_max(vals: impl Iterator<Item = f64>) -> f64 {
    vals.fold(f64::NEG_INFINITY, f64::max)
}

/// `(1/nu) ln sum exp(nu x_i)`, tolerant of +-inf entries.
fn soft_max(vals: &[f64], nu: f64) -> f64 {
    let m = hard_max(vals.iter().copied());
    if m.is_infinite() {
        return m;
    }
    let sum: f64 = vals.iter().map(|v| ((v - m) * nu).exp()).sum();
    m + sum.ln() / nu
}

fn soft_min(vals: &[f64], nu: f64) -> f64 {
    let neg: Vec<f64> = vals.iter().map(|v| -v).collect();
    -soft_max(&neg, nu)
}

/// Softmax weights (sum to 1). If some entry is +inf, all weight goes to
/// the first such entry; -inf entries get zero weight.
fn soft_max_weights(vals: &[f64], nu: f64, out: &mut Vec<f64>) {
    out.clear();
    out.resize(vals.len(), 0.0);
    let m = hard_max(vals.iter().copied());
    if m == f64::INFINITY {
        let first = vals.iter().position(|v| *v == f64::INFINITY).unwrap();
        out[first] = 1.0;
        return;
    }
    if m == f64::NEG_INFINITY {
        out[0] = 1.0;
        return;
    }
    let mut sum = 0.0;
    for (i, v) in vals.iter().enumerate() {
        let w = ((v - m) * nu).exp();
        out[i] = w;
        sum += w;
    }
    for w in out.iter_mut() {
        *w /= sum;
    }
}

fn soft_min_weights(vals: &[f64], nu: f64, out: &mut Vec<f64>) {
    let neg: Vec<f64> = vals.iter().map(|v| -v).collect();
    soft_max_weights(&neg, nu, out);
}

/// Index of the first entry attaining the maximum.
fn arg_max_first(vals: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in vals.iter().enumerate().skip(1) {
        if *v > vals[best] {
            best = i;
        }
    }
    best
}

fn arg_min_first(vals: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in vals.iter().enumerate().skip(1) {
        if *v < vals[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Evaluator.

/// Flattened formula node: the sub-formula plus child slots in the
/// pre-order node table (children always have larger indices).
struct Node<'a> {
    formula: &'a StlFormula,
    kid_a: usize,
    kid_b: usize,
}

struct Evaluator<'a> {
    nodes: Vec<Node<'a>>,
    signal: &'a Signal,
    cfg: RobustnessConfig,
    t_len: usize,
    /// Lazily memoized per-node per-step values.
    vals: Vec<Vec<Option<f64>>>,
    /// Cotangents accumulated during backward.
    cots: Vec<Vec<f64>>,
    d_states: Array2<f64>,
    d_actions: Array2<f64>,
}

const NO_KID: usize = usize::MAX;

fn flatten<'a>(f: &'a StlFormula, nodes: &mut Vec<Node<'a>>) -> usize {
    let id = nodes.len();
    nodes.push(Node { formula: f, kid_a: NO_KID, kid_b: NO_KID });
    match f {
        StlFormula::True | StlFormula::Pred(_) => {}
        StlFormula::Not(a) | StlFormula::Eventually(_, a) | StlFormula::Always(_, a) => {
            let ka = flatten(a, nodes);
            nodes[id].kid_a = ka;
        }
        StlFormula::And(a, b)
        | StlFormula::Or(a, b)
        | StlFormula::Implies(a, b)
        | StlFormula::Until(_, a, b) => {
            let ka = flatten(a, nodes);
            nodes[id].kid_a = ka;
            let kb = flatten(b, nodes);
            nodes[id].kid_b = kb;
        }
    }
    id
}

impl<'a> Evaluator<'a> {
    fn new(formula: &'a StlFormula, signal: &'a Signal, cfg: &RobustnessConfig) -> Self {
        let mut nodes = Vec::new();
        flatten(formula, &mut nodes);
        let t_len = signal.len();
        let n = nodes.len();
        Self {
            nodes,
            signal,
            cfg: *cfg,
            t_len,
            vals: vec![vec![None; t_len]; n],
            cots: vec![vec![0.0; t_len]; n],
            d_states: Array2::zeros((t_len, 4)),
            d_actions: Array2::zeros((t_len, 2)),
        }
    }

    fn smooth(&self) -> bool {
        self.cfg.mode == RobustnessMode::Smooth
    }

    fn value(&mut self, id: usize, t: usize) -> Result<f64, EvalError> {
        if let Some(v) = self.vals[id][t] {
            return Ok(v);
        }
        let (formula, kid_a, kid_b) = {
            let n = &self.nodes[id];
            (n.formula, n.kid_a, n.kid_b)
        };
        let nu = self.cfg.temperature;
        let v = match formula {
            StlFormula::True => f64::INFINITY,
            StlFormula::Pred(p) => self.predicate_value(p, t)?,
            StlFormula::Not(_) => -self.value(kid_a, t)?,
            StlFormula::And(..) => {
                let a = self.value(kid_a, t)?;
                let b = self.value(kid_b, t)?;
                if self.smooth() {
                    soft_min(&[a, b], nu)
                } else {
                    if a <= b {
                        a
                    } else {
                        b
                    }
                }
            }
            StlFormula::Or(..) => {
                let a = self.value(kid_a, t)?;
                let b = self.value(kid_b, t)?;
                if self.smooth() {
                    soft_max(&[a, b], nu)
                } else {
                    if a >= b {
                        a
                    } else {
                        b
                    }
                }
            }
            StlFormula::Implies(..) => {
                let a = -self.value(kid_a, t)?;
                let b = self.value(kid_b, t)?;
                if self.smooth() {
                    soft_max(&[a, b], nu)
                } else {
                    if a >= b {
                        a
                    } else {
                        b
                    }
                }
            }
            StlFormula::Eventually(iv, _) => {
                let (s, e) = self.window(iv, t, "eventually")?;
                let mut vals = Vec::with_capacity(e - s + 1);
                for u in s..=e {
                    vals.push(self.value(kid_a, u)?);
                }
                if self.smooth() {
                    soft_max(&vals, nu)
                } else {
                    vals[arg_max_first(&vals)]
                }
            }
            StlFormula::Always(iv, _) => {
                let (s, e) = self.window(iv, t, "always")?;
                let mut vals = Vec::with_capacity(e - s + 1);
                for u in s..=e {
                    vals.push(self.value(kid_a, u)?);
                }
                if self.smooth() {
                    soft_min(&vals, nu)
                } else {
                    vals[arg_min_first(&vals)]
                }
            }
            StlFormula::Until(iv, ..) => {
                let (s, e) = self.window(iv, t, "until")?;
                let mut outer = Vec::with_capacity(e - s + 1);
                for tp in s..=e {
                    // Inner list: [psi(tp), phi(t), ..., phi(tp)].
                    let mut inner = Vec::with_capacity(tp - t + 2);
                    inner.push(self.value(kid_b, tp)?);
                    for u in t..=tp {
                        inner.push(self.value(kid_a, u)?);
                    }
                    outer.push(if self.smooth() {
                        soft_min(&inner, nu)
                    } else {
                        inner[arg_min_first(&inner)]
                    });
                }
                if self.smooth() {
                    soft_max(&outer, nu)
                } else {
                    outer[arg_max_first(&outer)]
                }
            }
        };
        self.vals[id][t] = Some(v);
        Ok(v)
    }

    fn window(
        &self,
        iv: &Interval,
        t: usize,
        op: &'static str,
    ) -> Result<(usize, usize), EvalError> {
        iv.window(t, self.t_len - 1)
            .ok_or(EvalError::EmptyWindow { op, t, len: self.t_len })
    }

    fn seed_cotangent(&mut self, id: usize, t: usize, coeff: f64) {
        self.cots[id][t] += coeff;
    }

    /// Push cotangents from each node to its children (pre-order ids ensure
    /// parents are finished before children are visited), accumulating
    /// predicate contributions into the signal gradient arrays.
    fn backward(&mut self) -> Result<(), EvalError> {
        let nu = self.cfg.temperature;
        let mut weights = Vec::new();
        for id in 0..self.nodes.len() {
            for t in 0..self.t_len {
                let coeff = self.cots[id][t];
                if coeff == 0.0 {
                    continue;
                }
                let (formula, kid_a, kid_b) = {
                    let n = &self.nodes[id];
                    (n.formula, n.kid_a, n.kid_b)
                };
                match formula {
                    StlFormula::True => {}
                    StlFormula::Pred(p) => self.predicate_grad(p, t, coeff)?,
                    StlFormula::Not(_) => self.cots[kid_a][t] -= coeff,
                    StlFormula::And(..) => {
                        let a = self.value(kid_a, t)?;
                        let b = self.value(kid_b, t)?;
                        if self.smooth() {
                            soft_min_weights(&[a, b], nu, &mut weights);
                            self.cots[kid_a][t] += coeff * weights[0];
                            self.cots[kid_b][t] += coeff * weights[1];
                        } else if a <= b {
                            self.cots[kid_a][t] += coeff;
                        } else {
                            self.cots[kid_b][t] += coeff;
                        }
                    }
                    StlFormula::Or(..) => {
                        let a = self.value(kid_a, t)?;
                        let b = self.value(kid_b, t)?;
                        if self.smooth() {
                            soft_max_weights(&[a, b], nu, &mut weights);
                            self.cots[kid_a][t] += coeff * weights[0];
                            self.cots[kid_b][t] += coeff * weights[1];
                        } else if a >= b {
                            self.cots[kid_a][t] += coeff;
                        } else {
                            self.cots[kid_b][t] += coeff;
                        }
                    }
                    StlFormula::Implies(..) => {
                        let a = -self.value(kid_a, t)?;
                        let b = self.value(kid_b, t)?;
                        if self.smooth() {
                            soft_max_weights(&[a, b], nu, &mut weights);
                            self.cots[kid_a][t] -= coeff * weights[0];
                            self.cots[kid_b][t] += coeff * weights[1];
                        } else if a >= b {
                            self.cots[kid_a][t] -= coeff;
                        } else {
                            self.cots[kid_b][t] += coeff;
                        }
                    }
                    StlFormula::Eventually(iv, _) => {
                        let (s, e) = self.window(iv, t, "eventually")?;
                        let vals: Vec<f64> = (s..=e)
                            .map(|u| self.vals[kid_a][u].expect("forward value present"))
                            .collect();
                        if self.smooth() {
                            soft_max_weights(&vals, nu, &mut weights);
                            for (i, u) in (s..=e).enumerate() {
                                self.cots[kid_a][u] += coeff * weights[i];
                            }
                        } else {
                            self.cots[kid_a][s + arg_max_first(&vals)] += coeff;
                        }
                    }
                    StlFormula::Always(iv, _) => {
                        let (s, e) = self.window(iv, t, "always")?;
                        let vals: Vec<f64> = (s..=e)
                            .map(|u| self.vals[kid_a][u].expect("forward value present"))
                            .collect();
                        if self.smooth() {
                            soft_min_weights(&vals, nu, &mut weights);
                            for (i, u) in (s..=e).enumerate() {
                                self.cots[kid_a][u] += coeff * weights[i];
                            }
                        } else {
                            self.cots[kid_a][s + arg_min_first(&vals)] += coeff;
                        }
                    }
                    StlFormula::Until(iv, ..) => {
                        self.until_backward(iv, kid_a, kid_b, t, coeff)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn until_backward(
        &mut self,
        iv: &Interval,
        kid_a: usize,
        kid_b: usize,
        t: usize,
        coeff: f64,
    ) -> Result<(), EvalError> {
        let nu = self.cfg.temperature;
        let (s, e) = self.window(iv, t, "until")?;
        let mut inner_lists: Vec<Vec<f64>> = Vec::with_capacity(e - s + 1);
        let mut outer = Vec::with_capacity(e - s + 1);
        for tp in s..=e {
            let mut inner = Vec::with_capacity(tp - t + 2);
            inner.push(self.vals[kid_b][tp].expect("forward value present"));
            for u in t..=tp {
                inner.push(self.vals[kid_a][u].expect("forward value present"));
            }
            outer.push(if self.smooth() {
                soft_min(&inner, nu)
            } else {
                inner[arg_min_first(&inner)]
            });
            inner_lists.push(inner);
        }
        if self.smooth() {
            let mut w_out = Vec::new();
            soft_max_weights(&outer, nu, &mut w_out);
            let mut w_in = Vec::new();
            for (i, tp) in (s..=e).enumerate() {
                if w_out[i] == 0.0 {
                    continue;
                }
                soft_min_weights(&inner_lists[i], nu, &mut w_in);
                self.cots[kid_b][tp] += coeff * w_out[i] * w_in[0];
                for (j, u) in (t..=tp).enumerate() {
                    self.cots[kid_a][u] += coeff * w_out[i] * w_in[j + 1];
                }
            }
        } else {
            let i = arg_max_first(&outer);
            let tp = s + i;
            let j = arg_min_first(&inner_lists[i]);
            if j == 0 {
                self.cots[kid_b][tp] += coeff;
            } else {
                self.cots[kid_a][t + (j - 1)] += coeff;
            }
        }
        Ok(())
    }

    // -- predicates ---------------------------------------------------------

    fn predicate_value(&self, p: &Predicate, t: usize) -> Result<f64, EvalError> {
        let v = self.expr_value(&p.expr, t)?;
        Ok(match p.op {
            CmpOp::Gt => v - p.threshold,
            CmpOp::Lt => p.threshold - v,
        })
    }

    fn predicate_grad(&mut self, p: &Predicate, t: usize, coeff: f64) -> Result<(), EvalError> {
        let sign = match p.op {
            CmpOp::Gt => 1.0,
            CmpOp::Lt => -1.0,
        };
        self.expr_grad(&p.expr, t, coeff * sign)
    }

    fn expr_value(&self, e: &SignalExpr, t: usize) -> Result<f64, EvalError> {
        let sig = self.signal;
        Ok(match e {
            SignalExpr::Const(v) => *v,
            SignalExpr::Channel(c) => match c {
                Channel::X => sig.states[[t, 0]],
                Channel::Y => sig.states[[t, 1]],
                Channel::V => sig.states[[t, 2]],
                Channel::Theta => sig.states[[t, 3]],
                Channel::Accel => sig.actions[[t, 0]],
                Channel::YawRate => sig.actions[[t, 1]],
                Channel::Speed => sig.states[[t, 2]].abs(),
                Channel::InBox => {
                    let b = sig
                        .constants
                        .stop_box
                        .ok_or(EvalError::MissingConstant("stop_box"))?;
                    let world = sig.constants.frame().to_world(sig.position(t));
                    b.signed_distance(world)
                }
                Channel::OffroadDist => {
                    let f = sig
                        .constants
                        .offroad_field
                        .as_ref()
                        .ok_or(EvalError::MissingConstant("offroad_dist"))?;
                    let world = sig.constants.frame().to_world(sig.position(t));
                    f.sample(world)
                }
                Channel::VTarget => {
                    let tgt = sig
                        .constants
                        .v_target
                        .as_ref()
                        .filter(|v| !v.is_empty())
                        .ok_or(EvalError::MissingConstant("v_target"))?;
                    tgt[t.min(tgt.len() - 1)]
                }
                Channel::GoalX | Channel::GoalY => {
                    let goal =
                        sig.constants.goal.ok_or(EvalError::MissingConstant("goal"))?;
                    let local = sig.constants.frame().to_local(goal);
                    if matches!(c, Channel::GoalX) {
                        local.0
                    } else {
                        local.1
                    }
                }
                Channel::VLimit => sig
                    .constants
                    .v_limit
                    .ok_or(EvalError::MissingConstant("v_limit"))?,
            },
            SignalExpr::Add(a, b) => self.expr_value(a, t)? + self.expr_value(b, t)?,
            SignalExpr::Sub(a, b) => self.expr_value(a, t)? - self.expr_value(b, t)?,
            SignalExpr::Mul(a, b) => self.expr_value(a, t)? * self.expr_value(b, t)?,
            SignalExpr::Abs(a) => self.expr_value(a, t)?.abs(),
            SignalExpr::Dist(a, b, c, d) => {
                let dx = self.expr_value(a, t)? - self.expr_value(c, t)?;
                let dy = self.expr_value(b, t)? - self.expr_value(d, t)?;
                (dx * dx + dy * dy).sqrt()
            }
            SignalExpr::AgentDist(idx) => {
                let tracks = sig
                    .constants
                    .neighbor_tracks
                    .as_ref()
                    .ok_or(EvalError::MissingConstant("agent_dist"))?;
                let track = tracks
                    .get(*idx)
                    .ok_or(EvalError::AgentIndex { idx: *idx, count: tracks.len() })?;
                let row = t.min(track.nrows() - 1);
                let world = sig.constants.frame().to_world(sig.position(t));
                let dx = world.0 - track[[row, 0]];
                let dy = world.1 - track[[row, 1]];
                (dx * dx + dy * dy).sqrt()
            }
        })
    }

    fn expr_grad(&mut self, e: &SignalExpr, t: usize, coeff: f64) -> Result<(), EvalError> {
        if coeff == 0.0 {
            return Ok(());
        }
        match e {
            SignalExpr::Const(_) => {}
            SignalExpr::Channel(c) => match c {
                Channel::X => self.d_states[[t, 0]] += coeff,
                Channel::Y => self.d_states[[t, 1]] += coeff,
                Channel::V => self.d_states[[t, 2]] += coeff,
                Channel::Theta => self.d_states[[t, 3]] += coeff,
                Channel::Accel => self.d_actions[[t, 0]] += coeff,
                Channel::YawRate => self.d_actions[[t, 1]] += coeff,
                Channel::Speed => {
                    self.d_states[[t, 2]] += coeff * sign0(self.signal.states[[t, 2]]);
                }
                Channel::InBox => {
                    let b = self
                        .signal
                        .constants
                        .stop_box
                        .ok_or(EvalError::MissingConstant("stop_box"))?;
                    let frame = self.signal.constants.frame();
                    let world = frame.to_world(self.signal.position(t));
                    let g = frame.cograd_to_local(b.signed_distance_grad(world));
                    self.d_states[[t, 0]] += coeff * g.0;
                    self.d_states[[t, 1]] += coeff * g.1;
                }
                Channel::OffroadDist => {
                    let frame = self.signal.constants.frame();
                    let world = frame.to_world(self.signal.position(t));
                    let g_world = {
                        let f = self
                            .signal
                            .constants
                            .offroad_field
                            .as_ref()
                            .ok_or(EvalError::MissingConstant("offroad_dist"))?;
                        f.sample_with_grad(world).1
                    };
                    let g = frame.cograd_to_local(g_world);
                    self.d_states[[t, 0]] += coeff * g.0;
                    self.d_states[[t, 1]] += coeff * g.1;
                }
                Channel::VTarget
                | Channel::GoalX
                | Channel::GoalY
                | Channel::VLimit => {}
            },
            SignalExpr::Add(a, b) => {
                self.expr_grad(a, t, coeff)?;
                self.expr_grad(b, t, coeff)?;
            }
            SignalExpr::Sub(a, b) => {
                self.expr_grad(a, t, coeff)?;
                self.expr_grad(b, t, -coeff)?;
            }
            SignalExpr::Mul(a, b) => {
                let va = self.expr_value(a, t)?;
                let vb = self.expr_value(b, t)?;
                self.expr_grad(a, t, coeff * vb)?;
                self.expr_grad(b, t, coeff * va)?;
            }
            SignalExpr::Abs(a) => {
                let va = self.expr_value(a, t)?;
                self.expr_grad(a, t, coeff * sign0(va))?;
            }
            SignalExpr::Dist(a, b, c, d) => {
                let dx = self.expr_value(a, t)? - self.expr_value(c, t)?;
                let dy = self.expr_value(b, t)? - self.expr_value(d, t)?;
                let n = (dx * dx + dy * dy).sqrt();
                if n > 0.0 {
                    self.expr_grad(a, t, coeff * dx / n)?;
                    self.expr_grad(c, t, -coeff * dx / n)?;
                    self.expr_grad(b, t, coeff * dy / n)?;
                    self.expr_grad(d, t, -coeff * dy / n)?;
                }
            }
            SignalExpr::AgentDist(idx) => {
                let frame = self.signal.constants.frame();
                let world = frame.to_world(self.signal.position(t));
                let (dx, dy, n) = {
                    let tracks = self
                        .signal
                        .constants
                        .neighbor_tracks
                        .as_ref()
                        .ok_or(EvalError::MissingConstant("agent_dist"))?;
                    let track = tracks
                        .get(*idx)
                        .ok_or(EvalError::AgentIndex { idx: *idx, count: tracks.len() })?;
                    let row = t.min(track.nrows() - 1);
                    let dx = world.0 - track[[row, 0]];
                    let dy = world.1 - track[[row, 1]];
                    (dx, dy, (dx * dx + dy * dy).sqrt())
                };
                if n > 0.0 {
                    let g = frame.cograd_to_local((dx / n, dy / n));
                    self.d_states[[t, 0]] += coeff * g.0;
                    self.d_states[[t, 1]] += coeff * g.1;
                }
            }
        }
        Ok(())
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stl::ast::{Interval, Predicate, SignalExpr, StlFormula};
    use approx::assert_abs_diff_eq;

    fn v_channel() -> SignalExpr {
        SignalExpr::Channel(Channel::V)
    }

    fn always_v_lt(c: f64) -> StlFormula {
        StlFormula::always(Interval::unbounded(), StlFormula::Pred(Predicate::lt(v_channel(), c)))
    }

    fn eventually_v_gt(c: f64) -> StlFormula {
        StlFormula::eventually(
            Interval::unbounded(),
            StlFormula::Pred(Predicate::gt(v_channel(), c)),
        )
    }

    #[test]
    fn always_is_min_of_margins() {
        let sig = Signal::from_speeds(&[3.0, 4.0, 6.0], 0.1);
        let rho = robustness(&always_v_lt(5.0), &sig, 0, &RobustnessConfig::exact()).unwrap();
        assert_abs_diff_eq!(rho, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn eventually_is_max_of_margins() {
        let sig = Signal::from_speeds(&[3.0, 4.0, 6.0], 0.1);
        let rho = robustness(&eventually_v_gt(5.0), &sig, 0, &RobustnessConfig::exact()).unwrap();
        assert_abs_diff_eq!(rho, 1.0, epsilon = 1e-12);
    }

    // Brute-force Until evaluator following the definition literally: it
    // re-enumerates every (t', t'') pair instead of sharing running minima
    // with the implementation under test.
    fn until_brute_force(
        phi_margins: &[f64],
        psi_margins: &[f64],
        lo: usize,
        hi: usize,
        t: usize,
    ) -> f64 {
        let last = phi_margins.len() - 1;
        let mut best = f64::NEG_INFINITY;
        for tp in (t + lo)..=(t + hi).min(last) {
            let mut inner = psi_margins[tp];
            for u in t..=tp {
                inner = inner.min(phi_margins[u]);
            }
            best = best.max(inner);
        }
        best
    }

    #[test]
    fn until_matches_brute_force() {
        // (v < 5) U_[0,2] (v > 4) on v = [3, 3, 6].
        let v = [3.0, 3.0, 6.0];
        let sig = Signal::from_speeds(&v, 0.1);
        let f = StlFormula::until(
            Interval::new(0, Some(2)).unwrap(),
            StlFormula::Pred(Predicate::lt(v_channel(), 5.0)),
            StlFormula::Pred(Predicate::gt(v_channel(), 4.0)),
        );
        let rho = robustness(&f, &sig, 0, &RobustnessConfig::exact()).unwrap();
        let phi: Vec<f64> = v.iter().map(|x| 5.0 - x).collect();
        let psi: Vec<f64> = v.iter().map(|x| x - 4.0).collect();
        let oracle = until_brute_force(&phi, &psi, 0, 2, 0);
        assert_abs_diff_eq!(rho, oracle, epsilon = 1e-12);
        // Frozen value computed by the oracle.
        assert_abs_diff_eq!(rho, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_window_is_an_error() {
        let sig = Signal::from_speeds(&[1.0, 2.0], 0.1);
        let f = StlFormula::eventually(
            Interval::new(5, Some(7)).unwrap(),
            StlFormula::Pred(Predicate::gt(v_channel(), 0.0)),
        );
        let err = robustness(&f, &sig, 0, &RobustnessConfig::exact()).unwrap_err();
        match err {
            EvalError::EmptyWindow { op, .. } => assert_eq!(op, "eventually"),
            other => panic!("expected EmptyWindow, got {other:?}"),
        }
    }

    #[test]
    fn window_clamps_to_signal_end() {
        let sig = Signal::from_speeds(&[3.0, 4.0, 6.0], 0.1);
        let f = StlFormula::always(
            Interval::new(0, Some(100)).unwrap(),
            StlFormula::Pred(Predicate::lt(v_channel(), 5.0)),
        );
        let rho = robustness(&f, &sig, 0, &RobustnessConfig::exact()).unwrap();
        assert_abs_diff_eq!(rho, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn grad_single_step_identity_through_lse() {
        let sig = Signal::from_speeds(&[3.0], 0.1);
        for nu in [1.0, 10.0, 250.0] {
            let g =
                robustness_grad(&always_v_lt(5.0), &sig, &RobustnessConfig::smooth(nu)).unwrap();
            assert_abs_diff_eq!(g.d_states[[0, 2]], -1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn grad_equals_softmin_weights() {
        // nu = 10 on margins (2, 1): the gradient w.r.t. v_t must be the
        // negated softmin weight -e^{-nu rho_t} / sum e^{-nu rho_u}.
        let nu = 10.0;
        let sig = Signal::from_speeds(&[3.0, 4.0], 0.1);
        let g = robustness_grad(&always_v_lt(5.0), &sig, &RobustnessConfig::smooth(nu)).unwrap();
        let margins = [2.0f64, 1.0];
        let e: Vec<f64> = margins.iter().map(|m| (-nu * m).exp()).collect();
        let z: f64 = e.iter().sum();
        for t in 0..2 {
            assert_abs_diff_eq!(g.d_states[[t, 2]], -e[t] / z, epsilon = 1e-12);
        }
    }

    #[test]
    fn negation_antisymmetry_both_modes() {
        let sig = Signal::from_speeds(&[3.0, 4.0, 6.0, 2.0], 0.1);
        let f = StlFormula::until(
            Interval::new(0, Some(3)).unwrap(),
            StlFormula::Pred(Predicate::lt(v_channel(), 5.0)),
            StlFormula::Pred(Predicate::gt(v_channel(), 4.0)),
        );
        let neg = StlFormula::not(f.clone());
        for cfg in [RobustnessConfig::exact(), RobustnessConfig::smooth(7.0)] {
            let a = robustness(&f, &sig, 0, &cfg).unwrap();
            let b = robustness(&neg, &sig, 0, &cfg).unwrap();
            assert_eq!(a, -b);
        }
    }

    #[test]
    fn derived_operator_equivalences() {
        let sig = Signal::from_speeds(&[3.0, 5.5, 4.0, 6.5, 1.0], 0.1);
        let pred = || StlFormula::Pred(Predicate::gt(v_channel(), 4.5));
        let iv = Interval::new(1, Some(3)).unwrap();
        let cfg = RobustnessConfig::exact();

        let ev = StlFormula::eventually(iv, pred());
        let until = StlFormula::until(iv, StlFormula::True, pred());
        let a = robustness(&ev, &sig, 0, &cfg).unwrap();
        let b = robustness(&until, &sig, 0, &cfg).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);

        let alw = StlFormula::always(iv, pred());
        let dual = StlFormula::not(StlFormula::eventually(iv, StlFormula::not(pred())));
        let c = robustness(&alw, &sig, 0, &cfg).unwrap();
        let d = robustness(&dual, &sig, 0, &cfg).unwrap();
        assert_abs_diff_eq!(c, d, epsilon = 1e-12);
    }

    #[test]
    fn smooth_approximation_bound() {
        let sig = Signal::from_speeds(&[3.0, 4.2, 6.0, 2.0, 5.1, 0.5], 0.1);
        let f = StlFormula::and(
            always_v_lt(5.0),
            StlFormula::until(
                Interval::new(0, Some(4)).unwrap(),
                StlFormula::Pred(Predicate::lt(v_channel(), 7.0)),
                StlFormula::Pred(Predicate::gt(v_channel(), 4.0)),
            ),
        );
        let exact = robustness(&f, &sig, 0, &RobustnessConfig::exact()).unwrap();
        for nu in [5.0, 10.0, 50.0] {
            let smooth = robustness(&f, &sig, 0, &RobustnessConfig::smooth(nu)).unwrap();
            // Widest min/max in this evaluation is the inner Until list
            // (signal length + 1 entries).
            let w_max = (sig.len() + 1) as f64;
            let bound = f.minmax_depth() as f64 * w_max.ln() / nu;
            assert!(
                (smooth - exact).abs() <= bound + 1e-12,
                "nu={nu}: |{smooth} - {exact}| > {bound}"
            );
        }
    }

    #[test]
    fn grad_matches_finite_differences_smooth() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let t_len = 8;
        let cfg = RobustnessConfig::smooth(10.0);

        for _ in 0..20 {
            let mut states =
                Array2::from_shape_fn((t_len, 4), |_| rng.gen_range(-3.0..3.0f64));
            // Keep speeds away from the |v| kink.
            for t in 0..t_len {
                states[[t, 2]] = rng.gen_range(0.5..4.0);
            }
            let actions = Array2::from_shape_fn((t_len, 2), |_| rng.gen_range(-1.0..1.0f64));
            let sig = Signal::new(states, actions, 0.1);

            let f = StlFormula::and(
                StlFormula::eventually(
                    Interval::new(1, Some(5)).unwrap(),
                    StlFormula::Pred(Predicate::gt(
                        SignalExpr::Dist(
                            Box::new(SignalExpr::Channel(Channel::X)),
                            Box::new(SignalExpr::Channel(Channel::Y)),
                            Box::new(SignalExpr::Const(5.0)),
                            Box::new(SignalExpr::Const(5.0)),
                        ),
                        2.0,
                    )),
                ),
                StlFormula::until(
                    Interval::new(0, Some(6)).unwrap(),
                    StlFormula::Pred(Predicate::lt(v_channel(), 3.5)),
                    StlFormula::Pred(Predicate::gt(
                        SignalExpr::Channel(Channel::Accel),
                        -0.2,
                    )),
                ),
            );

            let g = robustness_grad(&f, &sig, &cfg).unwrap();
            let h = 1e-4;
            let check = |is_state: bool, t: usize, c: usize, analytic: f64| {
                let eval = |delta: f64| {
                    let mut s2 = sig.clone();
                    if is_state {
                        s2.states[[t, c]] += delta;
                    } else {
                        s2.actions[[t, c]] += delta;
                    }
                    robustness(&f, &s2, 0, &cfg).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let denom = fd.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    (fd - analytic).abs() / denom < 1e-4,
                    "fd {fd} vs analytic {analytic} at ({is_state},{t},{c})"
                );
            };
            for t in 0..t_len {
                for c in 0..4 {
                    check(true, t, c, g.d_states[[t, c]]);
                }
                for c in 0..2 {
                    check(false, t, c, g.d_actions[[t, c]]);
                }
            }
        }
    }

    #[test]
    fn exact_grad_routes_ties_to_first() {
        // Two equal margins: the subgradient goes entirely to step 0.
        let sig = Signal::from_speeds(&[4.0, 4.0], 0.1);
        let g = robustness_grad(&always_v_lt(5.0), &sig, &RobustnessConfig::exact()).unwrap();
        assert_eq!(g.d_states[[0, 2]], -1.0);
        assert_eq!(g.d_states[[1, 2]], 0.0);
    }
}
