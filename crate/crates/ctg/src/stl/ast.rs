//! Formula and signal-expression ASTs with a printer that round-trips
//! through the parser.

use std::fmt;

/// Discrete-step interval attached to temporal operators. `hi = None`
/// means unbounded. Invariant: `lo <= hi` when bounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interval {
    pub lo: usize,
    pub hi: Option<usize>,
}

impl Interval {
    pub fn new(lo: usize, hi: Option<usize>) -> Result<Self, String> {
        if let Some(h) = hi {
            if lo > h {
                return Err(format!("malformed interval: [{lo},{h}] has lo > hi"));
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn unbounded() -> Self {
        Self { lo: 0, hi: None }
    }

    pub fn is_unbounded_from_zero(&self) -> bool {
        self.lo == 0 && self.hi.is_none()
    }

    /// Window of absolute steps `[t + lo, min(t + hi, last)]`; `None` when
    /// the clamped window is empty.
    pub fn window(&self, t: usize, last: usize) -> Option<(usize, usize)> {
        let start = t + self.lo;
        if start > last {
            return None;
        }
        let end = match self.hi {
            Some(h) => (t + h).min(last),
            None => last,
        };
        Some((start, end))
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.hi {
            Some(h) => write!(f, "[{},{}]", self.lo, h),
            None => write!(f, "[{},inf]", self.lo),
        }
    }
}

/// Per-step signal channels addressable from formulas.
///
/// The first six read the raw state/action columns; the rest are derived
/// quantities resolved against the signal's scene constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    X,
    Y,
    V,
    Theta,
    Accel,
    YawRate,
    /// `|v|`.
    Speed,
    /// Signed distance to the scene's stop box, positive inside.
    InBox,
    /// Signed distance to the nearest off-road cell, positive on the road.
    OffroadDist,
    /// Per-step target speed from the scene constants.
    VTarget,
    /// Goal coordinates expressed in the signal's frame.
    GoalX,
    GoalY,
    /// Scene speed limit.
    VLimit,
}

impl Channel {
    pub fn name(&self) -> &'static str {
        match self {
            Channel::X => "x",
            Channel::Y => "y",
            Channel::V => "v",
            Channel::Theta => "theta",
            Channel::Accel => "accel",
            Channel::YawRate => "yawrate",
            Channel::Speed => "speed",
            Channel::InBox => "in_box",
            Channel::OffroadDist => "offroad_dist",
            Channel::VTarget => "v_target",
            Channel::GoalX => "goal_x",
            Channel::GoalY => "goal_y",
            Channel::VLimit => "v_limit",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "x" => Channel::X,
            "y" => Channel::Y,
            "v" => Channel::V,
            "theta" => Channel::Theta,
            "accel" => Channel::Accel,
            "yawrate" => Channel::YawRate,
            "speed" => Channel::Speed,
            "in_box" => Channel::InBox,
            "offroad_dist" => Channel::OffroadDist,
            "v_target" => Channel::VTarget,
            "goal_x" => Channel::GoalX,
            "goal_y" => Channel::GoalY,
            "v_limit" => Channel::VLimit,
            _ => return None,
        })
    }
}

/// Real-valued expression over one timestep of a signal.
#[derive(Debug, Clone, PartialEq)]
pub enum SignalExpr {
    Channel(Channel),
    Const(f64),
    Add(Box<SignalExpr>, Box<SignalExpr>),
    Sub(Box<SignalExpr>, Box<SignalExpr>),
    Mul(Box<SignalExpr>, Box<SignalExpr>),
    Abs(Box<SignalExpr>),
    /// Euclidean distance between the points `(a, b)` and `(c, d)`.
    Dist(Box<SignalExpr>, Box<SignalExpr>, Box<SignalExpr>, Box<SignalExpr>),
    /// Distance to scene agent `idx` at the same timestep.
    AgentDist(usize),
}

impl SignalExpr {
    pub fn channel(c: Channel) -> Self {
        SignalExpr::Channel(c)
    }

    pub fn constant(v: f64) -> Self {
        SignalExpr::Const(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Lt,
    Gt,
}

/// Atomic predicate `expr > c` or `expr < c`, internally evaluated as the
/// normalized margin `mu(z) - c` (negated for `<`). `bare` marks the
/// shorthand form where a channel name alone stands for `channel > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Predicate {
    pub expr: SignalExpr,
    pub op: CmpOp,
    pub threshold: f64,
    pub bare: bool,
}

impl Predicate {
    pub fn gt(expr: SignalExpr, threshold: f64) -> Self {
        Self { expr, op: CmpOp::Gt, threshold, bare: false }
    }

    pub fn lt(expr: SignalExpr, threshold: f64) -> Self {
        Self { expr, op: CmpOp::Lt, threshold, bare: false }
    }

    pub fn bare_channel(c: Channel) -> Self {
        Self { expr: SignalExpr::Channel(c), op: CmpOp::Gt, threshold: 0.0, bare: true }
    }
}

/// STL formula over discrete-time signals.
#[derive(Debug, Clone, PartialEq)]
pub enum StlFormula {
    True,
    Pred(Predicate),
    Not(Box<StlFormula>),
    And(Box<StlFormula>, Box<StlFormula>),
    Or(Box<StlFormula>, Box<StlFormula>),
    Implies(Box<StlFormula>, Box<StlFormula>),
    Until(Interval, Box<StlFormula>, Box<StlFormula>),
    Eventually(Interval, Box<StlFormula>),
    Always(Interval, Box<StlFormula>),
}

impl StlFormula {
    pub fn not(f: StlFormula) -> Self {
        StlFormula::Not(Box::new(f))
    }

    pub fn and(a: StlFormula, b: StlFormula) -> Self {
        StlFormula::And(Box::new(a), Box::new(b))
    }

    pub fn or(a: StlFormula, b: StlFormula) -> Self {
        StlFormula::Or(Box::new(a), Box::new(b))
    }

    pub fn implies(a: StlFormula, b: StlFormula) -> Self {
        StlFormula::Implies(Box::new(a), Box::new(b))
    }

    pub fn until(interval: Interval, a: StlFormula, b: StlFormula) -> Self {
        StlFormula::Until(interval, Box::new(a), Box::new(b))
    }

    pub fn eventually(interval: Interval, f: StlFormula) -> Self {
        StlFormula::Eventually(interval, Box::new(f))
    }

    pub fn always(interval: Interval, f: StlFormula) -> Self {
        StlFormula::Always(interval, Box::new(f))
    }

    /// Nesting depth counting min/max-introducing operators; used by the
    /// smooth-approximation error bound.
    pub fn minmax_depth(&self) -> usize {
        match self {
            StlFormula::True | StlFormula::Pred(_) => 0,
            StlFormula::Not(f) => f.minmax_depth(),
            StlFormula::And(a, b) | StlFormula::Or(a, b) | StlFormula::Implies(a, b) => {
                1 + a.minmax_depth().max(b.minmax_depth())
            }
            StlFormula::Until(_, a, b) => 2 + a.minmax_depth().max(b.minmax_depth()),
            StlFormula::Eventually(_, f) | StlFormula::Always(_, f) => 1 + f.minmax_depth(),
        }
    }

    /// Convert second-denominated intervals to steps, rounding down.
    pub fn intervals_seconds_to_steps(&self, dt: f64) -> StlFormula {
        let conv = |iv: &Interval| Interval {
            lo: (iv.lo as f64 / dt).floor() as usize,
            hi: iv.hi.map(|h| (h as f64 / dt).floor() as usize),
        };
        match self {
            StlFormula::True => StlFormula::True,
            StlFormula::Pred(p) => StlFormula::Pred(p.clone()),
            StlFormula::Not(f) => StlFormula::not(f.intervals_seconds_to_steps(dt)),
            StlFormula::And(a, b) => StlFormula::and(
                a.intervals_seconds_to_steps(dt),
                b.intervals_seconds_to_steps(dt),
            ),
            StlFormula::Or(a, b) => StlFormula::or(
                a.intervals_seconds_to_steps(dt),
                b.intervals_seconds_to_steps(dt),
            ),
            StlFormula::Implies(a, b) => StlFormula::implies(
                a.intervals_seconds_to_steps(dt),
                b.intervals_seconds_to_steps(dt),
            ),
            StlFormula::Until(iv, a, b) => StlFormula::until(
                conv(iv),
                a.intervals_seconds_to_steps(dt),
                b.intervals_seconds_to_steps(dt),
            ),
            StlFormula::Eventually(iv, f) => {
                StlFormula::eventually(conv(iv), f.intervals_seconds_to_steps(dt))
            }
            StlFormula::Always(iv, f) => {
                StlFormula::always(conv(iv), f.intervals_seconds_to_steps(dt))
            }
        }
    }
}

// Precedence levels for printing: implies < or < and < until < unary.
const PREC_IMPLIES: u8 = 1;
const PREC_OR: u8 = 2;
const PREC_AND: u8 = 3;
const PREC_UNTIL: u8 = 4;
const PREC_UNARY: u8 = 5;

fn formula_prec(f: &StlFormula) -> u8 {
    match f {
        StlFormula::Implies(..) => PREC_IMPLIES,
        StlFormula::Or(..) => PREC_OR,
        StlFormula::And(..) => PREC_AND,
        StlFormula::Until(..) => PREC_UNTIL,
        _ => PREC_UNARY,
    }
}

fn write_formula(f: &StlFormula, out: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
    let prec = formula_prec(f);
    let parens = prec < min_prec;
    if parens {
        write!(out, "(")?;
    }
    match f {
        StlFormula::True => write!(out, "true")?,
        StlFormula::Pred(p) => write_predicate(p, out)?,
        StlFormula::Not(inner) => {
            write!(out, "not ")?;
            write_formula(inner, out, PREC_UNARY)?;
        }
        StlFormula::And(a, b) => {
            write_formula(a, out, PREC_AND)?;
            write!(out, " and ")?;
            write_formula(b, out, PREC_AND + 1)?;
        }
        StlFormula::Or(a, b) => {
            write_formula(a, out, PREC_OR)?;
            write!(out, " or ")?;
            write_formula(b, out, PREC_OR + 1)?;
        }
        StlFormula::Implies(a, b) => {
            write_formula(a, out, PREC_IMPLIES + 1)?;
            write!(out, " implies ")?;
            write_formula(b, out, PREC_IMPLIES)?;
        }
        StlFormula::Until(iv, a, b) => {
            write_formula(a, out, PREC_UNTIL)?;
            write!(out, " until")?;
            if !iv.is_unbounded_from_zero() {
                write!(out, "{iv}")?;
            }
            write!(out, " ")?;
            write_formula(b, out, PREC_UNTIL + 1)?;
        }
        StlFormula::Eventually(iv, inner) => {
            write!(out, "eventually")?;
            if !iv.is_unbounded_from_zero() {
                write!(out, "{iv}")?;
            }
            write!(out, " (")?;
            write_formula(inner, out, 0)?;
            write!(out, ")")?;
        }
        StlFormula::Always(iv, inner) => {
            write!(out, "always")?;
            if !iv.is_unbounded_from_zero() {
                write!(out, "{iv}")?;
            }
            write!(out, " (")?;
            write_formula(inner, out, 0)?;
            write!(out, ")")?;
        }
    }
    if parens {
        write!(out, ")")?;
    }
    Ok(())
}

fn write_predicate(p: &Predicate, out: &mut fmt::Formatter<'_>) -> fmt::Result {
    if p.bare {
        if let SignalExpr::Channel(c) = &p.expr {
            return write!(out, "{}", c.name());
        }
    }
    write_expr(&p.expr, out, 0)?;
    let op = match p.op {
        CmpOp::Lt => "<",
        CmpOp::Gt => ">",
    };
    write!(out, " {op} {}", p.threshold)
}

// Expression precedence: add/sub < mul < atoms.
fn expr_prec(e: &SignalExpr) -> u8 {
    match e {
        SignalExpr::Add(..) | SignalExpr::Sub(..) => 1,
        SignalExpr::Mul(..) => 2,
        _ => 3,
    }
}

fn write_expr(e: &SignalExpr, out: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
    let prec = expr_prec(e);
    let parens = prec < min_prec;
    if parens {
        write!(out, "(")?;
    }
    match e {
        SignalExpr::Channel(c) => write!(out, "{}", c.name())?,
        SignalExpr::Const(v) => {
            if *v < 0.0 {
                // A leading minus would re-parse as subtraction in some
                // positions; keep negatives parenthesized.
                write!(out, "({v})")?;
            } else {
                write!(out, "{v}")?;
            }
        }
        SignalExpr::Add(a, b) => {
            write_expr(a, out, 1)?;
            write!(out, " + ")?;
            write_expr(b, out, 2)?;
        }
        SignalExpr::Sub(a, b) => {
            write_expr(a, out, 1)?;
            write!(out, " - ")?;
            write_expr(b, out, 2)?;
        }
        SignalExpr::Mul(a, b) => {
            write_expr(a, out, 2)?;
            write!(out, " * ")?;
            write_expr(b, out, 3)?;
        }
        SignalExpr::Abs(a) => {
            write!(out, "abs(")?;
            write_expr(a, out, 0)?;
            write!(out, ")")?;
        }
        SignalExpr::Dist(a, b, c, d) => {
            write!(out, "dist(")?;
            write_expr(a, out, 0)?;
            write!(out, ", ")?;
            write_expr(b, out, 0)?;
            write!(out, ", ")?;
            write_expr(c, out, 0)?;
            write!(out, ", ")?;
            write_expr(d, out, 0)?;
            write!(out, ")")?;
        }
        SignalExpr::AgentDist(idx) => write!(out, "agent_dist({idx})")?,
    }
    if parens {
        write!(out, ")")?;
    }
    Ok(())
}

impl fmt::Display for StlFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_formula(self, f, 0)
    }
}

impl fmt::Display for SignalExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_expr(self, f, 0)
    }
}
