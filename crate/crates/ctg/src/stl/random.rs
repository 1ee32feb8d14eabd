//! Random formula and signal generation for property testing and
//! verification harnesses.
//!
//! Temporal operators are generated against a step budget so that every
//! clamped window stays non-empty when evaluation starts at step 0.

use super::ast::{Channel, Interval, Predicate, SignalExpr, StlFormula};
use super::signal::Signal;
use ndarray::Array2;
use rand::Rng;

const PLAIN_CHANNELS: [Channel; 6] =
    [Channel::X, Channel::Y, Channel::V, Channel::Theta, Channel::Accel, Channel::YawRate];

/// A random signal with states in a moderate box and speeds kept positive.
pub fn random_signal(rng: &mut impl Rng, t_len: usize) -> Signal {
    let mut states = Array2::zeros((t_len, 4));
    for t in 0..t_len {
        states[[t, 0]] = rng.gen_range(-10.0..10.0);
        states[[t, 1]] = rng.gen_range(-10.0..10.0);
        states[[t, 2]] = rng.gen_range(0.0..10.0);
        states[[t, 3]] = rng.gen_range(-3.0..3.0);
    }
    let actions = Array2::from_shape_fn((t_len, 2), |_| rng.gen_range(-2.0..2.0));
    Signal::new(states, actions, 0.1)
}

fn random_expr(rng: &mut impl Rng, allow_kinks: bool) -> SignalExpr {
    let c = PLAIN_CHANNELS[rng.gen_range(0..PLAIN_CHANNELS.len())];
    let base = SignalExpr::Channel(c);
    match rng.gen_range(0..5) {
        0 if allow_kinks => SignalExpr::Abs(Box::new(base)),
        1 if allow_kinks => SignalExpr::Dist(
            Box::new(SignalExpr::Channel(Channel::X)),
            Box::new(SignalExpr::Channel(Channel::Y)),
            Box::new(SignalExpr::Const(rng.gen_range(-8.0..8.0))),
            Box::new(SignalExpr::Const(rng.gen_range(-8.0..8.0))),
        ),
        2 => SignalExpr::Sub(Box::new(base), Box::new(SignalExpr::Const(rng.gen_range(-5.0..5.0)))),
        3 => SignalExpr::Add(
            Box::new(base),
            Box::new(SignalExpr::Mul(
                Box::new(SignalExpr::Channel(
                    PLAIN_CHANNELS[rng.gen_range(0..PLAIN_CHANNELS.len())],
                )),
                Box::new(SignalExpr::Const(rng.gen_range(-1.0..1.0))),
            )),
        ),
        _ => base,
    }
}

fn random_pred(rng: &mut impl Rng, allow_kinks: bool) -> StlFormula {
    let expr = random_expr(rng, allow_kinks);
    let threshold = rng.gen_range(-6.0..6.0);
    if rng.gen_bool(0.5) {
        StlFormula::Pred(Predicate::gt(expr, threshold))
    } else {
        StlFormula::Pred(Predicate::lt(expr, threshold))
    }
}

fn random_interval(rng: &mut impl Rng, budget: usize) -> (Interval, usize) {
    let lo = rng.gen_range(0..=budget.min(2));
    let iv = if rng.gen_bool(0.3) {
        Interval::new(lo, None).unwrap()
    } else {
        let hi = lo + rng.gen_range(0..=4);
        Interval::new(lo, Some(hi)).unwrap()
    };
    (iv, budget - lo)
}

fn gen(rng: &mut impl Rng, depth: usize, budget: usize, allow_kinks: bool) -> StlFormula {
    if depth == 0 || rng.gen_bool(0.25) {
        if rng.gen_bool(0.05) {
            return StlFormula::True;
        }
        return random_pred(rng, allow_kinks);
    }
    match rng.gen_range(0..7) {
        0 => StlFormula::not(gen(rng, depth - 1, budget, allow_kinks)),
        1 => StlFormula::and(
            gen(rng, depth - 1, budget, allow_kinks),
            gen(rng, depth - 1, budget, allow_kinks),
        ),
        2 => StlFormula::or(
            gen(rng, depth - 1, budget, allow_kinks),
            gen(rng, depth - 1, budget, allow_kinks),
        ),
        3 => StlFormula::implies(
            gen(rng, depth - 1, budget, allow_kinks),
            gen(rng, depth - 1, budget, allow_kinks),
        ),
        4 => {
            let (iv, rest) = random_interval(rng, budget);
            StlFormula::eventually(iv, gen(rng, depth - 1, rest, allow_kinks))
        }
        5 => {
            let (iv, rest) = random_interval(rng, budget);
            StlFormula::always(iv, gen(rng, depth - 1, rest, allow_kinks))
        }
        _ => {
            let (iv, rest) = random_interval(rng, budget);
            StlFormula::until(
                iv,
                gen(rng, depth - 1, rest, allow_kinks),
                gen(rng, depth - 1, rest, allow_kinks),
            )
        }
    }
}

/// Random formula with min/max depth at most `max_depth`, evaluable at step
/// 0 of any signal with at least `t_len` steps.
pub fn random_formula(rng: &mut impl Rng, max_depth: usize, t_len: usize) -> StlFormula {
    gen(rng, max_depth, t_len.saturating_sub(1), true)
}

/// Like [`random_formula`] but without `abs`/`dist` sub-expressions, so the
/// only non-smooth points are min/max ties.
pub fn random_formula_smooth_exprs(
    rng: &mut impl Rng,
    max_depth: usize,
    t_len: usize,
) -> StlFormula {
    gen(rng, max_depth, t_len.saturating_sub(1), false)
}

/// Smallest |inner value| across all `abs`, `dist`, and `speed` kink sites
/// in the formula over the whole signal; `INFINITY` if there are none.
/// Used to exclude near-kink instances from finite-difference checks.
pub fn min_kink_margin(f: &StlFormula, sig: &Signal) -> f64 {
    fn expr_value(e: &SignalExpr, sig: &Signal, t: usize) -> f64 {
        match e {
            SignalExpr::Const(v) => *v,
            SignalExpr::Channel(c) => match c {
                Channel::X => sig.states[[t, 0]],
                Channel::Y => sig.states[[t, 1]],
                Channel::V => sig.states[[t, 2]],
                Channel::Theta => sig.states[[t, 3]],
                Channel::Accel => sig.actions[[t, 0]],
                Channel::YawRate => sig.actions[[t, 1]],
                Channel::Speed => sig.states[[t, 2]].abs(),
                _ => 0.0,
            },
            SignalExpr::Add(a, b) => expr_value(a, sig, t) + expr_value(b, sig, t),
            SignalExpr::Sub(a, b) => expr_value(a, sig, t) - expr_value(b, sig, t),
            SignalExpr::Mul(a, b) => expr_value(a, sig, t) * expr_value(b, sig, t),
            SignalExpr::Abs(a) => expr_value(a, sig, t).abs(),
            SignalExpr::Dist(a, b, c, d) => {
                let dx = expr_value(a, sig, t) - expr_value(c, sig, t);
                let dy = expr_value(b, sig, t) - expr_value(d, sig, t);
                (dx * dx + dy * dy).sqrt()
            }
            SignalExpr::AgentDist(_) => f64::INFINITY,
        }
    }

    fn expr_margin(e: &SignalExpr, sig: &Signal, t: usize) -> f64 {
        match e {
            SignalExpr::Const(_) | SignalExpr::AgentDist(_) => f64::INFINITY,
            SignalExpr::Channel(Channel::Speed) => sig.states[[t, 2]].abs(),
            SignalExpr::Channel(_) => f64::INFINITY,
            SignalExpr::Add(a, b) | SignalExpr::Sub(a, b) | SignalExpr::Mul(a, b) => {
                expr_margin(a, sig, t).min(expr_margin(b, sig, t))
            }
            SignalExpr::Abs(a) => expr_value(a, sig, t).abs().min(expr_margin(a, sig, t)),
            SignalExpr::Dist(a, b, c, d) => {
                let dx = expr_value(a, sig, t) - expr_value(c, sig, t);
                let dy = expr_value(b, sig, t) - expr_value(d, sig, t);
                let norm = (dx * dx + dy * dy).sqrt();
                norm.min(expr_margin(a, sig, t))
                    .min(expr_margin(b, sig, t))
                    .min(expr_margin(c, sig, t))
                    .min(expr_margin(d, sig, t))
            }
        }
    }

    fn walk(f: &StlFormula, sig: &Signal, worst: &mut f64) {
        match f {
            StlFormula::True => {}
            StlFormula::Pred(p) => {
                for t in 0..sig.len() {
                    *worst = worst.min(expr_margin(&p.expr, sig, t));
                }
            }
            StlFormula::Not(a)
            | StlFormula::Eventually(_, a)
            | StlFormula::Always(_, a) => walk(a, sig, worst),
            StlFormula::And(a, b)
            | StlFormula::Or(a, b)
            | StlFormula::Implies(a, b)
            | StlFormula::Until(_, a, b) => {
                walk(a, sig, worst);
                walk(b, sig, worst);
            }
        }
    }

    let mut worst = f64::INFINITY;
    walk(f, sig, &mut worst);
    worst
}
