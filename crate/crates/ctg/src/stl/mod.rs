//! Signal temporal logic: formula language, exact and smoothed quantitative
//! robustness, and exact gradients with respect to the signal.

pub mod ast;
pub mod eval;
pub mod parser;
pub mod random;
pub mod signal;

pub use ast::{Channel, CmpOp, Interval, Predicate, SignalExpr, StlFormula};
pub use eval::{
    robustness, robustness_grad, EvalError, RobustnessConfig, RobustnessGrad, RobustnessMode,
};
pub use parser::{parse_formula, ParseError};
pub use signal::{SceneConstants, Signal};
