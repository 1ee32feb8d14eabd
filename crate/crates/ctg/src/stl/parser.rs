//! Recursive-descent parser for the formula language.
//!
//! ```text
//! formula  := "true" | pred | "not" formula
//!           | formula ("and" | "or" | "implies") formula
//!           | ("always" | "eventually") interval? "(" formula ")"
//!           | formula "until" interval? formula
//! interval := "[" int "," (int | "inf") "]"
//! pred     := expr ("<" | ">") number | channel
//! expr     := channel | number | expr ("+"|"-"|"*") expr
//!           | "abs(" expr ")" | "dist(" expr "," expr "," expr "," expr ")"
//!           | "agent_dist(" int ")"
//! ```
//!
//! `#` starts a comment running to the end of the line. Precedence, lowest
//! to highest: implies (right-associative), or, and, until, unary. A bare
//! channel name in formula position is shorthand for `channel > 0`.

use super::ast::{Channel, Interval, Predicate, SignalExpr, StlFormula};
use std::fmt;

#[derive(Debug, Clone)]
pub struct ParseError {
    pub message: String,
    pub line: usize,
    pub col: usize,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}, column {}: {}", self.line, self.col, self.message)
    }
}

impl std::error::Error for ParseError {}

/// Parse a formula from text. The whole input must be consumed.
pub fn parse_formula(text: &str) -> Result<StlFormula, ParseError> {
    let mut p = Parser::new(text);
    let f = p.parse_formula()?;
    p.skip_ws();
    if p.pos < p.input.len() {
        return Err(p.error_here(format!(
            "unexpected trailing input: `{}`",
            p.remaining().chars().take(20).collect::<String>().trim_end()
        )));
    }
    Ok(f)
}

struct Parser<'a> {
    input: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(input: &'a str) -> Self {
        Self { input, pos: 0 }
    }

    fn remaining(&self) -> &str {
        &self.input[self.pos..]
    }

    fn peek(&self) -> Option<char> {
        self.remaining().chars().next()
    }

    fn error_at(&self, pos: usize, message: String) -> ParseError {
        let before = &self.input[..pos.min(self.input.len())];
        let line = before.matches('\n').count() + 1;
        let col = before.chars().rev().take_while(|c| *c != '\n').count() + 1;
        ParseError { message, line, col }
    }

    fn error_here(&self, message: String) -> ParseError {
        self.error_at(self.pos, message)
    }

    fn skip_ws(&mut self) {
        loop {
            match self.peek() {
                Some(c) if c.is_whitespace() => self.pos += c.len_utf8(),
                Some('#') => {
                    while let Some(c) = self.peek() {
                        self.pos += c.len_utf8();
                        if c == '\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
    }

    fn consume(&mut self, expected: char) -> Result<(), ParseError> {
        self.skip_ws();
        if self.peek() == Some(expected) {
            self.pos += expected.len_utf8();
            Ok(())
        } else {
            Err(self.error_here(format!(
                "expected `{expected}`, found {}",
                self.peek().map(|c| format!("`{c}`")).unwrap_or_else(|| "end of input".into())
            )))
        }
    }

    /// Consume `kw` if present as a whole word.
    fn try_keyword(&mut self, kw: &str) -> bool {
        self.skip_ws();
        let rest = self.remaining();
        if rest.starts_with(kw) {
            let after = &rest[kw.len()..];
            if after.chars().next().is_none_or(|c| !c.is_alphanumeric() && c != '_') {
                self.pos += kw.len();
                return true;
            }
        }
        false
    }

    fn parse_ident(&mut self) -> Result<(String, usize), ParseError> {
        self.skip_ws();
        let start = self.pos;
        match self.peek() {
            Some(c) if c.is_alphabetic() || c == '_' => self.pos += c.len_utf8(),
            _ => return Err(self.error_here("expected identifier".into())),
        }
        while let Some(c) = self.peek() {
            if c.is_alphanumeric() || c == '_' {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
        Ok((self.input[start..self.pos].to_string(), start))
    }

    fn parse_number(&mut self) -> Result<f64, ParseError> {
        self.skip_ws();
        let start = self.pos;
        if self.peek() == Some('-') {
            self.pos += 1;
        }
        let mut digits = false;
        while let Some(c) = self.peek() {
            if c.is_ascii_digit() {
                digits = true;
                self.pos += 1;
            } else {
                break;
            }
        }
        if self.peek() == Some('.') {
            self.pos += 1;
            while let Some(c) = self.peek() {
                if c.is_ascii_digit() {
                    digits = true;
                    self.pos += 1;
                } else {
                    break;
                }
            }
        }
        if !digits {
            return Err(self.error_at(start, "expected number".into()));
        }
        self.input[start..self.pos]
            .parse()
            .map_err(|_| self.error_at(start, "invalid number".into()))
    }

    fn parse_usize(&mut self) -> Result<usize, ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error_at(start, "expected integer".into()));
        }
        self.input[start..self.pos]
            .parse()
            .map_err(|_| self.error_at(start, "integer too large".into()))
    }

    fn parse_interval_opt(&mut self) -> Result<Interval, ParseError> {
        self.skip_ws();
        if self.peek() != Some('[') {
            return Ok(Interval::unbounded());
        }
        let open = self.pos;
        self.consume('[')?;
        let lo = self.parse_usize()?;
        self.consume(',')?;
        self.skip_ws();
        let hi = if self.try_keyword("inf") { None } else { Some(self.parse_usize()?) };
        self.consume(']')?;
        Interval::new(lo, hi).map_err(|m| self.error_at(open, m))
    }

    // Formula precedence chain.

    fn parse_formula(&mut self) -> Result<StlFormula, ParseError> {
        self.parse_implies()
    }

    fn parse_implies(&mut self) -> Result<StlFormula, ParseError> {
        let lhs = self.parse_or()?;
        if self.try_keyword("implies") {
            let rhs = self.parse_implies()?; // right-associative
            return Ok(StlFormula::implies(lhs, rhs));
        }
        Ok(lhs)
    }

    fn parse_or(&mut self) -> Result<StlFormula, ParseError> {
        let mut lhs = self.parse_and()?;
        while self.try_keyword("or") {
            let rhs = self.parse_and()?;
            lhs = StlFormula::or(lhs, rhs);
        }
        Ok(lhs)
    }

    fn parse_and(&mut self) -> Result<StlFormula, ParseError> {
        let mut lhs = self.parse_until()?;
        while self.try_keyword("and") {
            let rhs = self.parse_until()?;
            lhs = StlFormula::and(lhs, rhs);
        }
        Ok(lhs)
    }

    fn parse_until(&mut self) -> Result<StlFormula, ParseError> {
        let mut lhs = self.parse_unary()?;
        while self.try_keyword("until") {
            let iv = self.parse_interval_opt()?;
            let rhs = self.parse_unary()?;
            lhs = StlFormula::until(iv, lhs, rhs);
        }
        Ok(lhs)
    }

    fn parse_unary(&mut self) -> Result<StlFormula, ParseError> {
        self.skip_ws();
        if self.try_keyword("true") {
            return Ok(StlFormula::True);
        }
        if self.try_keyword("not") {
            let inner = self.parse_unary()?;
            return Ok(StlFormula::not(inner));
        }
        if self.try_keyword("always") {
            let iv = self.parse_interval_opt()?;
            self.consume('(')?;
            let inner = self.parse_formula()?;
            self.consume(')')?;
            return Ok(StlFormula::always(iv, inner));
        }
        if self.try_keyword("eventually") {
            let iv = self.parse_interval_opt()?;
            self.consume('(')?;
            let inner = self.parse_formula()?;
            self.consume(')')?;
            return Ok(StlFormula::eventually(iv, inner));
        }

        // Try a predicate first; fall back to a parenthesized sub-formula.
        let checkpoint = self.pos;
        match self.parse_expr() {
            Ok(expr) => {
                self.skip_ws();
                match self.peek() {
                    Some('<') => {
                        self.pos += 1;
                        let c = self.parse_number()?;
                        Ok(StlFormula::Pred(Predicate::lt(expr, c)))
                    }
                    Some('>') => {
                        self.pos += 1;
                        let c = self.parse_number()?;
                        Ok(StlFormula::Pred(Predicate::gt(expr, c)))
                    }
                    _ => {
                        if let SignalExpr::Channel(c) = expr {
                            Ok(StlFormula::Pred(Predicate::bare_channel(c)))
                        } else {
                            Err(self.error_here("expected `<` or `>` after expression".into()))
                        }
                    }
                }
            }
            Err(expr_err) => {
                self.pos = checkpoint;
                self.skip_ws();
                if self.peek() == Some('(') {
                    self.consume('(')?;
                    let inner = self.parse_formula()?;
                    self.consume(')')?;
                    Ok(inner)
                } else {
                    Err(expr_err)
                }
            }
        }
    }

    // Expression precedence chain: add/sub < mul < factor.

    fn parse_expr(&mut self) -> Result<SignalExpr, ParseError> {
        let mut lhs = self.parse_term()?;
        loop {
            self.skip_ws();
            match self.peek() {
                Some('+') => {
                    self.pos += 1;
                    let rhs = self.parse_term()?;
                    lhs = SignalExpr::Add(Box::new(lhs), Box::new(rhs));
                }
                Some('-') => {
                    self.pos += 1;
                    let rhs = self.parse_term()?;
                    lhs = SignalExpr::Sub(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn parse_term(&mut self) -> Result<SignalExpr, ParseError> {
        let mut lhs = self.parse_factor()?;
        loop {
            self.skip_ws();
            if self.peek() == Some('*') {
                self.pos += 1;
                let rhs = self.parse_factor()?;
                lhs = SignalExpr::Mul(Box::new(lhs), Box::new(rhs));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn parse_factor(&mut self) -> Result<SignalExpr, ParseError> {
        self.skip_ws();
        match self.peek() {
            Some('(') => {
                self.consume('(')?;
                let e = self.parse_expr()?;
                self.consume(')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == '-' || c == '.' => {
                Ok(SignalExpr::Const(self.parse_number()?))
            }
            Some(c) if c.is_alphabetic() || c == '_' => {
                let (ident, start) = self.parse_ident()?;
                match ident.as_str() {
                    "abs" => {
                        self.consume('(')?;
                        let e = self.parse_expr()?;
                        self.consume(')')?;
                        Ok(SignalExpr::Abs(Box::new(e)))
                    }
                    "dist" => {
                        self.consume('(')?;
                        let a = self.parse_expr()?;
                        self.consume(',')?;
                        let b = self.parse_expr()?;
                        self.consume(',')?;
                        let c = self.parse_expr()?;
                        self.consume(',')?;
                        let d = self.parse_expr()?;
                        self.consume(')')?;
                        Ok(SignalExpr::Dist(Box::new(a), Box::new(b), Box::new(c), Box::new(d)))
                    }
                    "agent_dist" => {
                        self.consume('(')?;
                        let idx = self.parse_usize()?;
                        self.consume(')')?;
                        Ok(SignalExpr::AgentDist(idx))
                    }
                    name => match Channel::from_name(name) {
                        Some(ch) => Ok(SignalExpr::Channel(ch)),
                        None => {
                            Err(self.error_at(start, format!("unknown channel name `{name}`")))
                        }
                    },
                }
            }
            _ => Err(self.error_here("expected expression".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::ast::CmpOp;
    use super::*;

    #[test]
    fn parses_always_predicate() {
        let f = parse_formula("always (v < 12.0)").unwrap();
        assert_eq!(
            f,
            StlFormula::always(
                Interval::unbounded(),
                StlFormula::Pred(Predicate::lt(SignalExpr::Channel(Channel::V), 12.0)),
            )
        );
    }

    #[test]
    fn parses_bounded_eventually_with_dist() {
        let f = parse_formula("eventually[0,10] (dist(x,y, 5.0,5.0) < 2.0)").unwrap();
        match &f {
            StlFormula::Eventually(iv, inner) => {
                assert_eq!(*iv, Interval::new(0, Some(10)).unwrap());
                assert!(matches!(**inner, StlFormula::Pred(_)));
            }
            other => panic!("unexpected AST: {other:?}"),
        }
    }

    #[test]
    fn parses_stop_sign_shape() {
        let f = parse_formula(
            "always (in_box implies eventually (always[0,5] (in_box and (abs(v) < 0.1))))",
        )
        .unwrap();
        // always -> implies -> (bare in_box, eventually -> always[0,5] -> and)
        let StlFormula::Always(_, inner) = &f else { panic!("expected always") };
        let StlFormula::Implies(lhs, rhs) = &**inner else { panic!("expected implies") };
        assert!(matches!(&**lhs, StlFormula::Pred(p) if p.bare));
        let StlFormula::Eventually(_, ev_inner) = &**rhs else { panic!("expected eventually") };
        let StlFormula::Always(iv, _) = &**ev_inner else { panic!("expected inner always") };
        assert_eq!(*iv, Interval::new(0, Some(5)).unwrap());
    }

    #[test]
    fn precedence_and_binds_tighter_than_or() {
        let f = parse_formula("v > 1 or v > 2 and v > 3").unwrap();
        let StlFormula::Or(_, rhs) = &f else { panic!("expected or at top") };
        assert!(matches!(&**rhs, StlFormula::And(..)));
    }

    #[test]
    fn implies_is_right_associative() {
        let f = parse_formula("v > 1 implies v > 2 implies v > 3").unwrap();
        let StlFormula::Implies(_, rhs) = &f else { panic!("expected implies") };
        assert!(matches!(&**rhs, StlFormula::Implies(..)));
    }

    #[test]
    fn until_with_and_without_interval() {
        let f = parse_formula("v < 5 until[0,2] v > 4").unwrap();
        assert!(matches!(f, StlFormula::Until(iv, ..) if iv == Interval::new(0, Some(2)).unwrap()));
        let g = parse_formula("v < 5 until v > 4").unwrap();
        assert!(matches!(g, StlFormula::Until(iv, ..) if iv.is_unbounded_from_zero()));
    }

    #[test]
    fn comments_and_whitespace() {
        let f = parse_formula("# the speed stays low\nalways (v < 5) # trailing\n").unwrap();
        assert!(matches!(f, StlFormula::Always(..)));
    }

    #[test]
    fn unknown_channel_is_an_error() {
        let err = parse_formula("always (vel < 5)").unwrap_err();
        assert!(err.message.contains("unknown channel name `vel`"), "{}", err.message);
    }

    #[test]
    fn malformed_interval_is_an_error() {
        let err = parse_formula("always[7,3] (v < 5)").unwrap_err();
        assert!(err.message.contains("lo > hi"), "{}", err.message);
    }

    #[test]
    fn syntax_error_reports_line_and_column() {
        let err = parse_formula("# comment line\nalways (v <\n)").unwrap_err();
        assert_eq!(err.line, 3);
        assert_eq!(err.col, 1);
    }

    #[test]
    fn trailing_input_is_an_error() {
        let err = parse_formula("v > 1 bogus bogus").unwrap_err();
        assert!(err.message.contains("trailing"), "{}", err.message);
    }

    #[test]
    fn parenthesized_expression_predicate() {
        let f = parse_formula("(v - 10) < 0").unwrap();
        let StlFormula::Pred(p) = &f else { panic!("expected predicate") };
        assert!(matches!(p.expr, SignalExpr::Sub(..)));
        assert_eq!(p.op, CmpOp::Lt);
    }

    #[test]
    fn print_parse_roundtrip_hand_cases() {
        let cases = [
            "always (v < 12)",
            "eventually[0,10] (dist(x, y, 5, 5) < 2)",
            "always (in_box implies eventually (always[0,5] (in_box and abs(v) < 0.1)))",
            "v < 5 until[0,2] v > 4",
            "not (v > 1 or v < -1) and true",
            "v - v_limit < 0",
            "abs(v - v_target) < 0.5",
            "offroad_dist > 0.5",
            "agent_dist(2) > 4",
            "x * 2 + y - 1 < 3",
            "v > 1 implies v > 2 implies v > 3",
        ];
        for text in cases {
            let f = parse_formula(text).unwrap_or_else(|e| panic!("{text}: {e}"));
            let printed = f.to_string();
            let reparsed =
                parse_formula(&printed).unwrap_or_else(|e| panic!("reparse `{printed}`: {e}"));
            assert_eq!(f, reparsed, "round-trip failed: `{text}` -> `{printed}`");
        }
    }
}
