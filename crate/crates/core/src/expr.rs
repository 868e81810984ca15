//! Closed-form expressions in the two chart variables `x1`, `x2`.
//!
//! Vector-field coefficients are given as strings, parsed into an [`Expr`]
//! tree and differentiated symbolically. Derivatives up to third order of the
//! drift coefficients feed every invariant in [`crate::geometry`].
//!
//! Grammar (loosest binding first):
//!
//! ```text
//! sum     := product (('+' | '-') product)*
//! product := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := atom ('^' integer)*
//! atom    := number | 'x1' | 'x2' | func '(' sum ')' | '(' sum ')'
//! integer := '-'? digits | '(' '-'? digits ')'
//! ```

use std::fmt;
use std::ops;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Var {
    X1,
    X2,
}

impl Var {
    /// Builds a variable from its 1-based index.
    pub fn from_index(i: usize) -> Option<Var> {
        match i {
            1 => Some(Var::X1),
            2 => Some(Var::X2),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Var::X1 => 1,
            Var::X2 => 2,
        }
    }

    fn slot(self) -> usize {
        self.index() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        match name {
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "exp" => Some(Func::Exp),
            "log" => Some(Func::Log),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Unary(Func, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at byte {offset}: expected {expected}, found {found}")]
    Syntax {
        offset: usize,
        expected: String,
        found: String,
    },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("domain error in `{node}`: {reason}")]
    Domain { node: String, reason: &'static str },
}

pub type Point = (f64, f64);

impl Expr {
    pub fn constant(c: f64) -> Expr {
        Expr::Const(c)
    }

    pub fn x1() -> Expr {
        Expr::Var(Var::X1)
    }

    pub fn x2() -> Expr {
        Expr::Var(Var::X2)
    }

    pub fn var(v: Var) -> Expr {
        Expr::Var(v)
    }

    pub fn powi(self, n: i32) -> Expr {
        Expr::Pow(Box::new(self), n)
    }

    pub fn apply(f: Func, arg: Expr) -> Expr {
        Expr::Unary(f, Box::new(arg))
    }

    pub fn parse(text: &str) -> Result<Expr, ExprError> {
        Parser::new(text).parse_all()
    }

    /// Numeric value at `point = (x1, x2)`.
    pub fn eval(&self, point: Point) -> Result<f64, ExprError> {
        let v = match self {
            Expr::Const(c) => *c,
            Expr::Var(Var::X1) => point.0,
            Expr::Var(Var::X2) => point.1,
            Expr::Neg(a) => -a.eval(point)?,
            Expr::Add(a, b) => a.eval(point)? + b.eval(point)?,
            Expr::Sub(a, b) => a.eval(point)? - b.eval(point)?,
            Expr::Mul(a, b) => a.eval(point)? * b.eval(point)?,
            Expr::Div(a, b) => {
                let num = a.eval(point)?;
                let den = b.eval(point)?;
                if den == 0.0 {
                    return Err(self.domain("division by zero"));
                }
                num / den
            }
            Expr::Pow(a, n) => {
                let base = a.eval(point)?;
                if base == 0.0 && *n < 0 {
                    return Err(self.domain("division by zero"));
                }
                base.powi(*n)
            }
            Expr::Unary(f, a) => {
                let x = a.eval(point)?;
                match f {
                    Func::Sin => x.sin(),
                    Func::Cos => x.cos(),
                    Func::Exp => x.exp(),
                    Func::Log => {
                        if x <= 0.0 {
                            return Err(self.domain("logarithm of a non-positive value"));
                        }
                        x.ln()
                    }
                }
            }
        };
        Ok(v)
    }

    fn domain(&self, reason: &'static str) -> ExprError {
        ExprError::Domain {
            node: self.to_string(),
            reason,
        }
    }

    /// Exact partial derivative with respect to `var`, folded by [`Expr::simplify`].
    pub fn diff(&self, var: Var) -> Expr {
        self.diff_raw(var).simplify()
    }

    /// Repeated partial derivative, one entry of `vars` per order.
    pub fn diff_n(&self, vars: &[Var]) -> Expr {
        vars.iter().fold(self.clone(), |e, v| e.diff(*v))
    }

    fn diff_raw(&self, var: Var) -> Expr {
        use Expr::*;
        match self {
            Const(_) => Const(0.0),
            Var(v) => Const(if *v == var { 1.0 } else { 0.0 }),
            Neg(a) => Neg(Box::new(a.diff_raw(var))),
            Add(a, b) => a.diff_raw(var) + b.diff_raw(var),
            Sub(a, b) => a.diff_raw(var) - b.diff_raw(var),
            Mul(a, b) => a.diff_raw(var) * (**b).clone() + (**a).clone() * b.diff_raw(var),
            Div(a, b) => {
                let num = a.diff_raw(var) * (**b).clone() - (**a).clone() * b.diff_raw(var);
                num / (**b).clone().powi(2)
            }
            Pow(a, n) => {
                if *n == 0 {
                    Const(0.0)
                } else {
                    Const(f64::from(*n)) * (**a).clone().powi(n - 1) * a.diff_raw(var)
                }
            }
            Unary(f, a) => {
                let inner = a.diff_raw(var);
                let arg = (**a).clone();
                let outer = match f {
                    Func::Sin => Expr::apply(Func::Cos, arg),
                    Func::Cos => Neg(Box::new(Expr::apply(Func::Sin, arg))),
                    Func::Exp => Expr::apply(Func::Exp, arg),
                    Func::Log => return inner / arg,
                };
                inner * outer
            }
        }
    }

    /// Constant folding plus identity and annihilator elimination.
    pub fn simplify(&self) -> Expr {
        use Expr::*;
        match self {
            Const(_) | Var(_) => self.clone(),
            Neg(a) => match a.simplify() {
                Const(c) => Const(-c),
                Neg(inner) => *inner,
                s => Neg(Box::new(s)),
            },
            Add(a, b) => match (a.simplify(), b.simplify()) {
                (Const(x), Const(y)) => Const(x + y),
                (Const(z), e) | (e, Const(z)) if z == 0.0 => e,
                (x, y) => x + y,
            },
            Sub(a, b) => match (a.simplify(), b.simplify()) {
                (Const(x), Const(y)) => Const(x - y),
                (e, Const(z)) if z == 0.0 => e,
                (Const(z), e) if z == 0.0 => Neg(Box::new(e)),
                (x, y) => x - y,
            },
            Mul(a, b) => match (a.simplify(), b.simplify()) {
                (Const(x), Const(y)) => Const(x * y),
                (Const(z), _) | (_, Const(z)) if z == 0.0 => Const(0.0),
                (Const(o), e) | (e, Const(o)) if o == 1.0 => e,
                (x, y) => x * y,
            },
            Div(a, b) => match (a.simplify(), b.simplify()) {
                (Const(x), Const(y)) if y != 0.0 => Const(x / y),
                (e, Const(o)) if o == 1.0 => e,
                (Const(z), d) if z == 0.0 && !matches!(d, Const(_)) => Const(0.0),
                (x, y) => x / y,
            },
            Pow(a, n) => match (a.simplify(), *n) {
                (_, 0) => Const(1.0),
                (e, 1) => e,
                (Const(c), k) if c != 0.0 || k > 0 => Const(c.powi(k)),
                (e, k) => e.powi(k),
            },
            Unary(f, a) => match (f, a.simplify()) {
                (Func::Log, Const(c)) if c <= 0.0 => Expr::apply(Func::Log, Const(c)),
                (f, Const(c)) => Const(apply_func(*f, c)),
                (f, e) => Expr::apply(*f, e),
            },
        }
    }

    /// True when the expression does not depend on either variable.
    pub fn is_constant(&self) -> bool {
        match self {
            Expr::Const(_) => true,
            Expr::Var(_) => false,
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Unary(_, a) => a.is_constant(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.is_constant() && b.is_constant()
            }
        }
    }

    pub fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Var(_) => 1,
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Unary(_, a) => 1 + a.node_count(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                1 + a.node_count() + b.node_count()
            }
        }
    }

    /// Flattens the tree into a postfix program for fast repeated evaluation.
    pub fn compile(&self) -> CompiledExpr {
        let mut ops = Vec::with_capacity(self.node_count());
        self.emit(&mut ops);
        let mut depth = 0usize;
        let mut max_depth = 0usize;
        for op in &ops {
            match op {
                Op::Const(_) | Op::Var(_) => depth += 1,
                Op::Add | Op::Sub | Op::Mul | Op::Div => depth -= 1,
                _ => {}
            }
            max_depth = max_depth.max(depth);
        }
        CompiledExpr { ops, max_depth }
    }

    fn emit(&self, ops: &mut Vec<Op>) {
        match self {
            Expr::Const(c) => ops.push(Op::Const(*c)),
            Expr::Var(v) => ops.push(Op::Var(v.slot())),
            Expr::Neg(a) => {
                a.emit(ops);
                ops.push(Op::Neg);
            }
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.emit(ops);
                b.emit(ops);
                ops.push(match self {
                    Expr::Add(..) => Op::Add,
                    Expr::Sub(..) => Op::Sub,
                    Expr::Mul(..) => Op::Mul,
                    _ => Op::Div,
                });
            }
            Expr::Pow(a, n) => {
                a.emit(ops);
                ops.push(Op::Pow(*n));
            }
            Expr::Unary(f, a) => {
                a.emit(ops);
                ops.push(Op::Func(*f));
            }
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(..) => 3,
            Expr::Pow(..) => 4,
            Expr::Const(c) if *c < 0.0 || c.is_sign_negative() => 3,
            _ => 5,
        }
    }
}

fn apply_func(f: Func, x: f64) -> f64 {
    match f {
        Func::Sin => x.sin(),
        Func::Cos => x.cos(),
        Func::Exp => x.exp(),
        Func::Log => x.ln(),
    }
}

pub fn parse(text: &str) -> Result<Expr, ExprError> {
    Expr::parse(text)
}

pub fn differentiate(e: &Expr, var: Var) -> Expr {
    e.diff(var)
}

pub fn evaluate(e: &Expr, point: Point) -> Result<f64, ExprError> {
    e.eval(point)
}

pub fn simplify(e: &Expr) -> Expr {
    e.simplify()
}

macro_rules! binop {
    ($trait:ident, $method:ident, $variant:ident) => {
        impl ops::$trait for Expr {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                Expr::$variant(Box::new(self), Box::new(rhs))
            }
        }
    };
}

binop!(Add, add, Add);
binop!(Sub, sub, Sub);
binop!(Mul, mul, Mul);
binop!(Div, div, Div);

impl ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::Neg(Box::new(self))
    }
}

impl From<f64> for Expr {
    fn from(c: f64) -> Expr {
        Expr::Const(c)
    }
}

impl fmt::Display for Expr {
    /// Prints in the parser's own grammar; `parse(e.to_string())` rebuilds `e`
    /// up to the sign of negative literals.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let wrap = |f: &mut fmt::Formatter<'_>, e: &Expr, min: u8| -> fmt::Result {
            if e.precedence() < min {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        };
        match self {
            Expr::Const(c) => {
                if c.is_sign_negative() {
                    write!(f, "-{}", -c)
                } else {
                    write!(f, "{c}")
                }
            }
            Expr::Var(v) => write!(f, "x{}", v.index()),
            Expr::Neg(a) => {
                write!(f, "-")?;
                wrap(f, a, 3)
            }
            Expr::Add(a, b) | Expr::Sub(a, b) => {
                wrap(f, a, 1)?;
                write!(f, " {} ", if matches!(self, Expr::Add(..)) { '+' } else { '-' })?;
                wrap(f, b, 2)
            }
            Expr::Mul(a, b) | Expr::Div(a, b) => {
                wrap(f, a, 2)?;
                write!(f, "{}", if matches!(self, Expr::Mul(..)) { '*' } else { '/' })?;
                wrap(f, b, 3)
            }
            Expr::Pow(a, n) => {
                wrap(f, a, 5)?;
                if *n < 0 {
                    write!(f, "^({n})")
                } else {
                    write!(f, "^{n}")
                }
            }
            Expr::Unary(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Const(f64),
    Var(usize),
    Neg,
    Add,
    Sub,
    Mul,
    Div,
    Pow(i32),
    Func(Func),
}

/// Postfix form of an [`Expr`] for hot loops (path simulation, grids).
///
/// Evaluation follows IEEE semantics without domain checks: a division by
/// zero yields an infinity rather than an error.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledExpr {
    ops: Vec<Op>,
    max_depth: usize,
}

const INLINE_STACK: usize = 32;

impl CompiledExpr {
    #[inline]
    pub fn eval(&self, x1: f64, x2: f64) -> f64 {
        if let [Op::Const(c)] = self.ops.as_slice() {
            return *c;
        }
        if self.max_depth <= INLINE_STACK {
            let mut stack = [0.0f64; INLINE_STACK];
            self.run(&mut stack, x1, x2)
        } else {
            let mut stack = vec![0.0f64; self.max_depth];
            self.run(&mut stack, x1, x2)
        }
    }

    #[inline]
    fn run(&self, stack: &mut [f64], x1: f64, x2: f64) -> f64 {
        let mut top = 0usize;
        for op in &self.ops {
            match *op {
                Op::Const(c) => {
                    stack[top] = c;
                    top += 1;
                }
                Op::Var(i) => {
                    stack[top] = if i == 0 { x1 } else { x2 };
                    top += 1;
                }
                Op::Neg => stack[top - 1] = -stack[top - 1],
                Op::Pow(n) => stack[top - 1] = stack[top - 1].powi(n),
                Op::Func(f) => stack[top - 1] = apply_func(f, stack[top - 1]),
                Op::Add | Op::Sub | Op::Mul | Op::Div => {
                    top -= 1;
                    let b = stack[top];
                    let a = &mut stack[top - 1];
                    match *op {
                        Op::Add => *a += b,
                        Op::Sub => *a -= b,
                        Op::Mul => *a *= b,
                        _ => *a /= b,
                    }
                }
            }
        }
        stack[0]
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Parser { src, pos: 0 }
    }

    fn parse_all(mut self) -> Result<Expr, ExprError> {
        let e = self.sum()?;
        self.skip_ws();
        if self.pos < self.src.len() {
            return Err(self.error("operator or end of input"));
        }
        Ok(e)
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn error(&self, expected: &str) -> ExprError {
        let found = match self.peek() {
            Some(c) => format!("`{c}`"),
            None => "end of input".to_string(),
        };
        ExprError::Syntax {
            offset: self.pos,
            expected: expected.to_string(),
            found,
        }
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ExprError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.error(&format!("`{c}`")))
        }
    }

    fn sum(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.product()?;
        loop {
            if self.eat('+') {
                lhs = lhs + self.product()?;
            } else if self.eat('-') {
                lhs = lhs - self.product()?;
            } else {
                return Ok(lhs);
            }
        }
    }

    fn product(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat('*') {
                lhs = lhs * self.unary()?;
            } else if self.eat('/') {
                lhs = lhs / self.unary()?;
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.eat('-') {
            Ok(Expr::Neg(Box::new(self.unary()?)))
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let mut base = self.atom()?;
        while self.eat('^') {
            let n = self.integer()?;
            base = base.powi(n);
        }
        Ok(base)
    }

    fn integer(&mut self) -> Result<i32, ExprError> {
        let parenthesized = self.eat('(');
        let negative = self.eat('-');
        self.skip_ws();
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error("integer exponent"));
        }
        let digits = &self.src[start..self.pos];
        let magnitude: i32 = digits.parse().map_err(|_| ExprError::Syntax {
            offset: start,
            expected: "integer exponent within 32-bit range".to_string(),
            found: digits.to_string(),
        })?;
        if parenthesized {
            self.expect(')')?;
        }
        Ok(if negative { -magnitude } else { magnitude })
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        self.skip_ws();
        match self.peek() {
            Some(c) if c.is_ascii_digit() || c == '.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == '_' => self.identifier(),
            Some('(') => {
                self.pos += 1;
                let e = self.sum()?;
                self.expect(')')?;
                Ok(e)
            }
            _ => Err(self.error("number, variable, function call or `(`")),
        }
    }

    fn number(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        let bytes = self.src.as_bytes();
        let mut end = start;
        while end < bytes.len() && (bytes[end].is_ascii_digit() || bytes[end] == b'.') {
            end += 1;
        }
        // optional exponent part: e[+-]digits
        if end < bytes.len() && (bytes[end] == b'e' || bytes[end] == b'E') {
            let mut k = end + 1;
            if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                k += 1;
            }
            if k < bytes.len() && bytes[k].is_ascii_digit() {
                while k < bytes.len() && bytes[k].is_ascii_digit() {
                    k += 1;
                }
                end = k;
            }
        }
        let text = &self.src[start..end];
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => {
                self.pos = end;
                Ok(Expr::Const(v))
            }
            _ => Err(ExprError::Syntax {
                offset: start,
                expected: "decimal literal".to_string(),
                found: format!("`{text}`"),
            }),
        }
    }

    fn identifier(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || c == '_') {
            self.pos += 1;
        }
        let name = &self.src[start..self.pos];
        match name {
            "x1" => return Ok(Expr::x1()),
            "x2" => return Ok(Expr::x2()),
            _ => {}
        }
        let Some(func) = Func::from_name(name) else {
            return Err(ExprError::UnknownIdentifier {
                name: name.to_string(),
                offset: start,
            });
        };
        self.expect('(')?;
        let arg = self.sum()?;
        self.expect(')')?;
        Ok(Expr::apply(func, arg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> Expr {
        Expr::parse(s).unwrap()
    }

    #[test]
    fn parses_by_precedence() {
        assert_eq!(
            p("x1 + 0.5*x1^2"),
            Expr::x1() + Expr::Const(0.5) * Expr::x1().powi(2)
        );
        assert_eq!(p("x1"), Expr::x1());
        assert_eq!(
            p("sin(x1*x2)"),
            Expr::apply(Func::Sin, Expr::x1() * Expr::x2())
        );
        // unary minus binds looser than ^
        assert_eq!(p("-x1^2"), -(Expr::x1().powi(2)));
        // left associativity
        assert_eq!(p("x1 - x2 - 1"), (Expr::x1() - Expr::x2()) - Expr::Const(1.0));
        assert_eq!(p("x1/x2/2"), (Expr::x1() / Expr::x2()) / Expr::Const(2.0));
        assert_eq!(p("x1^-2"), Expr::x1().powi(-2));
        assert_eq!(p("x1^(-2)"), Expr::x1().powi(-2));
    }

    #[test]
    fn syntax_errors_carry_offsets() {
        match Expr::parse("x1 + * 2") {
            Err(ExprError::Syntax { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("unexpected {other:?}"),
        }
        match Expr::parse("x1 + y") {
            Err(ExprError::UnknownIdentifier { name, offset }) => {
                assert_eq!(name, "y");
                assert_eq!(offset, 5);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(Expr::parse("x1^x2"), Err(ExprError::Syntax { .. })));
        assert!(matches!(Expr::parse("(x1"), Err(ExprError::Syntax { .. })));
        assert!(matches!(Expr::parse("x1 x2"), Err(ExprError::Syntax { .. })));
        assert!(matches!(Expr::parse(""), Err(ExprError::Syntax { .. })));
    }

    #[test]
    fn derivatives() {
        assert_eq!(p("x1^2").diff(Var::X1), Expr::Const(2.0) * Expr::x1());
        let e = p("x1 + 0.5*x1^2");
        let d2 = e.diff_n(&[Var::X1, Var::X1]);
        assert_eq!(d2.eval((0.0, 0.0)).unwrap(), 1.0);
        let d = p("sin(x1*x2)").diff(Var::X2);
        assert_eq!(d, Expr::x1() * Expr::apply(Func::Cos, Expr::x1() * Expr::x2()));
        assert_eq!(p("exp(x2)").diff(Var::X1), Expr::Const(0.0));
        let third = p("x1^4 + log(x1)").diff_n(&[Var::X1; 3]);
        let v = third.eval((2.0, 0.0)).unwrap();
        assert!((v - (24.0 * 2.0 + 2.0 / 8.0)).abs() < 1e-12);
    }

    #[test]
    fn evaluation() {
        assert_eq!(p("x1 + 0.5*x1^2").eval((2.0, 0.0)).unwrap(), 4.0);
        assert_eq!(p("x2").eval((7.0, -1.0)).unwrap(), -1.0);
        assert!(matches!(
            p("1/x1").eval((0.0, 0.0)),
            Err(ExprError::Domain { .. })
        ));
        assert!(matches!(
            p("log(x1 - 1)").eval((0.5, 0.0)),
            Err(ExprError::Domain { .. })
        ));
        assert!(matches!(
            p("x1^(-1)").eval((0.0, 0.0)),
            Err(ExprError::Domain { .. })
        ));
    }

    #[test]
    fn simplification() {
        assert_eq!(p("0*x1 + x2").simplify(), Expr::x2());
        assert_eq!(p("x1^1").simplify(), Expr::x1());
        assert_eq!(p("2+3").simplify(), Expr::Const(5.0));
        assert_eq!(p("1*x1/1 - 0").simplify(), Expr::x1());
        assert_eq!(p("--x1").simplify(), Expr::x1());
        assert_eq!(p("x2^0").simplify(), Expr::Const(1.0));
        // domain-invalid constants are left unfolded
        assert!(!matches!(p("1/0").simplify(), Expr::Const(_)));
        assert!(!matches!(p("log(0-1)").simplify(), Expr::Const(_)));
    }

    #[test]
    fn printing_reparses() {
        for s in [
            "x1 + 0.5*x1^2",
            "-(x1 - x2)*3",
            "x1^(-2)/(x2 + 1)",
            "sin(x1*x2) - cos(-x2)",
            "(x1^2)^3",
            "2 - (3 - x1)",
            "x1/(x2*x1)",
            "-x1^2",
            "exp(log(x1 + 2))",
        ] {
            let e = p(s);
            let printed = e.to_string();
            let again = p(&printed);
            assert_eq!(again, e, "{s} -> {printed}");
        }
        let folded = p("0 - 2.5").simplify();
        let printed = folded.to_string();
        assert_eq!(p(&printed).to_string(), printed);
    }

    #[test]
    fn compiled_matches_tree() {
        let e = p("sin(x1*x2) + x1^3/(1 + x2^2) - exp(-x1) * log(x2 + 3)");
        let c = e.compile();
        for &(a, b) in &[(0.3, -0.2), (1.5, 2.0), (-0.7, 0.1)] {
            assert_eq!(c.eval(a, b), e.eval((a, b)).unwrap());
        }
        assert_eq!(p("4.5").compile().eval(1.0, 1.0), 4.5);
    }
}
