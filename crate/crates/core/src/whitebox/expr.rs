//! Exact-rational arithmetic expressions.
//!
//! ```text
//! expr    = term   { ("+" | "-") term } ;
//! term    = power  { ("*" | "/") power } ;
//! power   = prefix [ "^" power ] ;            (* right-associative *)
//! prefix  = ("-" | "+") prefix | primary ;     (* -2^2 = (-2)^2 *)
//! primary = number | ident [ "(" args ")" ] | "(" expr ")" ;
//! args    = expr { "," expr } ;
//! number  = digit { digit } [ "." { digit } ] | "." digit { digit } ;
//! ```

use std::collections::BTreeSet;
use std::fmt;

use num_bigint::BigInt;
use num_traits::{Signed, ToPrimitive, Zero};
use thiserror::Error;

use super::env::Environment;
use crate::scalar::{format_rational, parse_rational, rational_from_f64, rational_to_f64, Rational};

/// Largest exponent magnitude `^` accepts.
pub const MAX_EXPONENT: u32 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
            BinOp::Pow => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Abs,
    Min,
    Max,
    Floor,
    Ceil,
    Round,
    Sqrt,
    Mod,
    Percent,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
            Func::Floor => "floor",
            Func::Ceil => "ceil",
            Func::Round => "round",
            Func::Sqrt => "sqrt",
            Func::Mod => "mod",
            Func::Percent => "percent",
        }
    }

    fn lookup(name: &str) -> Option<Func> {
        Some(match name {
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            "floor" => Func::Floor,
            "ceil" => Func::Ceil,
            "round" => Func::Round,
            "sqrt" => Func::Sqrt,
            "mod" => Func::Mod,
            "percent" => Func::Percent,
            _ => return None,
        })
    }

    /// Accepted argument counts, inclusive.
    fn arity(self) -> (usize, usize) {
        match self {
            Func::Min | Func::Max => (1, usize::MAX),
            Func::Mod => (2, 2),
            Func::Round => (1, 2),
            _ => (1, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Expr {
    Literal(Rational),
    Var(String),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{message} at offset {offset}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("unbound variable `{0}`")]
    UnboundVariable(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("non-integer exponent")]
    NonIntegerExponent,
    #[error("exponent magnitude exceeds {MAX_EXPONENT}")]
    ExponentTooLarge,
    #[error("square root of a negative number")]
    NegativeRadicand,
}

/// Evaluation result. `exact` is false once an approximated operation
/// (an irrational square root) has contributed to the value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Value {
    pub value: Rational,
    pub exact: bool,
}

impl Value {
    fn exact(value: Rational) -> Self {
        Value { value, exact: true }
    }
}

impl Expr {
    pub fn parse(source: &str) -> Result<Expr, ParseError> {
        let tokens = tokenize(source)?;
        let mut p = Parser { tokens, pos: 0, len: source.len() };
        let expr = p.expr()?;
        match p.peek() {
            None => Ok(expr),
            Some((off, tok)) => Err(ParseError { offset: *off, message: format!("unexpected `{tok}`") }),
        }
    }

    /// Variables referenced anywhere in the tree.
    pub fn variables(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Literal(_) => {}
            Expr::Var(v) => {
                out.insert(v.clone());
            }
            Expr::Neg(e) => e.collect_vars(out),
            Expr::Binary(_, l, r) => {
                l.collect_vars(out);
                r.collect_vars(out);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.collect_vars(out)),
        }
    }

    /// Numeric literals appearing in the tree, in source order.
    pub fn literals(&self) -> Vec<Rational> {
        let mut out = Vec::new();
        self.collect_literals(&mut out);
        out
    }

    fn collect_literals(&self, out: &mut Vec<Rational>) {
        match self {
            Expr::Literal(v) => out.push(v.clone()),
            Expr::Var(_) => {}
            Expr::Neg(e) => e.collect_literals(out),
            Expr::Binary(_, l, r) => {
                l.collect_literals(out);
                r.collect_literals(out);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.collect_literals(out)),
        }
    }

    pub fn eval(&self, env: &Environment) -> Result<Value, EvalError> {
        match self {
            Expr::Literal(v) => Ok(Value::exact(v.clone())),
            Expr::Var(name) => env
                .number(name)
                .map(|v| Value::exact(v.clone()))
                .ok_or_else(|| EvalError::UnboundVariable(name.clone())),
            Expr::Neg(e) => {
                let v = e.eval(env)?;
                Ok(Value { value: -v.value, exact: v.exact })
            }
            Expr::Binary(op, l, r) => {
                let a = l.eval(env)?;
                let b = r.eval(env)?;
                let exact = a.exact && b.exact;
                let value = match op {
                    BinOp::Add => a.value + b.value,
                    BinOp::Sub => a.value - b.value,
                    BinOp::Mul => a.value * b.value,
                    BinOp::Div => {
                        if b.value.is_zero() {
                            return Err(EvalError::DivisionByZero);
                        }
                        a.value / b.value
                    }
                    BinOp::Pow => power(&a.value, &b.value)?,
                };
                Ok(Value { value, exact })
            }
            Expr::Call(func, args) => {
                let vals = args.iter().map(|a| a.eval(env)).collect::<Result<Vec<_>, _>>()?;
                call(*func, vals)
            }
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Binary(op, _, _) => op.precedence(),
            Expr::Neg(_) => 3,
            _ => 5,
        }
    }
}

fn power(base: &Rational, exp: &Rational) -> Result<Rational, EvalError> {
    if !exp.is_integer() {
        return Err(EvalError::NonIntegerExponent);
    }
    let e = exp.to_integer();
    let mag = e.abs().to_u32().filter(|m| *m <= MAX_EXPONENT).ok_or(EvalError::ExponentTooLarge)?;
    if e.is_negative() {
        if base.is_zero() {
            return Err(EvalError::DivisionByZero);
        }
        Ok(num_traits::pow(base.recip(), mag as usize))
    } else {
        Ok(num_traits::pow(base.clone(), mag as usize))
    }
}

fn call(func: Func, args: Vec<Value>) -> Result<Value, EvalError> {
    let exact = args.iter().all(|a| a.exact);
    let mut it = args.into_iter();
    let first = it.next().expect("arity checked at parse time").value;
    let value = match func {
        Func::Abs => first.abs(),
        Func::Min => it.fold(first, |acc, v| if v.value < acc { v.value } else { acc }),
        Func::Max => it.fold(first, |acc, v| if v.value > acc { v.value } else { acc }),
        Func::Floor => first.floor(),
        Func::Ceil => first.ceil(),
        Func::Round => match it.next() {
            None => first.round(),
            Some(digits) => {
                if !digits.value.is_integer() {
                    return Err(EvalError::NonIntegerExponent);
                }
                let scale = power(&Rational::from_integer(BigInt::from(10)), &digits.value)?;
                (first * &scale).round() / scale
            }
        },
        Func::Percent => first / Rational::from_integer(BigInt::from(100)),
        Func::Mod => {
            let m = it.next().expect("arity checked at parse time").value;
            if m.is_zero() {
                return Err(EvalError::DivisionByZero);
            }
            &first - &m * (&first / &m).floor()
        }
        Func::Sqrt => return sqrt(first, exact),
    };
    Ok(Value { value, exact })
}

fn sqrt(x: Rational, exact: bool) -> Result<Value, EvalError> {
    if x.is_negative() {
        return Err(EvalError::NegativeRadicand);
    }
    let n = x.numer().sqrt();
    let d = x.denom().sqrt();
    if &n * &n == *x.numer() && &d * &d == *x.denom() {
        return Ok(Value { value: Rational::new(n, d), exact });
    }
    let approx = rational_to_f64(&x).sqrt();
    let value = rational_from_f64(approx).ok_or(EvalError::NegativeRadicand)?;
    Ok(Value { value, exact: false })
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Literal(v) => {
                let s = format_rational(v);
                if v.is_negative() || s.contains('/') {
                    write!(f, "({s})")
                } else {
                    f.write_str(&s)
                }
            }
            Expr::Var(v) => f.write_str(v),
            Expr::Neg(e) => {
                if e.precedence() < 3 || matches!(**e, Expr::Binary(BinOp::Pow, _, _)) {
                    write!(f, "-({e})")
                } else {
                    write!(f, "-{e}")
                }
            }
            Expr::Binary(op, l, r) => {
                let p = op.precedence();
                let (lp, rp) = match op {
                    BinOp::Pow => (l.precedence() < 3 || matches!(**l, Expr::Binary(BinOp::Pow, _, _)), r.precedence() < 3),
                    _ => (l.precedence() < p, r.precedence() <= p),
                };
                write_wrapped(f, l, lp)?;
                f.write_str(op.symbol())?;
                write_wrapped(f, r, rp)
            }
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

fn write_wrapped(f: &mut fmt::Formatter<'_>, e: &Expr, wrap: bool) -> fmt::Result {
    if wrap {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(Rational),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Num(n) => write!(f, "{}", format_rational(n)),
            Tok::Ident(s) => f.write_str(s),
            Tok::Op(c) => write!(f, "{c}"),
            Tok::LParen => f.write_str("("),
            Tok::RParen => f.write_str(")"),
            Tok::Comma => f.write_str(","),
        }
    }
}

fn tokenize(src: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let mut out = Vec::new();
    let mut chars = src.char_indices().peekable();
    while let Some(&(off, c)) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
            continue;
        }
        if c.is_ascii_digit() || c == '.' {
            let mut end = off;
            while let Some(&(i, d)) = chars.peek() {
                if d.is_ascii_digit() || d == '.' {
                    end = i + d.len_utf8();
                    chars.next();
                } else {
                    break;
                }
            }
            let text = &src[off..end];
            let n = parse_rational(text)
                .filter(|_| text.matches('.').count() <= 1)
                .ok_or_else(|| ParseError { offset: off, message: format!("malformed number `{text}`") })?;
            out.push((off, Tok::Num(n)));
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            let mut end = off;
            while let Some(&(i, d)) = chars.peek() {
                if d.is_alphanumeric() || d == '_' {
                    end = i + d.len_utf8();
                    chars.next();
                } else {
                    break;
                }
            }
            out.push((off, Tok::Ident(src[off..end].to_string())));
            continue;
        }
        let tok = match c {
            '+' => Tok::Op('+'),
            '-' | '\u{2212}' => Tok::Op('-'),
            '*' | '\u{00d7}' => Tok::Op('*'),
            '/' | '\u{00f7}' => Tok::Op('/'),
            '^' => Tok::Op('^'),
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            ',' => Tok::Comma,
            other => {
                return Err(ParseError { offset: off, message: format!("unexpected character `{other}`") });
            }
        };
        chars.next();
        out.push((off, tok));
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(usize, Tok)>,
    pos: usize,
    len: usize,
}

impl Parser {
    fn peek(&self) -> Option<&(usize, Tok)> {
        self.tokens.get(self.pos)
    }

    fn offset(&self) -> usize {
        self.peek().map(|t| t.0).unwrap_or(self.len)
    }

    fn eat_op(&mut self, ops: &[char]) -> Option<char> {
        match self.peek() {
            Some((_, Tok::Op(c))) if ops.contains(c) => {
                let c = *c;
                self.pos += 1;
                Some(c)
            }
            _ => None,
        }
    }

    fn expect(&mut self, want: Tok) -> Result<(), ParseError> {
        match self.peek() {
            Some((_, t)) if *t == want => {
                self.pos += 1;
                Ok(())
            }
            Some((off, t)) => Err(ParseError { offset: *off, message: format!("expected `{want}`, found `{t}`") }),
            None => Err(ParseError { offset: self.len, message: format!("expected `{want}`, found end of input") }),
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        while let Some(op) = self.eat_op(&['+', '-']) {
            let rhs = self.term()?;
            let op = if op == '+' { BinOp::Add } else { BinOp::Sub };
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.power()?;
        while let Some(op) = self.eat_op(&['*', '/']) {
            let rhs = self.power()?;
            let op = if op == '*' { BinOp::Mul } else { BinOp::Div };
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.prefix()?;
        if self.eat_op(&['^']).is_some() {
            let exp = self.power()?;
            return Ok(Expr::Binary(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn prefix(&mut self) -> Result<Expr, ParseError> {
        match self.eat_op(&['-', '+']) {
            Some('-') => Ok(Expr::Neg(Box::new(self.prefix()?))),
            Some(_) => self.prefix(),
            None => self.primary(),
        }
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let offset = self.offset();
        let Some((_, tok)) = self.tokens.get(self.pos).cloned() else {
            return Err(ParseError { offset, message: "unexpected end of input".into() });
        };
        self.pos += 1;
        match tok {
            Tok::Num(n) => Ok(Expr::Literal(n)),
            Tok::LParen => {
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Tok::Ident(name) => {
                if !matches!(self.peek(), Some((_, Tok::LParen))) {
                    return Ok(Expr::Var(name));
                }
                let func = Func::lookup(&name)
                    .ok_or_else(|| ParseError { offset, message: format!("unknown function `{name}`") })?;
                self.pos += 1;
                let mut args = vec![self.expr()?];
                while matches!(self.peek(), Some((_, Tok::Comma))) {
                    self.pos += 1;
                    args.push(self.expr()?);
                }
                self.expect(Tok::RParen)?;
                let (lo, hi) = func.arity();
                if args.len() < lo || args.len() > hi {
                    return Err(ParseError {
                        offset,
                        message: format!("`{}` takes {} argument(s), got {}", func.name(), arity_text(lo, hi), args.len()),
                    });
                }
                Ok(Expr::Call(func, args))
            }
            other => Err(ParseError { offset, message: format!("unexpected `{other}`") }),
        }
    }
}

fn arity_text(lo: usize, hi: usize) -> String {
    if lo == hi {
        lo.to_string()
    } else if hi == usize::MAX {
        format!("at least {lo}")
    } else {
        format!("{lo}-{hi}")
    }
}

/// Parses and evaluates in one call.
pub fn eval_expr(source: &str, env: &Environment) -> Result<Value, ExprError> {
    Ok(Expr::parse(source)?.eval(env)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExprError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl Value {
    pub fn is_integer(&self) -> bool {
        self.value.is_integer()
    }
}
