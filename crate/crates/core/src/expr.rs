//! Coefficient expressions.
//!
//! Coefficients are written as small arithmetic expressions over the
//! variables `u` (density), `p` (spatial density gradient), `a` (age) and
//! `x` (position):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := atom ('^' unary)?
//! atom    := number | 'pi' | var | 'exp' '(' expr ')' | '(' expr ')'
//! var     := 'u' | 'p' | 'a' | 'x'
//! ```
//!
//! `^` is right associative and binds tighter than unary minus, so `-u^2`
//! is `-(u^2)`. A minus applied directly to a literal is folded into the
//! literal.

use std::fmt;

use crate::error::{Error, Result};

/// Independent variables a coefficient may depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    /// Density value u.
    U,
    /// Spatial derivative of the density.
    P,
    /// Age.
    A,
    /// Position.
    X,
}

impl Var {
    pub const ALL: [Var; 4] = [Var::U, Var::P, Var::A, Var::X];

    pub fn symbol(self) -> char {
        match self {
            Var::U => 'u',
            Var::P => 'p',
            Var::A => 'a',
            Var::X => 'x',
        }
    }
}

/// Values of the independent variables at one evaluation point.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Point {
    pub u: f64,
    pub p: f64,
    pub a: f64,
    pub x: f64,
}

impl Point {
    pub fn new(u: f64, p: f64, a: f64, x: f64) -> Self {
        Self { u, p, a, x }
    }

    fn get(&self, var: Var) -> f64 {
        match var {
            Var::U => self.u,
            Var::P => self.p,
            Var::A => self.a,
            Var::X => self.x,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Exp(Box<Expr>),
}

impl Expr {
    pub fn eval(&self, pt: &Point) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Var(var) => pt.get(*var),
            Expr::Neg(e) => -e.eval(pt),
            Expr::Add(l, r) => l.eval(pt) + r.eval(pt),
            Expr::Sub(l, r) => l.eval(pt) - r.eval(pt),
            Expr::Mul(l, r) => l.eval(pt) * r.eval(pt),
            Expr::Div(l, r) => l.eval(pt) / r.eval(pt),
            Expr::Pow(base, exponent) => {
                let b = base.eval(pt);
                match exponent.as_ref() {
                    Expr::Num(k) if k.fract() == 0.0 && k.abs() <= i32::MAX as f64 => b.powi(*k as i32),
                    e => b.powf(e.eval(pt)),
                }
            }
            Expr::Exp(e) => e.eval(pt).exp(),
        }
    }

    /// Structural dependence: true when `var` occurs anywhere in the tree.
    pub fn depends_on(&self, var: Var) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(v) => *v == var,
            Expr::Neg(e) | Expr::Exp(e) => e.depends_on(var),
            Expr::Add(l, r) | Expr::Sub(l, r) | Expr::Mul(l, r) | Expr::Div(l, r) | Expr::Pow(l, r) => {
                l.depends_on(var) || r.depends_on(var)
            }
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(..) => 3,
            Expr::Num(v) if v.is_sign_negative() => 3,
            Expr::Pow(..) => 4,
            Expr::Num(_) | Expr::Var(_) | Expr::Exp(_) => 5,
        }
    }

    fn write_child(&self, f: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
        if self.precedence() < min_prec {
            write!(f, "({self})")
        } else {
            write!(f, "{self}")
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let binary = |f: &mut fmt::Formatter<'_>, l: &Expr, op: &str, r: &Expr, prec: u8| {
            l.write_child(f, prec)?;
            write!(f, " {op} ")?;
            r.write_child(f, prec + 1)
        };
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Var(v) => write!(f, "{}", v.symbol()),
            Expr::Neg(e) => {
                write!(f, "-")?;
                // a bare literal would fold into the number on re-parse
                if matches!(e.as_ref(), Expr::Num(_)) {
                    write!(f, "({e})")
                } else {
                    e.write_child(f, 4)
                }
            }
            Expr::Add(l, r) => binary(f, l, "+", r, 1),
            Expr::Sub(l, r) => binary(f, l, "-", r, 1),
            Expr::Mul(l, r) => binary(f, l, "*", r, 2),
            Expr::Div(l, r) => binary(f, l, "/", r, 2),
            Expr::Pow(base, exponent) => {
                base.write_child(f, 5)?;
                write!(f, "^")?;
                exponent.write_child(f, 3)
            }
            Expr::Exp(e) => write!(f, "exp({e})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
}

fn tokenize(src: &str) -> Result<Vec<(Token, usize)>> {
    let bytes = src.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let text = &src[start..i];
            let value: f64 = text
                .parse()
                .map_err(|_| Error::syntax_at(src, start, format!("invalid number '{text}'")))?;
            tokens.push((Token::Num(value), start));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            tokens.push((Token::Ident(src[start..i].to_string()), start));
        } else {
            let tok = match c {
                '+' | '-' | '*' | '/' | '^' => Token::Op(c),
                '(' => Token::LParen,
                ')' => Token::RParen,
                _ => return Err(Error::syntax_at(src, i, format!("unexpected character '{c}'"))),
            };
            tokens.push((tok, i));
            i += 1;
        }
    }
    Ok(tokens)
}

struct Parser<'s> {
    src: &'s str,
    tokens: Vec<(Token, usize)>,
    pos: usize,
}

impl<'s> Parser<'s> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(t, _)| t)
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.src.len(), |(_, off)| *off)
    }

    fn error(&self, message: impl Into<String>) -> Error {
        Error::syntax_at(self.src, self.offset(), message)
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(Token::Op(op @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if op == '+' {
                Expr::Add(Box::new(lhs), Box::new(rhs))
            } else {
                Expr::Sub(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Some(Token::Op(op @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if op == '*' {
                Expr::Mul(Box::new(lhs), Box::new(rhs))
            } else {
                Expr::Div(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        if let Some(Token::Op('-')) = self.peek() {
            self.pos += 1;
            return Ok(match self.unary()? {
                Expr::Num(v) => Expr::Num(-v),
                e => Expr::Neg(Box::new(e)),
            });
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if let Some(Token::Op('^')) = self.peek() {
            self.pos += 1;
            let exponent = self.unary()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn expect_rparen(&mut self) -> Result<()> {
        match self.peek() {
            Some(Token::RParen) => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.error("expected ')'")),
        }
    }

    fn atom(&mut self) -> Result<Expr> {
        let Some(tok) = self.peek().cloned() else {
            return Err(self.error("unexpected end of expression"));
        };
        match tok {
            Token::Num(v) => {
                self.pos += 1;
                Ok(Expr::Num(v))
            }
            Token::LParen => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect_rparen()?;
                Ok(e)
            }
            Token::Ident(name) => {
                let var = match name.as_str() {
                    "u" => Some(Var::U),
                    "p" => Some(Var::P),
                    "a" => Some(Var::A),
                    "x" => Some(Var::X),
                    _ => None,
                };
                if let Some(var) = var {
                    self.pos += 1;
                    return Ok(Expr::Var(var));
                }
                match name.as_str() {
                    "pi" => {
                        self.pos += 1;
                        Ok(Expr::Num(std::f64::consts::PI))
                    }
                    "exp" => {
                        self.pos += 1;
                        if self.peek() != Some(&Token::LParen) {
                            return Err(self.error("expected '(' after exp"));
                        }
                        self.pos += 1;
                        let e = self.expr()?;
                        self.expect_rparen()?;
                        Ok(Expr::Exp(Box::new(e)))
                    }
                    _ => Err(self.error(format!("unknown identifier '{name}'"))),
                }
            }
            Token::Op(c) => Err(self.error(format!("unexpected operator '{c}'"))),
            Token::RParen => Err(self.error("unexpected ')'")),
        }
    }
}

/// Parses an expression; errors carry the line/column inside `src`.
pub fn parse(src: &str) -> Result<Expr> {
    let tokens = tokenize(src)?;
    let mut parser = Parser { src, tokens, pos: 0 };
    let e = parser.expr()?;
    if parser.pos != parser.tokens.len() {
        return Err(parser.error("trailing input"));
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(src: &str, u: f64, p: f64, a: f64, x: f64) -> f64 {
        parse(src).unwrap().eval(&Point::new(u, p, a, x))
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("1 + 2 * 3", 0.0, 0.0, 0.0, 0.0), 7.0);
        assert_eq!(ev("2 ^ 3 ^ 2", 0.0, 0.0, 0.0, 0.0), 512.0);
        assert_eq!(ev("-u^2", 3.0, 0.0, 0.0, 0.0), -9.0);
        assert_eq!(ev("8 / 4 / 2", 0.0, 0.0, 0.0, 0.0), 1.0);
        assert_eq!(ev("u - p - a", 5.0, 1.0, 1.0, 0.0), 3.0);
        assert_eq!(ev("u^-1", 4.0, 0.0, 0.0, 0.0), 0.25);
    }

    #[test]
    fn functions_and_constants() {
        assert!((ev("exp(-a)", 0.0, 0.0, 1.0, 0.0) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((ev("p^2 + 0.2", 0.0, 0.0, 0.0, 0.0) - 0.2).abs() < 1e-15);
        assert!((ev("pi * x", 0.0, 0.0, 0.0, 0.5) - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert_eq!(ev("1.5e2 + 2E-1", 0.0, 0.0, 0.0, 0.0), 150.2);
    }

    #[test]
    fn negative_literal_folds() {
        assert_eq!(parse("-2").unwrap(), Expr::Num(-2.0));
        assert_eq!(parse("-(2)").unwrap(), Expr::Num(-2.0));
        assert!(matches!(parse("-u").unwrap(), Expr::Neg(_)));
    }

    #[test]
    fn errors_report_position() {
        match parse("1 + * u").unwrap_err() {
            Error::Syntax { line, column, .. } => assert_eq!((line, column), (1, 5)),
            e => panic!("unexpected {e:?}"),
        }
        match parse("u + q").unwrap_err() {
            Error::Syntax { column, message, .. } => {
                assert_eq!(column, 5);
                assert!(message.contains("'q'"));
            }
            e => panic!("unexpected {e:?}"),
        }
        assert!(parse("(u + 1").is_err());
        assert!(parse("u 1").is_err());
        assert!(parse("").is_err());
        assert!(parse("u # 2").is_err());
    }

    #[test]
    fn structural_dependence() {
        let e = parse("1 + u * p").unwrap();
        assert!(e.depends_on(Var::U));
        assert!(e.depends_on(Var::P));
        assert!(!e.depends_on(Var::A));
        assert!(!parse("exp(-a)").unwrap().depends_on(Var::U));
    }

    #[test]
    fn display_examples() {
        assert_eq!(parse("1+u*p").unwrap().to_string(), "1.0 + u * p");
        assert_eq!(parse("(1+u)*p").unwrap().to_string(), "(1.0 + u) * p");
        assert_eq!(parse("u-(p-a)").unwrap().to_string(), "u - (p - a)");
        assert_eq!(parse("(-2)^2").unwrap().to_string(), "(-2.0)^2.0");
        assert_eq!(parse("-(u*p)").unwrap().to_string(), "-(u * p)");
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (-10.0f64..10.0).prop_map(Expr::Num),
            prop::sample::select(Var::ALL.to_vec()).prop_map(Expr::Var),
        ];
        leaf.prop_recursive(4, 32, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|e| match e {
                    // the parser never produces Neg(Num)
                    Expr::Num(v) => Expr::Num(-v),
                    e => Expr::Neg(Box::new(e)),
                }),
                inner.clone().prop_map(|e| Expr::Exp(Box::new(e))),
                (inner.clone(), inner.clone()).prop_map(|(l, r)| Expr::Add(Box::new(l), Box::new(r))),
                (inner.clone(), inner.clone()).prop_map(|(l, r)| Expr::Sub(Box::new(l), Box::new(r))),
                (inner.clone(), inner.clone()).prop_map(|(l, r)| Expr::Mul(Box::new(l), Box::new(r))),
                (inner.clone(), inner.clone()).prop_map(|(l, r)| Expr::Div(Box::new(l), Box::new(r))),
                (inner.clone(), inner).prop_map(|(l, r)| Expr::Pow(Box::new(l), Box::new(r))),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_then_parse_is_identity(e in arb_expr()) {
            let printed = e.to_string();
            let reparsed = parse(&printed).unwrap();
            prop_assert_eq!(reparsed, e, "printed as {}", printed);
        }
    }
}
