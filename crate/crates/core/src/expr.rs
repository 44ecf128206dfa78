//! Arithmetic expressions over the spatial variables `x1..xN` and the
//! zero-order argument `r`.
//!
//! Coefficient functions are given as expression strings in configuration
//! files and presets. The AST evaluates with standard precedence
//! (`^` binds tightest and is right-associative, then unary minus, then
//! `*`/`/`, then `+`/`-`) and prints back to a string that parses to the
//! same AST.

use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { offset: usize, name: String },
    #[error("`{name}` expects {expected} argument(s), got {got}")]
    ArityMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func1 {
    Sin,
    Cos,
    Exp,
    Abs,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func2 {
    Min,
    Max,
    Pow,
}

/// Expression AST. `Var(i)` is the zero-based spatial variable `x{i+1}`.
#[derive(Debug, Clone, PartialEq)]
pub enum Expression {
    Num(f64),
    Var(usize),
    R,
    Neg(Box<Expression>),
    Add(Box<Expression>, Box<Expression>),
    Sub(Box<Expression>, Box<Expression>),
    Mul(Box<Expression>, Box<Expression>),
    Div(Box<Expression>, Box<Expression>),
    Pow(Box<Expression>, Box<Expression>),
    Call1(Func1, Box<Expression>),
    Call2(Func2, Box<Expression>, Box<Expression>),
}

impl Expression {
    pub fn constant(v: f64) -> Self {
        if v < 0.0 {
            Expression::Neg(Box::new(Expression::Num(-v)))
        } else {
            Expression::Num(v)
        }
    }

    /// Evaluate at spatial point `x` with zero-order argument `r`.
    ///
    /// Variables beyond `x.len()` evaluate to 0; [`max_var`](Self::max_var)
    /// is the tool for rejecting such expressions up front.
    pub fn eval(&self, x: &[f64], r: f64) -> f64 {
        match self {
            Expression::Num(v) => *v,
            Expression::Var(i) => x.get(*i).copied().unwrap_or(0.0),
            Expression::R => r,
            Expression::Neg(e) => -e.eval(x, r),
            Expression::Add(a, b) => a.eval(x, r) + b.eval(x, r),
            Expression::Sub(a, b) => a.eval(x, r) - b.eval(x, r),
            Expression::Mul(a, b) => a.eval(x, r) * b.eval(x, r),
            Expression::Div(a, b) => a.eval(x, r) / b.eval(x, r),
            Expression::Pow(a, b) => a.eval(x, r).powf(b.eval(x, r)),
            Expression::Call1(f, a) => {
                let v = a.eval(x, r);
                match f {
                    Func1::Sin => v.sin(),
                    Func1::Cos => v.cos(),
                    Func1::Exp => v.exp(),
                    Func1::Abs => v.abs(),
                    Func1::Sqrt => v.sqrt(),
                }
            }
            Expression::Call2(f, a, b) => {
                let u = a.eval(x, r);
                let v = b.eval(x, r);
                match f {
                    Func2::Min => u.min(v),
                    Func2::Max => u.max(v),
                    Func2::Pow => u.powf(v),
                }
            }
        }
    }

    /// Largest zero-based spatial variable index used, if any.
    pub fn max_var(&self) -> Option<usize> {
        match self {
            Expression::Num(_) => None,
            Expression::Var(i) => Some(*i),
            Expression::R => None,
            Expression::Neg(e) => e.max_var(),
            Expression::Add(a, b)
            | Expression::Sub(a, b)
            | Expression::Mul(a, b)
            | Expression::Div(a, b)
            | Expression::Pow(a, b)
            | Expression::Call2(_, a, b) => match (a.max_var(), b.max_var()) {
                (Some(i), Some(j)) => Some(i.max(j)),
                (i, j) => i.or(j),
            },
            Expression::Call1(_, e) => e.max_var(),
        }
    }

    /// Whether the expression references the zero-order argument `r`.
    pub fn uses_r(&self) -> bool {
        match self {
            Expression::Num(_) | Expression::Var(_) => false,
            Expression::R => true,
            Expression::Neg(e) | Expression::Call1(_, e) => e.uses_r(),
            Expression::Add(a, b)
            | Expression::Sub(a, b)
            | Expression::Mul(a, b)
            | Expression::Div(a, b)
            | Expression::Pow(a, b)
            | Expression::Call2(_, a, b) => a.uses_r() || b.uses_r(),
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expression::Add(..) | Expression::Sub(..) => 1,
            Expression::Mul(..) | Expression::Div(..) => 2,
            Expression::Neg(..) => 3,
            Expression::Pow(..) => 4,
            _ => 5,
        }
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn child(
            f: &mut fmt::Formatter<'_>,
            e: &Expression,
            min_prec: u8,
        ) -> fmt::Result {
            if e.precedence() < min_prec {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        }
        match self {
            Expression::Num(v) => write!(f, "{v}"),
            Expression::Var(i) => write!(f, "x{}", i + 1),
            Expression::R => write!(f, "r"),
            Expression::Neg(e) => {
                write!(f, "-")?;
                // `--x` would lex as two tokens but print ambiguity is the
                // concern; parenthesize anything looser than unary minus.
                child(f, e, 3)
            }
            Expression::Add(a, b) => {
                child(f, a, 1)?;
                write!(f, " + ")?;
                child(f, b, 2)
            }
            Expression::Sub(a, b) => {
                child(f, a, 1)?;
                write!(f, " - ")?;
                child(f, b, 2)
            }
            Expression::Mul(a, b) => {
                child(f, a, 2)?;
                write!(f, "*")?;
                child(f, b, 3)
            }
            Expression::Div(a, b) => {
                child(f, a, 2)?;
                write!(f, "/")?;
                child(f, b, 3)
            }
            Expression::Pow(a, b) => {
                // `^` is right-associative: parenthesize a left child that is
                // itself a power, and anything looser on either side.
                if a.precedence() <= 4 {
                    write!(f, "({a})")?;
                } else {
                    write!(f, "{a}")?;
                }
                write!(f, "^")?;
                child(f, b, 4)
            }
            Expression::Call1(func, a) => {
                let name = match func {
                    Func1::Sin => "sin",
                    Func1::Cos => "cos",
                    Func1::Exp => "exp",
                    Func1::Abs => "abs",
                    Func1::Sqrt => "sqrt",
                };
                write!(f, "{name}({a})")
            }
            Expression::Call2(func, a, b) => {
                let name = match func {
                    Func2::Min => "min",
                    Func2::Max => "max",
                    Func2::Pow => "pow",
                };
                write!(f, "{name}({a}, {b})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn tokens(mut self) -> Result<Vec<(usize, Token)>, ParseError> {
        let mut out = Vec::new();
        while self.pos < self.src.len() {
            let c = self.src[self.pos];
            let start = self.pos;
            match c {
                b' ' | b'\t' | b'\n' | b'\r' => {
                    self.pos += 1;
                }
                b'+' => {
                    out.push((start, Token::Plus));
                    self.pos += 1;
                }
                b'-' => {
                    out.push((start, Token::Minus));
                    self.pos += 1;
                }
                b'*' => {
                    out.push((start, Token::Star));
                    self.pos += 1;
                }
                b'/' => {
                    out.push((start, Token::Slash));
                    self.pos += 1;
                }
                b'^' => {
                    out.push((start, Token::Caret));
                    self.pos += 1;
                }
                b'(' => {
                    out.push((start, Token::LParen));
                    self.pos += 1;
                }
                b')' => {
                    out.push((start, Token::RParen));
                    self.pos += 1;
                }
                b',' => {
                    out.push((start, Token::Comma));
                    self.pos += 1;
                }
                b'0'..=b'9' | b'.' => {
                    let mut end = self.pos;
                    let mut seen_exp = false;
                    while end < self.src.len() {
                        let d = self.src[end];
                        if d.is_ascii_digit() || d == b'.' {
                            end += 1;
                        } else if (d == b'e' || d == b'E') && !seen_exp {
                            seen_exp = true;
                            end += 1;
                            if end < self.src.len()
                                && (self.src[end] == b'+' || self.src[end] == b'-')
                            {
                                end += 1;
                            }
                        } else {
                            break;
                        }
                    }
                    let text = std::str::from_utf8(&self.src[start..end]).unwrap();
                    let v: f64 = text.parse().map_err(|_| ParseError::Syntax {
                        offset: start,
                        message: format!("invalid number `{text}`"),
                    })?;
                    out.push((start, Token::Num(v)));
                    self.pos = end;
                }
                b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                    let mut end = self.pos;
                    while end < self.src.len()
                        && (self.src[end].is_ascii_alphanumeric() || self.src[end] == b'_')
                    {
                        end += 1;
                    }
                    let text =
                        std::str::from_utf8(&self.src[start..end]).unwrap().to_string();
                    out.push((start, Token::Ident(text)));
                    self.pos = end;
                }
                _ => {
                    return Err(ParseError::Syntax {
                        offset: start,
                        message: format!("unexpected character `{}`", c as char),
                    })
                }
            }
        }
        Ok(out)
    }
}

struct Parser {
    tokens: Vec<(usize, Token)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.tokens
            .get(self.pos)
            .map(|(o, _)| *o)
            .unwrap_or(self.end)
    }

    fn bump(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).map(|(_, t)| t.clone());
        self.pos += 1;
        t
    }

    fn expect(&mut self, tok: Token, what: &str) -> Result<(), ParseError> {
        match self.peek() {
            Some(t) if *t == tok => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(ParseError::Syntax {
                offset: self.offset(),
                message: format!("expected {what}"),
            }),
        }
    }

    fn expr(&mut self) -> Result<Expression, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Token::Plus) => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = Expression::Add(Box::new(lhs), Box::new(rhs));
                }
                Some(Token::Minus) => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = Expression::Sub(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expression, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(Token::Star) => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    lhs = Expression::Mul(Box::new(lhs), Box::new(rhs));
                }
                Some(Token::Slash) => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    lhs = Expression::Div(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expression, ParseError> {
        if let Some(Token::Minus) = self.peek() {
            self.pos += 1;
            let inner = self.unary()?;
            Ok(Expression::Neg(Box::new(inner)))
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expression, ParseError> {
        let base = self.atom()?;
        if let Some(Token::Caret) = self.peek() {
            self.pos += 1;
            // Right-associative; the exponent may carry a unary minus.
            let exp = self.unary()?;
            Ok(Expression::Pow(Box::new(base), Box::new(exp)))
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<Expression, ParseError> {
        let offset = self.offset();
        match self.bump() {
            Some(Token::Num(v)) => Ok(Expression::Num(v)),
            Some(Token::LParen) => {
                let e = self.expr()?;
                self.expect(Token::RParen, "`)`")?;
                Ok(e)
            }
            Some(Token::Ident(name)) => self.ident(offset, name),
            _ => Err(ParseError::Syntax {
                offset,
                message: "expected expression".to_string(),
            }),
        }
    }

    fn ident(&mut self, offset: usize, name: String) -> Result<Expression, ParseError> {
        if name == "r" {
            return Ok(Expression::R);
        }
        if let Some(rest) = name.strip_prefix('x') {
            if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
                let idx: usize = rest.parse().map_err(|_| ParseError::Syntax {
                    offset,
                    message: format!("invalid variable `{name}`"),
                })?;
                if idx == 0 {
                    return Err(ParseError::UnknownIdentifier { offset, name });
                }
                return Ok(Expression::Var(idx - 1));
            }
        }
        let func1 = match name.as_str() {
            "sin" => Some(Func1::Sin),
            "cos" => Some(Func1::Cos),
            "exp" => Some(Func1::Exp),
            "abs" => Some(Func1::Abs),
            "sqrt" => Some(Func1::Sqrt),
            _ => None,
        };
        let func2 = match name.as_str() {
            "min" => Some(Func2::Min),
            "max" => Some(Func2::Max),
            "pow" => Some(Func2::Pow),
            _ => None,
        };
        if func1.is_none() && func2.is_none() {
            return Err(ParseError::UnknownIdentifier { offset, name });
        }
        self.expect(Token::LParen, "`(` after function name")?;
        let mut args = vec![self.expr()?];
        while let Some(Token::Comma) = self.peek() {
            self.pos += 1;
            args.push(self.expr()?);
        }
        self.expect(Token::RParen, "`)`")?;
        if let Some(f) = func1 {
            if args.len() != 1 {
                return Err(ParseError::ArityMismatch {
                    name,
                    expected: 1,
                    got: args.len(),
                });
            }
            Ok(Expression::Call1(f, Box::new(args.pop().unwrap())))
        } else {
            let f = func2.unwrap();
            if args.len() != 2 {
                return Err(ParseError::ArityMismatch {
                    name,
                    expected: 2,
                    got: args.len(),
                });
            }
            let b = args.pop().unwrap();
            let a = args.pop().unwrap();
            Ok(Expression::Call2(f, Box::new(a), Box::new(b)))
        }
    }
}

/// Parse an expression string into an AST.
pub fn parse_expression(source: &str) -> Result<Expression, ParseError> {
    let end = source.len();
    let tokens = Lexer::new(source).tokens()?;
    if tokens.is_empty() {
        return Err(ParseError::Syntax {
            offset: 0,
            message: "empty expression".to_string(),
        });
    }
    let mut parser = Parser {
        tokens,
        pos: 0,
        end,
    };
    let e = parser.expr()?;
    if parser.pos != parser.tokens.len() {
        return Err(ParseError::Syntax {
            offset: parser.offset(),
            message: "trailing input".to_string(),
        });
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval1(src: &str, x1: f64) -> f64 {
        parse_expression(src).unwrap().eval(&[x1], 0.0)
    }

    #[test]
    fn linear() {
        assert_eq!(eval1("2*x1 + 1", 3.0), 7.0);
    }

    #[test]
    fn abs_identity() {
        assert_eq!(eval1("max(x1, 0) - min(x1, 0)", -2.0), 2.0);
    }

    #[test]
    fn pythagorean() {
        let v = eval1("sin(x1)^2 + cos(x1)^2", 0.7);
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn precedence() {
        assert_eq!(eval1("1 + 2*3", 0.0), 7.0);
        assert_eq!(eval1("2*3^2", 0.0), 18.0);
        assert_eq!(eval1("-2^2", 0.0), -4.0);
        assert_eq!(eval1("(1 + 2)*3", 0.0), 9.0);
        assert_eq!(eval1("2^3^2", 0.0), 512.0);
        assert_eq!(eval1("8/4/2", 0.0), 1.0);
    }

    #[test]
    fn r_variable() {
        let e = parse_expression("r + x1*r").unwrap();
        assert!(e.uses_r());
        assert_eq!(e.eval(&[2.0], 3.0), 9.0);
        assert!(!parse_expression("x1 + 1").unwrap().uses_r());
    }

    #[test]
    fn errors() {
        assert!(matches!(
            parse_expression("2 +"),
            Err(ParseError::Syntax { .. })
        ));
        assert!(matches!(
            parse_expression("foo(1)"),
            Err(ParseError::UnknownIdentifier { .. })
        ));
        assert!(matches!(
            parse_expression("sin(1, 2)"),
            Err(ParseError::ArityMismatch { .. })
        ));
        assert!(matches!(
            parse_expression("x0"),
            Err(ParseError::UnknownIdentifier { .. })
        ));
        let err = parse_expression("1 + @").unwrap_err();
        assert_eq!(
            err,
            ParseError::Syntax {
                offset: 4,
                message: "unexpected character `@`".to_string()
            }
        );
    }

    #[test]
    fn print_parse_roundtrip() {
        for src in [
            "2*x1 + 1",
            "-(x1 + r)^2",
            "min(x1, max(x2, 0.5))",
            "sin(2*x1)/(1 + x1^2)",
            "1 - 2 - 3",
            "2^3^2",
        ] {
            let e = parse_expression(src).unwrap();
            let printed = e.to_string();
            let reparsed = parse_expression(&printed).unwrap();
            assert_eq!(e, reparsed, "round trip failed for `{src}` -> `{printed}`");
        }
    }
}
