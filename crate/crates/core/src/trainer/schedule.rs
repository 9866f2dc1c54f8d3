//! Decay schedules written as small arithmetic expressions of the optimizer
//! step `i`, such as `min(0.25+0.005*i, 0.999)`.
//!
//! Grammar: numbers, the variable `i`, `+ - * /`, parentheses, unary minus,
//! and `min(..)` / `max(..)` with two or more arguments. Juxtaposition
//! multiplies, so `0.005i` reads as `0.005*i`.

use std::fmt;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

#[derive(Clone, Debug, PartialEq)]
enum Expr {
    Num(f64),
    Step,
    Neg(Box<Expr>),
    Bin(Op, Box<Expr>, Box<Expr>),
    Min(Vec<Expr>),
    Max(Vec<Expr>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
}

impl Expr {
    fn eval(&self, i: f64) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Step => i,
            Expr::Neg(e) => -e.eval(i),
            Expr::Bin(op, a, b) => {
                let (a, b) = (a.eval(i), b.eval(i));
                match op {
                    Op::Add => a + b,
                    Op::Sub => a - b,
                    Op::Mul => a * b,
                    Op::Div => a / b,
                }
            }
            Expr::Min(args) => args.iter().map(|e| e.eval(i)).fold(f64::INFINITY, f64::min),
            Expr::Max(args) => args.iter().map(|e| e.eval(i)).fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// A parse failure with the byte offset it was detected at.
#[derive(Clone, Debug, PartialEq, thiserror::Error)]
#[error("schedule `{source_text}`: {message} at offset {offset}")]
pub struct ScheduleError {
    pub source_text: String,
    pub message: String,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Sym(char),
}

fn tokenize(src: &str) -> Result<Vec<(Token, usize)>, (String, usize)> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let c = bytes[pos] as char;
        if c.is_ascii_whitespace() {
            pos += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = pos;
            while pos < bytes.len() && ((bytes[pos] as char).is_ascii_digit() || bytes[pos] == b'.') {
                pos += 1;
            }
            // Exponent, only when followed by digits so `2e` stays an error
            // rather than silently swallowing an identifier.
            if pos < bytes.len() && (bytes[pos] == b'e' || bytes[pos] == b'E') {
                let mut q = pos + 1;
                if q < bytes.len() && (bytes[q] == b'+' || bytes[q] == b'-') {
                    q += 1;
                }
                if q < bytes.len() && bytes[q].is_ascii_digit() {
                    pos = q;
                    while pos < bytes.len() && bytes[pos].is_ascii_digit() {
                        pos += 1;
                    }
                }
            }
            let text = &src[start..pos];
            let v: f64 = text
                .parse()
                .map_err(|_| (format!("bad number `{text}`"), start))?;
            out.push((Token::Num(v), start));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = pos;
            while pos < bytes.len() && ((bytes[pos] as char).is_ascii_alphanumeric() || bytes[pos] == b'_') {
                pos += 1;
            }
            out.push((Token::Ident(src[start..pos].to_string()), start));
        } else if "+-*/(),".contains(c) {
            out.push((Token::Sym(c), pos));
            pos += 1;
        } else {
            return Err((format!("unexpected character `{c}`"), pos));
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(Token, usize)>,
    pos: usize,
    end: usize,
}

type PResult<T> = Result<T, (String, usize)>;

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(t, _)| t)
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.end, |(_, o)| *o)
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Token::Sym(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> PResult<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err((format!("expected `{c}`"), self.offset()))
        }
    }

    fn expr(&mut self) -> PResult<Expr> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.eat('+') {
                Op::Add
            } else if self.eat('-') {
                Op::Sub
            } else {
                return Ok(lhs);
            };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(self.term()?));
        }
    }

    fn starts_factor(&self) -> bool {
        matches!(self.peek(), Some(Token::Num(_) | Token::Ident(_) | Token::Sym('(')))
    }

    fn term(&mut self) -> PResult<Expr> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.eat('*') {
                Op::Mul
            } else if self.eat('/') {
                Op::Div
            } else if self.starts_factor() {
                Op::Mul
            } else {
                return Ok(lhs);
            };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(self.unary()?));
        }
    }

    fn unary(&mut self) -> PResult<Expr> {
        if self.eat('-') {
            Ok(Expr::Neg(Box::new(self.unary()?)))
        } else if self.eat('+') {
            self.unary()
        } else {
            self.atom()
        }
    }

    fn atom(&mut self) -> PResult<Expr> {
        let at = self.offset();
        match self.peek().cloned() {
            Some(Token::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Num(v))
            }
            Some(Token::Sym('(')) => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Some(Token::Ident(name)) => {
                self.pos += 1;
                match name.as_str() {
                    "i" => Ok(Expr::Step),
                    "min" | "max" => {
                        self.expect('(')?;
                        let mut args = vec![self.expr()?];
                        while self.eat(',') {
                            args.push(self.expr()?);
                        }
                        self.expect(')')?;
                        if args.len() < 2 {
                            return Err((format!("`{name}` needs at least two arguments"), at));
                        }
                        Ok(if name == "min" { Expr::Min(args) } else { Expr::Max(args) })
                    }
                    _ => Err((format!("unknown name `{name}` (only `i`, `min`, `max`)"), at)),
                }
            }
            Some(Token::Sym(c)) => Err((format!("unexpected `{c}`"), at)),
            None => Err(("unexpected end of expression".into(), at)),
        }
    }
}

/// A parsed schedule that remembers its source text.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    source: String,
    expr: Expr,
}

impl Schedule {
    pub fn parse(source: &str) -> Result<Self, ScheduleError> {
        let fail = |(message, offset): (String, usize)| ScheduleError {
            source_text: source.to_string(),
            message,
            offset,
        };
        let tokens = tokenize(source).map_err(fail)?;
        let mut p = Parser {
            tokens,
            pos: 0,
            end: source.len(),
        };
        let expr = p.expr().map_err(fail)?;
        if p.pos != p.tokens.len() {
            return Err(fail(("trailing input".into(), p.offset())));
        }
        Ok(Self {
            source: source.trim().to_string(),
            expr,
        })
    }

    pub fn constant(value: f64) -> Self {
        Self {
            source: format!("{value:?}"),
            expr: Expr::Num(value),
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Value at optimizer step `i`.
    pub fn at(&self, i: usize) -> f64 {
        self.expr.eval(i as f64)
    }

    /// First step in `0..=last` whose value is not in `[0, 1]`.
    pub fn first_outside_unit(&self, last: usize) -> Option<(usize, f64)> {
        (0..=last).map(|i| (i, self.at(i))).find(|(_, v)| !(0.0..=1.0).contains(v))
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl std::str::FromStr for Schedule {
    type Err = ScheduleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl Serialize for Schedule {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.source)
    }
}

impl<'de> Deserialize<'de> for Schedule {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl de::Visitor<'_> for V {
            type Value = Schedule;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a schedule expression in `i` or a number")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Schedule, E> {
                Schedule::parse(v).map_err(E::custom)
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Schedule, E> {
                Ok(Schedule::constant(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Schedule, E> {
                Ok(Schedule::constant(v as f64))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Schedule, E> {
                Ok(Schedule::constant(v as f64))
            }
        }
        d.deserialize_any(V)
    }
}
