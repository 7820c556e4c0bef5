//! Attribute predicates over flat scalar maps.
//!
//! ```text
//! expr    := or
//! or      := and ("OR" and)*
//! and     := not ("AND" not)*
//! not     := "NOT"? primary
//! primary := comparison | "(" expr ")"
//! comparison := path op literal
//! op      := == | != | < | <= | > | >= | contains | prefix
//! literal := "string" | number | true | false
//! ```
//!
//! A comparison whose attribute is absent, or whose attribute and literal
//! have different types, evaluates to false.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::canonical::format_number;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Num(f64),
    Str(String),
}

impl Scalar {
    pub fn scalar_type(&self) -> ScalarType {
        match self {
            Scalar::Bool(_) => ScalarType::Bool,
            Scalar::Num(_) => ScalarType::Num,
            Scalar::Str(_) => ScalarType::Str,
        }
    }
}

impl From<&str> for Scalar {
    fn from(s: &str) -> Self {
        Scalar::Str(s.into())
    }
}

impl From<String> for Scalar {
    fn from(s: String) -> Self {
        Scalar::Str(s)
    }
}

impl From<f64> for Scalar {
    fn from(v: f64) -> Self {
        Scalar::Num(v)
    }
}

impl From<u64> for Scalar {
    fn from(v: u64) -> Self {
        Scalar::Num(v as f64)
    }
}

impl From<bool> for Scalar {
    fn from(v: bool) -> Self {
        Scalar::Bool(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarType {
    Bool,
    Num,
    Str,
}

pub type Attrs = BTreeMap<String, Scalar>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "contains")]
    Contains,
    #[serde(rename = "prefix")]
    Prefix,
}

impl CmpOp {
    pub const ALL: [CmpOp; 8] =
        [CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge, CmpOp::Contains, CmpOp::Prefix];

    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Contains => "contains",
            CmpOp::Prefix => "prefix",
        }
    }

    fn is_ordering(self) -> bool {
        matches!(self, CmpOp::Lt | CmpOp::Le | CmpOp::Gt | CmpOp::Ge)
    }

    fn is_textual(self) -> bool {
        matches!(self, CmpOp::Contains | CmpOp::Prefix)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub path: String,
    pub op: CmpOp,
    pub literal: Scalar,
}

impl Comparison {
    pub fn eval(&self, attrs: &Attrs) -> bool {
        let Some(value) = attrs.get(&self.path) else {
            return false;
        };
        match (value, &self.literal) {
            (Scalar::Num(a), Scalar::Num(b)) => match self.op {
                CmpOp::Eq => a == b,
                CmpOp::Ne => a != b,
                CmpOp::Lt => a < b,
                CmpOp::Le => a <= b,
                CmpOp::Gt => a > b,
                CmpOp::Ge => a >= b,
                CmpOp::Contains | CmpOp::Prefix => false,
            },
            (Scalar::Str(a), Scalar::Str(b)) => match self.op {
                CmpOp::Eq => a == b,
                CmpOp::Ne => a != b,
                CmpOp::Contains => a.contains(b.as_str()),
                CmpOp::Prefix => a.starts_with(b.as_str()),
                _ => false,
            },
            (Scalar::Bool(a), Scalar::Bool(b)) => match self.op {
                CmpOp::Eq => a == b,
                CmpOp::Ne => a != b,
                _ => false,
            },
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    Cmp(Comparison),
    And(Vec<Predicate>),
    Or(Vec<Predicate>),
    Not(Box<Predicate>),
}

impl Predicate {
    pub fn cmp(path: &str, op: CmpOp, literal: impl Into<Scalar>) -> Self {
        Predicate::Cmp(Comparison { path: path.into(), op, literal: literal.into() })
    }

    pub fn parse(text: &str) -> Result<Self, ParseError> {
        Parser::new(text)?.parse_all()
    }

    pub fn eval(&self, attrs: &Attrs) -> bool {
        match self {
            Predicate::Cmp(c) => c.eval(attrs),
            Predicate::And(items) => items.iter().all(|p| p.eval(attrs)),
            Predicate::Or(items) => items.iter().any(|p| p.eval(attrs)),
            Predicate::Not(inner) => !inner.eval(attrs),
        }
    }

    pub fn comparisons(&self) -> Vec<&Comparison> {
        let mut out = Vec::new();
        self.collect(&mut out);
        out
    }

    fn collect<'a>(&'a self, out: &mut Vec<&'a Comparison>) {
        match self {
            Predicate::Cmp(c) => out.push(c),
            Predicate::And(items) | Predicate::Or(items) => items.iter().for_each(|p| p.collect(out)),
            Predicate::Not(inner) => inner.collect(out),
        }
    }

    /// Rejects comparisons that can never be true: ordering ops with a
    /// non-numeric literal, `contains`/`prefix` with a non-string literal, and
    /// any comparison whose literal type disagrees with a known attribute.
    /// Attributes the vocabulary does not know are accepted.
    pub fn type_check(&self, vocabulary: impl Fn(&str) -> Option<ScalarType>) -> Result<(), TypeError> {
        for c in self.comparisons() {
            let lit = c.literal.scalar_type();
            if c.op.is_ordering() && lit != ScalarType::Num {
                return Err(TypeError::new(c, "ordering operators need a numeric literal"));
            }
            if c.op.is_textual() && lit != ScalarType::Str {
                return Err(TypeError::new(c, "contains/prefix need a string literal"));
            }
            if let Some(attr) = vocabulary(&c.path) {
                if attr != lit {
                    return Err(TypeError::new(c, "literal type does not match the attribute"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("type error in `{comparison}`: {reason}")]
pub struct TypeError {
    pub comparison: String,
    pub reason: &'static str,
}

impl TypeError {
    fn new(c: &Comparison, reason: &'static str) -> Self {
        TypeError { comparison: Predicate::Cmp(c.clone()).to_string(), reason }
    }
}

fn write_literal(f: &mut fmt::Formatter<'_>, lit: &Scalar) -> fmt::Result {
    match lit {
        Scalar::Bool(b) => write!(f, "{b}"),
        Scalar::Num(n) => f.write_str(&format_number(*n)),
        Scalar::Str(s) => {
            f.write_str("\"")?;
            for c in s.chars() {
                match c {
                    '"' => f.write_str("\\\"")?,
                    '\\' => f.write_str("\\\\")?,
                    '\n' => f.write_str("\\n")?,
                    '\t' => f.write_str("\\t")?,
                    c => write!(f, "{c}")?,
                }
            }
            f.write_str("\"")
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::Cmp(c) => {
                write!(f, "{} {} ", c.path, c.op.symbol())?;
                write_literal(f, &c.literal)
            }
            Predicate::And(items) | Predicate::Or(items) => {
                let sep = if matches!(self, Predicate::And(_)) { " AND " } else { " OR " };
                for (i, p) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(sep)?;
                    }
                    if matches!(p, Predicate::Cmp(_) | Predicate::Not(_)) {
                        write!(f, "{p}")?;
                    } else {
                        write!(f, "({p})")?;
                    }
                }
                Ok(())
            }
            Predicate::Not(inner) => match **inner {
                Predicate::Cmp(_) => write!(f, "NOT {inner}"),
                _ => write!(f, "NOT ({inner})"),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("parse error at {position}: expected {expected}")]
pub struct ParseError {
    /// Byte offset into the predicate text.
    pub position: usize,
    pub expected: String,
}

impl ParseError {
    fn at(position: usize, expected: &str) -> Self {
        ParseError { position, expected: expected.into() }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Str(String),
    Num(f64),
    True,
    False,
    And,
    Or,
    Not,
    LParen,
    RParen,
    Op(CmpOp),
    End,
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'(' => {
                out.push((start, Tok::LParen));
                i += 1;
            }
            b')' => {
                out.push((start, Tok::RParen));
                i += 1;
            }
            b'=' | b'!' | b'<' | b'>' => {
                let next = bytes.get(i + 1).copied();
                let (op, len) = match (c, next) {
                    (b'=', Some(b'=')) => (CmpOp::Eq, 2),
                    (b'!', Some(b'=')) => (CmpOp::Ne, 2),
                    (b'<', Some(b'=')) => (CmpOp::Le, 2),
                    (b'>', Some(b'=')) => (CmpOp::Ge, 2),
                    (b'<', _) => (CmpOp::Lt, 1),
                    (b'>', _) => (CmpOp::Gt, 1),
                    _ => return Err(ParseError::at(start, "comparison operator")),
                };
                out.push((start, Tok::Op(op)));
                i += len;
            }
            b'"' => {
                i += 1;
                let mut s = String::new();
                loop {
                    let Some(ch) = text[i..].chars().next() else {
                        return Err(ParseError::at(i, "closing quote"));
                    };
                    i += ch.len_utf8();
                    match ch {
                        '"' => break,
                        '\\' => {
                            let Some(esc) = text[i..].chars().next() else {
                                return Err(ParseError::at(i, "escape character"));
                            };
                            i += esc.len_utf8();
                            s.push(match esc {
                                'n' => '\n',
                                't' => '\t',
                                '"' => '"',
                                '\\' => '\\',
                                _ => return Err(ParseError::at(i - esc.len_utf8(), "valid escape")),
                            });
                        }
                        ch => s.push(ch),
                    }
                }
                out.push((start, Tok::Str(s)));
            }
            b'-' | b'0'..=b'9' => {
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'.' {
                    i += 1;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    i += 1;
                    if i < bytes.len() && (bytes[i] == b'+' || bytes[i] == b'-') {
                        i += 1;
                    }
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                let n: f64 = text[start..i].parse().map_err(|_| ParseError::at(start, "number"))?;
                if !n.is_finite() {
                    return Err(ParseError::at(start, "finite number"));
                }
                out.push((start, Tok::Num(n)));
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_' || bytes[i] == b'.') {
                    i += 1;
                }
                let word = &text[start..i];
                let tok = match word {
                    "AND" => Tok::And,
                    "OR" => Tok::Or,
                    "NOT" => Tok::Not,
                    "true" => Tok::True,
                    "false" => Tok::False,
                    "contains" => Tok::Op(CmpOp::Contains),
                    "prefix" => Tok::Op(CmpOp::Prefix),
                    _ => Tok::Ident(word.into()),
                };
                out.push((start, tok));
            }
            _ => return Err(ParseError::at(start, "token")),
        }
    }
    out.push((text.len(), Tok::End));
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
}

impl Parser {
    fn new(text: &str) -> Result<Self, ParseError> {
        Ok(Parser { toks: lex(text)?, pos: 0 })
    }

    fn peek(&self) -> &Tok {
        &self.toks[self.pos].1
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].0
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].1.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn parse_all(mut self) -> Result<Predicate, ParseError> {
        let p = self.parse_or()?;
        if *self.peek() != Tok::End {
            return Err(ParseError::at(self.offset(), "AND, OR or end of input"));
        }
        Ok(p)
    }

    fn parse_or(&mut self) -> Result<Predicate, ParseError> {
        let mut items = alloc::vec![self.parse_and()?];
        while *self.peek() == Tok::Or {
            self.bump();
            items.push(self.parse_and()?);
        }
        Ok(if items.len() == 1 { items.pop().unwrap() } else { Predicate::Or(items) })
    }

    fn parse_and(&mut self) -> Result<Predicate, ParseError> {
        let mut items = alloc::vec![self.parse_not()?];
        while *self.peek() == Tok::And {
            self.bump();
            items.push(self.parse_not()?);
        }
        Ok(if items.len() == 1 { items.pop().unwrap() } else { Predicate::And(items) })
    }

    fn parse_not(&mut self) -> Result<Predicate, ParseError> {
        if *self.peek() == Tok::Not {
            self.bump();
            return Ok(Predicate::Not(Box::new(self.parse_primary()?)));
        }
        self.parse_primary()
    }

    fn parse_primary(&mut self) -> Result<Predicate, ParseError> {
        let at = self.offset();
        match self.bump() {
            Tok::LParen => {
                let inner = self.parse_or()?;
                if *self.peek() != Tok::RParen {
                    return Err(ParseError::at(self.offset(), "`)`"));
                }
                self.bump();
                Ok(inner)
            }
            Tok::Ident(path) => {
                let at = self.offset();
                let Tok::Op(op) = self.bump() else {
                    return Err(ParseError::at(at, "comparison operator"));
                };
                let at = self.offset();
                let literal = match self.bump() {
                    Tok::Str(s) => Scalar::Str(s),
                    Tok::Num(n) => Scalar::Num(n),
                    Tok::True => Scalar::Bool(true),
                    Tok::False => Scalar::Bool(false),
                    _ => return Err(ParseError::at(at, "literal")),
                };
                Ok(Predicate::Cmp(Comparison { path, op, literal }))
            }
            _ => Err(ParseError::at(at, "attribute name, NOT or `(`")),
        }
    }
}
