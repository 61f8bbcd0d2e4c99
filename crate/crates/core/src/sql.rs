//! Parser for the aggregate SQL subset:
//!
//! ```text
//! query     := SELECT item ("," item)* FROM table join* [WHERE conj] [GROUP BY column ("," column)*] [";"]
//! item      := AF "(" ("*" | column) ")" [[AS] ident] | column
//! table     := ident [[AS] ident]
//! join      := [INNER] JOIN table ON column "=" column
//! conj      := cond (AND cond)*
//! cond      := column cmp literal | literal cmp column
//!            | column BETWEEN number AND number
//!            | column LIKE string
//!            | "(" conj ")"
//! cmp       := ">=" | ">" | "<=" | "<" | "="
//! ```
//!
//! Strict comparisons are encoded like their inclusive forms. Joins are
//! assumed to run over a pre-joined star schema and do not affect the
//! extracted predicates.

use std::fmt;

use thiserror::Error;

use crate::schema::{AggregateFunction, AggregateSpec, AttributeKind, DatasetSchema, Predicate};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseErrorKind {
    Syntax,
    UnsupportedFeature,
    UnknownIdentifier,
    /// Conjuncts on one attribute whose intersection is empty.
    Contradiction,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParseErrorKind::Syntax => "syntax error",
            ParseErrorKind::UnsupportedFeature => "unsupported feature",
            ParseErrorKind::UnknownIdentifier => "unknown identifier",
            ParseErrorKind::Contradiction => "contradictory predicates",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{kind} at position {position}: {message}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub message: String,
    /// Byte offset into the query text.
    pub position: usize,
}

impl ParseError {
    fn new(kind: ParseErrorKind, position: usize, message: impl Into<String>) -> Self {
        ParseError {
            kind,
            message: message.into(),
            position,
        }
    }
}

/// Elements extracted from one query.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedQuery {
    pub table: String,
    pub aggregates: Vec<AggregateSpec>,
    /// One merged interval per numeric attribute, in schema order.
    pub predicates: Vec<Predicate>,
    pub group_by: Vec<String>,
    pub categorical_equalities: Vec<(String, String)>,
    pub like_patterns: Vec<(String, String)>,
}

impl ParsedQuery {
    pub fn predicate(&self, attribute: &str) -> Option<&Predicate> {
        self.predicates.iter().find(|p| p.attribute == attribute)
    }

    /// The same query with its GROUP BY clause dropped.
    pub fn without_group_by(&self) -> ParsedQuery {
        ParsedQuery {
            group_by: Vec::new(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(f64),
    Str(String),
    Op(&'static str),
    LParen,
    RParen,
    Comma,
    Star,
    Dot,
    Semi,
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Number(n) => write!(f, "number {n}"),
            Tok::Str(s) => write!(f, "string '{s}'"),
            Tok::Op(o) => write!(f, "`{o}`"),
            Tok::LParen => f.write_str("`(`"),
            Tok::RParen => f.write_str("`)`"),
            Tok::Comma => f.write_str("`,`"),
            Tok::Star => f.write_str("`*`"),
            Tok::Dot => f.write_str("`.`"),
            Tok::Semi => f.write_str("`;`"),
            Tok::Eof => f.write_str("end of input"),
        }
    }
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => i += 1,
            b'(' => {
                out.push((Tok::LParen, start));
                i += 1;
            }
            b')' => {
                out.push((Tok::RParen, start));
                i += 1;
            }
            b',' => {
                out.push((Tok::Comma, start));
                i += 1;
            }
            b'*' => {
                out.push((Tok::Star, start));
                i += 1;
            }
            b';' => {
                out.push((Tok::Semi, start));
                i += 1;
            }
            b'>' | b'<' | b'=' | b'!' => {
                let two = bytes.get(i + 1).copied();
                let op = match (c, two) {
                    (b'>', Some(b'=')) => ">=",
                    (b'<', Some(b'=')) => "<=",
                    (b'<', Some(b'>')) => "<>",
                    (b'!', Some(b'=')) => "!=",
                    (b'>', _) => ">",
                    (b'<', _) => "<",
                    (b'=', _) => "=",
                    _ => return Err(ParseError::new(ParseErrorKind::Syntax, start, "unexpected `!`")),
                };
                i += op.len();
                out.push((Tok::Op(op), start));
            }
            b'\'' => {
                let mut s = String::new();
                i += 1;
                loop {
                    match bytes.get(i) {
                        None => {
                            return Err(ParseError::new(ParseErrorKind::Syntax, start, "unterminated string literal"))
                        }
                        Some(b'\'') if bytes.get(i + 1) == Some(&b'\'') => {
                            s.push('\'');
                            i += 2;
                        }
                        Some(b'\'') => {
                            i += 1;
                            break;
                        }
                        Some(_) => {
                            let ch = src[i..].chars().next().unwrap();
                            s.push(ch);
                            i += ch.len_utf8();
                        }
                    }
                }
                out.push((Tok::Str(s), start));
            }
            b'"' | b'`' => {
                let close = c;
                let end = src[i + 1..]
                    .find(close as char)
                    .ok_or_else(|| ParseError::new(ParseErrorKind::Syntax, start, "unterminated quoted identifier"))?;
                out.push((Tok::Ident(src[i + 1..i + 1 + end].to_string()), start));
                i += end + 2;
            }
            b'0'..=b'9' | b'.' | b'-' | b'+' => {
                let is_number_start = match c {
                    b'.' => bytes.get(i + 1).is_some_and(u8::is_ascii_digit),
                    b'-' | b'+' => bytes
                        .get(i + 1)
                        .is_some_and(|b| b.is_ascii_digit() || *b == b'.'),
                    _ => true,
                };
                if !is_number_start {
                    if c == b'.' {
                        out.push((Tok::Dot, start));
                        i += 1;
                        continue;
                    }
                    return Err(ParseError::new(
                        ParseErrorKind::UnsupportedFeature,
                        start,
                        "arithmetic expressions are not supported",
                    ));
                }
                let mut j = i + 1;
                while j < bytes.len() {
                    let b = bytes[j];
                    let exp_sign = (b == b'-' || b == b'+') && matches!(bytes[j - 1], b'e' | b'E');
                    if b.is_ascii_digit() || b == b'.' || b == b'e' || b == b'E' || exp_sign {
                        j += 1;
                    } else {
                        break;
                    }
                }
                let text = &src[i..j];
                let v: f64 = text
                    .parse()
                    .map_err(|_| ParseError::new(ParseErrorKind::Syntax, start, format!("bad number `{text}`")))?;
                out.push((Tok::Number(v), start));
                i = j;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let mut j = i + 1;
                while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
                    j += 1;
                }
                out.push((Tok::Ident(src[i..j].to_string()), start));
                i = j;
            }
            _ => {
                let ch = src[i..].chars().next().unwrap();
                return Err(ParseError::new(
                    ParseErrorKind::Syntax,
                    start,
                    format!("unexpected character `{ch}`"),
                ));
            }
        }
    }
    out.push((Tok::Eof, src.len()));
    Ok(out)
}

const RESERVED: &[&str] = &[
    "SELECT", "FROM", "WHERE", "AND", "OR", "NOT", "BETWEEN", "GROUP", "BY", "LIKE", "JOIN", "INNER", "ON", "AS",
    "IN", "HAVING", "ORDER", "LIMIT", "UNION", "OVER", "DISTINCT", "LEFT", "RIGHT", "OUTER", "CROSS", "FULL",
    "EXISTS", "IS", "NULL",
];

fn is_kw(tok: &Tok, kw: &str) -> bool {
    matches!(tok, Tok::Ident(s) if s.eq_ignore_ascii_case(kw))
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    schema: &'a DatasetSchema,
}

enum Literal {
    Number(f64),
    Text(String),
}

struct Column {
    /// Canonical schema name.
    name: String,
    kind: AttributeKind,
    position: usize,
}

#[derive(Default)]
struct Conditions {
    ranges: Vec<(usize, Option<f64>, Option<f64>, usize)>,
    equalities: Vec<(String, String, usize)>,
    likes: Vec<(String, String)>,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn peek_at(&self, k: usize) -> &Tok {
        &self.toks[(self.pos + k).min(self.toks.len() - 1)].0
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> (Tok, usize) {
        let t = self.toks[self.pos].clone();
        if self.pos < self.toks.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn syntax(&self, msg: impl Into<String>) -> ParseError {
        ParseError::new(ParseErrorKind::Syntax, self.offset(), msg)
    }

    fn unsupported(&self, msg: impl Into<String>) -> ParseError {
        ParseError::new(ParseErrorKind::UnsupportedFeature, self.offset(), msg)
    }

    fn expect_kw(&mut self, kw: &str) -> Result<(), ParseError> {
        if is_kw(self.peek(), kw) {
            self.bump();
            Ok(())
        } else {
            Err(self.syntax(format!("expected {kw}, found {}", self.peek())))
        }
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if is_kw(self.peek(), kw) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, tok: Tok) -> Result<(), ParseError> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            Err(self.syntax(format!("expected {tok}, found {}", self.peek())))
        }
    }

    fn check_unsupported_keyword(&self) -> Result<(), ParseError> {
        for kw in ["OR", "NOT", "IN", "HAVING", "ORDER", "LIMIT", "UNION", "OVER", "EXISTS", "IS"] {
            if is_kw(self.peek(), kw) {
                return Err(self.unsupported(format!("{kw} is not supported")));
            }
        }
        Ok(())
    }

    fn ident(&mut self) -> Result<(String, usize), ParseError> {
        match self.peek().clone() {
            Tok::Ident(s) if !RESERVED.iter().any(|k| s.eq_ignore_ascii_case(k)) => {
                let (_, at) = self.bump();
                Ok((s, at))
            }
            other => Err(self.syntax(format!("expected identifier, found {other}"))),
        }
    }

    /// `name` or `qualifier.name`, resolved against the schema.
    fn column(&mut self) -> Result<Column, ParseError> {
        let (mut name, position) = self.ident()?;
        if *self.peek() == Tok::Dot {
            self.bump();
            name = self.ident()?.0;
        }
        let attr = self.schema.attribute(&name).ok_or_else(|| {
            ParseError::new(ParseErrorKind::UnknownIdentifier, position, format!("unknown column `{name}`"))
        })?;
        Ok(Column {
            name: attr.name.clone(),
            kind: attr.kind,
            position,
        })
    }

    fn literal(&mut self) -> Option<Literal> {
        match self.peek().clone() {
            Tok::Number(v) => {
                self.bump();
                Some(Literal::Number(v))
            }
            Tok::Str(s) => {
                self.bump();
                Some(Literal::Text(s))
            }
            _ => None,
        }
    }

    fn number(&mut self) -> Result<f64, ParseError> {
        match self.peek().clone() {
            Tok::Number(v) => {
                self.bump();
                Ok(v)
            }
            other => Err(self.syntax(format!("expected number, found {other}"))),
        }
    }

    fn query(&mut self) -> Result<ParsedQuery, ParseError> {
        self.expect_kw("SELECT")?;
        if is_kw(self.peek(), "DISTINCT") {
            return Err(self.unsupported("SELECT DISTINCT is not an aggregate query"));
        }
        let mut aggregates = Vec::new();
        let mut projected = Vec::new();
        loop {
            self.select_item(&mut aggregates, &mut projected)?;
            if *self.peek() == Tok::Comma {
                self.bump();
            } else {
                break;
            }
        }
        self.expect_kw("FROM")?;
        if *self.peek() == Tok::LParen {
            return Err(self.unsupported("subqueries are not supported"));
        }
        let (table, table_at) = self.ident()?;
        if !table.eq_ignore_ascii_case(&self.schema.name) {
            return Err(ParseError::new(
                ParseErrorKind::UnknownIdentifier,
                table_at,
                format!("unknown table `{table}` (schema is `{}`)", self.schema.name),
            ));
        }
        self.alias();
        loop {
            if *self.peek() == Tok::Comma {
                return Err(self.unsupported("comma joins with conditions in WHERE are not supported; use JOIN ... ON"));
            }
            if ["LEFT", "RIGHT", "OUTER", "FULL", "CROSS"].iter().any(|k| is_kw(self.peek(), k)) {
                return Err(self.unsupported("only inner equi-joins over a pre-joined schema are supported"));
            }
            let inner = self.eat_kw("INNER");
            if !self.eat_kw("JOIN") {
                if inner {
                    return Err(self.syntax("expected JOIN after INNER"));
                }
                break;
            }
            self.ident()?;
            self.alias();
            self.expect_kw("ON")?;
            self.join_column()?;
            self.expect(Tok::Op("="))?;
            self.join_column()?;
        }
        let mut conds = Conditions::default();
        if self.eat_kw("WHERE") {
            self.conjunction(&mut conds)?;
        }
        let mut group_by = Vec::new();
        if self.eat_kw("GROUP") {
            self.expect_kw("BY")?;
            loop {
                let col = self.column()?;
                if !group_by.contains(&col.name) {
                    group_by.push(col.name);
                }
                if *self.peek() == Tok::Comma {
                    self.bump();
                } else {
                    break;
                }
            }
        }
        self.check_unsupported_keyword()?;
        if *self.peek() == Tok::Semi {
            self.bump();
        }
        if *self.peek() != Tok::Eof {
            return Err(self.syntax(format!("unexpected {}", self.peek())));
        }
        if aggregates.is_empty() {
            return Err(ParseError::new(ParseErrorKind::Syntax, 0, "query has no aggregate function"));
        }
        for (name, at) in projected {
            if !group_by.contains(&name) {
                return Err(ParseError::new(
                    ParseErrorKind::Syntax,
                    at,
                    format!("column `{name}` is projected but not grouped"),
                ));
            }
        }
        self.finish(table, aggregates, conds, group_by)
    }

    fn join_column(&mut self) -> Result<(), ParseError> {
        // join keys may live in dimension tables outside the schema
        self.ident()?;
        if *self.peek() == Tok::Dot {
            self.bump();
            self.ident()?;
        }
        Ok(())
    }

    fn alias(&mut self) {
        if self.eat_kw("AS") {
            let _ = self.ident();
        } else if let Tok::Ident(s) = self.peek() {
            if !RESERVED.iter().any(|k| s.eq_ignore_ascii_case(k)) {
                self.bump();
            }
        }
    }

    fn select_item(
        &mut self,
        aggregates: &mut Vec<AggregateSpec>,
        projected: &mut Vec<(String, usize)>,
    ) -> Result<(), ParseError> {
        let func = match self.peek() {
            Tok::Ident(s) if *self.peek_at(1) == Tok::LParen => Some(s.clone()),
            _ => None,
        };
        match func {
            Some(name) => {
                let at = self.offset();
                let function: AggregateFunction = name.parse().map_err(|_| {
                    ParseError::new(
                        ParseErrorKind::UnsupportedFeature,
                        at,
                        format!("function `{name}` is not a supported aggregate"),
                    )
                })?;
                self.bump();
                self.expect(Tok::LParen)?;
                if is_kw(self.peek(), "DISTINCT") {
                    return Err(self.unsupported("DISTINCT aggregates are not supported"));
                }
                let spec = if *self.peek() == Tok::Star {
                    if function != AggregateFunction::Count {
                        return Err(self.syntax(format!("{function}(*) is not valid")));
                    }
                    self.bump();
                    AggregateSpec::count_star()
                } else {
                    let col = self.column()?;
                    if function != AggregateFunction::Count && col.kind != AttributeKind::Numeric {
                        return Err(ParseError::new(
                            ParseErrorKind::UnsupportedFeature,
                            col.position,
                            format!("{function} over categorical column `{}`", col.name),
                        ));
                    }
                    AggregateSpec::new(function, col.name)
                };
                self.expect(Tok::RParen)?;
                if is_kw(self.peek(), "OVER") {
                    return Err(self.unsupported("window functions are not supported"));
                }
                self.alias_after_item();
                aggregates.push(spec);
            }
            None => {
                let col = self.column()?;
                self.alias_after_item();
                projected.push((col.name, col.position));
            }
        }
        Ok(())
    }

    fn alias_after_item(&mut self) {
        if self.eat_kw("AS") {
            let _ = self.ident();
        } else if let Tok::Ident(s) = self.peek() {
            if !RESERVED.iter().any(|k| s.eq_ignore_ascii_case(k)) {
                self.bump();
            }
        }
    }

    fn conjunction(&mut self, conds: &mut Conditions) -> Result<(), ParseError> {
        loop {
            self.condition(conds)?;
            if self.eat_kw("AND") {
                continue;
            }
            self.check_unsupported_keyword()?;
            return Ok(());
        }
    }

    fn condition(&mut self, conds: &mut Conditions) -> Result<(), ParseError> {
        self.check_unsupported_keyword()?;
        if *self.peek() == Tok::LParen {
            if is_kw(self.peek_at(1), "SELECT") {
                return Err(self.unsupported("subqueries are not supported"));
            }
            self.bump();
            self.conjunction(conds)?;
            return self.expect(Tok::RParen);
        }
        let at = self.offset();
        if let Some(lit) = self.literal() {
            // literal op column: flip the operator
            let op = self.comparison()?;
            let col = self.column()?;
            let flipped = match op {
                ">=" => "<=",
                ">" => "<",
                "<=" => ">=",
                "<" => ">",
                other => other,
            };
            return self.comparison_condition(conds, col, flipped, lit, at);
        }
        let col = self.column()?;
        if self.eat_kw("BETWEEN") {
            let lo = self.number()?;
            self.expect_kw("AND")?;
            let hi = self.number()?;
            if col.kind != AttributeKind::Numeric {
                return Err(ParseError::new(
                    ParseErrorKind::UnsupportedFeature,
                    col.position,
                    format!("BETWEEN on categorical column `{}`", col.name),
                ));
            }
            let idx = self.schema.index_of(&col.name).unwrap();
            conds.ranges.push((idx, Some(lo), Some(hi), at));
            return Ok(());
        }
        if self.eat_kw("LIKE") {
            return match self.peek().clone() {
                Tok::Str(pattern) => {
                    self.bump();
                    if col.kind != AttributeKind::Categorical {
                        return Err(ParseError::new(
                            ParseErrorKind::UnsupportedFeature,
                            col.position,
                            format!("LIKE on numeric column `{}`", col.name),
                        ));
                    }
                    conds.likes.push((col.name, pattern));
                    Ok(())
                }
                other => Err(self.syntax(format!("expected pattern string after LIKE, found {other}"))),
            };
        }
        self.check_unsupported_keyword()?;
        let op = self.comparison()?;
        match self.literal() {
            Some(lit) => self.comparison_condition(conds, col, op, lit, at),
            None => match self.peek() {
                Tok::Ident(_) => Err(ParseError::new(
                    ParseErrorKind::UnsupportedFeature,
                    at,
                    "column-to-column comparison (join condition) in WHERE is not supported",
                )),
                Tok::LParen => Err(self.unsupported("subqueries are not supported")),
                other => Err(self.syntax(format!("expected literal, found {other}"))),
            },
        }
    }

    fn comparison(&mut self) -> Result<&'static str, ParseError> {
        match self.peek().clone() {
            Tok::Op("<>") | Tok::Op("!=") => Err(self.unsupported("negated comparisons are not supported")),
            Tok::Op(op) => {
                self.bump();
                Ok(op)
            }
            other => Err(self.syntax(format!("expected comparison operator, found {other}"))),
        }
    }

    fn comparison_condition(
        &mut self,
        conds: &mut Conditions,
        col: Column,
        op: &'static str,
        lit: Literal,
        at: usize,
    ) -> Result<(), ParseError> {
        match (col.kind, lit) {
            (AttributeKind::Numeric, Literal::Number(v)) => {
                let idx = self.schema.index_of(&col.name).unwrap();
                let (lb, ub) = match op {
                    ">=" | ">" => (Some(v), None),
                    "<=" | "<" => (None, Some(v)),
                    "=" => (Some(v), Some(v)),
                    _ => unreachable!("comparison operators are filtered by the lexer"),
                };
                conds.ranges.push((idx, lb, ub, at));
                Ok(())
            }
            (AttributeKind::Numeric, Literal::Text(_)) => Err(ParseError::new(
                ParseErrorKind::UnsupportedFeature,
                at,
                format!("string comparison on numeric column `{}`", col.name),
            )),
            (AttributeKind::Categorical, lit) => {
                if op != "=" {
                    return Err(ParseError::new(
                        ParseErrorKind::UnsupportedFeature,
                        at,
                        format!("range comparison on categorical column `{}`", col.name),
                    ));
                }
                let value = match lit {
                    Literal::Text(s) => s,
                    Literal::Number(v) => v.to_string(),
                };
                conds.equalities.push((col.name, value, at));
                Ok(())
            }
        }
    }

    fn finish(
        &self,
        table: String,
        aggregates: Vec<AggregateSpec>,
        conds: Conditions,
        group_by: Vec<String>,
    ) -> Result<ParsedQuery, ParseError> {
        let d = self.schema.d();
        let mut merged: Vec<Option<(Option<f64>, Option<f64>)>> = vec![None; d];
        for (idx, lb, ub, at) in conds.ranges {
            let (mut cur_lb, mut cur_ub) = merged[idx].unwrap_or((None, None));
            if let Some(l) = lb {
                cur_lb = Some(cur_lb.map_or(l, |c: f64| c.max(l)));
            }
            if let Some(u) = ub {
                cur_ub = Some(cur_ub.map_or(u, |c: f64| c.min(u)));
            }
            if let (Some(l), Some(u)) = (cur_lb, cur_ub) {
                if l > u {
                    return Err(ParseError::new(
                        ParseErrorKind::Contradiction,
                        at,
                        format!(
                            "predicates on `{}` select an empty range [{l}, {u}]",
                            self.schema.attributes()[idx].name
                        ),
                    ));
                }
            }
            merged[idx] = Some((cur_lb, cur_ub));
        }
        let predicates = merged
            .into_iter()
            .enumerate()
            .filter_map(|(i, m)| {
                m.map(|(lb, ub)| Predicate {
                    attribute: self.schema.attributes()[i].name.clone(),
                    lb,
                    ub,
                })
            })
            .collect();

        let mut categorical_equalities: Vec<(String, String)> = Vec::new();
        for (attr, value, at) in conds.equalities {
            match categorical_equalities.iter().find(|(a, _)| *a == attr) {
                Some((_, existing)) if *existing != value => {
                    return Err(ParseError::new(
                        ParseErrorKind::Contradiction,
                        at,
                        format!("`{attr}` cannot equal both '{existing}' and '{value}'"),
                    ));
                }
                Some(_) => {}
                None => categorical_equalities.push((attr, value)),
            }
        }
        categorical_equalities.sort_by_key(|(a, _)| self.schema.index_of(a));
        let mut like_patterns = conds.likes;
        like_patterns.sort_by_key(|(a, p)| (self.schema.index_of(a), p.clone()));
        like_patterns.dedup();

        Ok(ParsedQuery {
            table,
            aggregates,
            predicates,
            group_by,
            categorical_equalities,
            like_patterns,
        })
    }
}

/// Parses one query against `schema`.
pub fn parse(sql: &str, schema: &DatasetSchema) -> Result<ParsedQuery, ParseError> {
    let toks = lex(sql)?;
    let mut p = Parser { toks, pos: 0, schema };
    p.query()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::Attribute;

    fn schema3() -> DatasetSchema {
        DatasetSchema::numeric("B", 3).unwrap()
    }

    fn mixed() -> DatasetSchema {
        DatasetSchema::new(
            "sales",
            vec![
                Attribute::numeric("price"),
                Attribute::categorical("region", 3),
                Attribute::numeric("qty"),
            ],
        )
        .unwrap()
    }

    #[test]
    fn example_query() {
        let q = parse("SELECT AVG(a3) FROM B WHERE a1 >= 7 AND a2 <= 4", &schema3()).unwrap();
        assert_eq!(q.aggregates, vec![AggregateSpec::new(AggregateFunction::Avg, "a3")]);
        assert_eq!(
            q.predicates,
            vec![
                Predicate {
                    attribute: "a1".into(),
                    lb: Some(7.0),
                    ub: None
                },
                Predicate {
                    attribute: "a2".into(),
                    lb: None,
                    ub: Some(4.0)
                },
            ]
        );
        assert!(q.group_by.is_empty());
    }

    #[test]
    fn count_star_without_predicates() {
        let q = parse("SELECT COUNT(*) FROM B", &schema3()).unwrap();
        assert_eq!(q.aggregates, vec![AggregateSpec::count_star()]);
        assert!(q.predicates.is_empty());
        assert!(q.group_by.is_empty());
    }

    #[test]
    fn equality_is_degenerate_interval() {
        let q = parse("SELECT SUM(a2) FROM B WHERE a1 = 5", &schema3()).unwrap();
        assert_eq!(q.predicates, vec![Predicate::equality("a1", 5.0)]);
    }

    #[test]
    fn strict_operators_match_inclusive() {
        let a = parse("SELECT COUNT(*) FROM B WHERE a1 > 2 AND a2 < 3", &schema3()).unwrap();
        let b = parse("SELECT COUNT(*) FROM B WHERE a1 >= 2 AND a2 <= 3", &schema3()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn between_and_merging() {
        let q = parse(
            "select max(a3) from b where a1 between 1 and 9 and a1 >= 3 and 8 >= a1",
            &schema3(),
        )
        .unwrap();
        assert_eq!(
            q.predicates,
            vec![Predicate {
                attribute: "a1".into(),
                lb: Some(3.0),
                ub: Some(8.0)
            }]
        );
    }

    #[test]
    fn contradiction_is_reported() {
        let e = parse("SELECT COUNT(*) FROM B WHERE a1 >= 5 AND a1 <= 1", &schema3()).unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::Contradiction);
    }

    #[test]
    fn rejects_disjunction_and_negation() {
        let e = parse("SELECT COUNT(*) FROM B WHERE a1 >= 5 OR a2 <= 1", &schema3()).unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::UnsupportedFeature);
        assert_eq!(e.position, 37);
        let e = parse("SELECT COUNT(*) FROM B WHERE NOT a1 >= 5", &schema3()).unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::UnsupportedFeature);
        let e = parse("SELECT COUNT(*) FROM B WHERE a1 <> 5", &schema3()).unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::UnsupportedFeature);
    }

    #[test]
    fn rejects_subquery_and_join_condition() {
        let e = parse("SELECT COUNT(*) FROM B WHERE (SELECT 1)", &schema3()).unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::UnsupportedFeature);
        let e = parse("SELECT COUNT(*) FROM B WHERE a1 = a2", &schema3()).unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::UnsupportedFeature);
        let e = parse("SELECT COUNT(*) FROM (SELECT * FROM B)", &schema3()).unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::UnsupportedFeature);
    }

    #[test]
    fn star_join_is_ignored() {
        let plain = parse("SELECT SUM(a2) FROM B WHERE a1 >= 1", &schema3()).unwrap();
        let joined = parse(
            "SELECT SUM(a2) FROM B b JOIN dim d ON b.k = d.k WHERE b.a1 >= 1",
            &schema3(),
        )
        .unwrap();
        assert_eq!(plain, joined);
    }

    #[test]
    fn unknown_identifiers() {
        let e = parse("SELECT AVG(zz) FROM B", &schema3()).unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::UnknownIdentifier);
        assert_eq!(e.position, 11);
        let e = parse("SELECT AVG(a1) FROM other", &schema3()).unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::UnknownIdentifier);
    }

    #[test]
    fn syntax_errors_carry_position() {
        let e = parse("SELECT AVG(a1 FROM B", &schema3()).unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::Syntax);
        assert_eq!(e.position, 14);
        let e = parse("SELECT FROM B", &schema3()).unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::Syntax);
    }

    #[test]
    fn group_by_and_categoricals() {
        let q = parse(
            "SELECT region, SUM(qty) FROM sales WHERE region = 'east' AND price >= 10 GROUP BY region",
            &mixed(),
        )
        .unwrap();
        assert_eq!(q.group_by, vec!["region".to_string()]);
        assert_eq!(q.categorical_equalities, vec![("region".into(), "east".into())]);
        assert_eq!(q.predicates.len(), 1);

        let q = parse("SELECT COUNT(*) FROM sales WHERE region LIKE '%product'", &mixed()).unwrap();
        assert_eq!(q.like_patterns, vec![("region".into(), "%product".into())]);
    }

    #[test]
    fn ungrouped_projection_rejected() {
        let e = parse("SELECT a1, COUNT(*) FROM B", &schema3()).unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::Syntax);
    }

    #[test]
    fn having_and_windows_rejected() {
        let e = parse("SELECT COUNT(*) FROM B GROUP BY a1 HAVING COUNT(*) > 1", &schema3()).unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::UnsupportedFeature);
        let e = parse("SELECT SUM(a1) OVER FROM B", &schema3()).unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::UnsupportedFeature);
    }

    #[test]
    fn negative_and_scientific_literals() {
        let q = parse("SELECT COUNT(*) FROM B WHERE a1 >= -1.5e3 AND a2 <= 2E+2", &schema3()).unwrap();
        assert_eq!(q.predicates[0].lb, Some(-1500.0));
        assert_eq!(q.predicates[1].ub, Some(200.0));
    }
}
