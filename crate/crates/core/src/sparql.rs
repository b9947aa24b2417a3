//! SPARQL subset: parsing, canonical rendering, and conversion to and from
//! CRPs.
//!
//! The subset is `SELECT DISTINCT ?v WHERE { patterns and FILTERs }` with an
//! optional `ORDER BY ASC|DESC(?v) LIMIT 1`. Patterns are basic triple
//! patterns over variables, `:`-prefixed symbols and literals. A FILTER holds
//! a single comparison between a variable and a literal.
//!
//! Compiling a CRP produces a chain of patterns `?h1 .. ?hN` rooted at the
//! topic entity. Every constraint hangs off its hop variable: entity
//! constraints as a direct pattern, numeric and string constraints through a
//! branch variable `?cK` with a FILTER, argmax/argmin through `ORDER BY`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::crp::{ComparisonOp, Constraint, ConstraintValue, Crp, CrpError, MainPath, NumericCondition};
use crate::kg::{parse_quoted_literal, EntityId, Literal, LiteralKind, RelationId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BridgeError {
    #[error("line {line}, column {column}: expected {expected}")]
    Parse { line: usize, column: usize, expected: String },
    #[error("unsupported SPARQL feature: {0}")]
    UnsupportedFeature(String),
    #[error("variable ?{0} is not bound by any triple pattern")]
    UnboundVariable(String),
    #[error("no named entity reaches the SELECT variable")]
    NoTopicEntity,
    #[error("more than one pattern chain reaches the SELECT variable")]
    AmbiguousMainPath,
    #[error("cannot classify branch: {0}")]
    UnclassifiableBranch(String),
    #[error("CRP topic entity is not grounded")]
    UngroundedTopic,
    #[error("entity constraint {0:?} is not grounded")]
    UnresolvedConstraintEntity(String),
    #[error("a query can carry only one ORDER BY; the CRP has several argmax/argmin constraints")]
    MultipleOrderings,
    #[error(transparent)]
    Crp(#[from] CrpError),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub String);

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "?{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    Var(Var),
    Entity(EntityId),
    Lit(Literal),
}

impl Term {
    pub fn var(&self) -> Option<&Var> {
        match self {
            Term::Var(v) => Some(v),
            _ => None,
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Var(v) => v.fmt(f),
            Term::Entity(e) => write!(f, ":{e}"),
            Term::Lit(l) => f.write_str(&l.to_quoted()),
        }
    }
}

/// `subject relation object`. Subjects are never literals.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TriplePattern {
    pub subject: Term,
    pub relation: RelationId,
    pub object: Term,
}

impl fmt::Display for TriplePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} :{} {} .", self.subject, self.relation, self.object)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FilterClause {
    pub var: Var,
    pub op: ComparisonOp,
    pub value: Literal,
}

fn op_symbol(op: ComparisonOp) -> &'static str {
    match op {
        ComparisonOp::Eq => "=",
        ComparisonOp::Ge => ">=",
        ComparisonOp::Le => "<=",
        ComparisonOp::Gt => ">",
        ComparisonOp::Lt => "<",
        ComparisonOp::ArgMax | ComparisonOp::ArgMin => unreachable!("extremum ops are not FILTER operators"),
    }
}

impl fmt::Display for FilterClause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FILTER({} {} {})", self.var, op_symbol(self.op), self.value.to_quoted())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Asc,
    Desc,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OrderClause {
    pub var: Var,
    pub direction: Direction,
    pub limit_one: bool,
}

impl fmt::Display for OrderClause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dir = match self.direction {
            Direction::Asc => "ASC",
            Direction::Desc => "DESC",
        };
        write!(f, "ORDER BY {dir}({})", self.var)?;
        if self.limit_one {
            f.write_str(" LIMIT 1")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparqlQuery {
    pub select_var: Var,
    pub patterns: Vec<TriplePattern>,
    pub filters: Vec<FilterClause>,
    pub order: Option<OrderClause>,
}

impl SparqlQuery {
    fn print(&self) -> String {
        let mut out = format!("SELECT DISTINCT {} WHERE {{\n", self.select_var);
        for p in &self.patterns {
            out.push_str(&format!("  {p}\n"));
        }
        for flt in &self.filters {
            out.push_str(&format!("  {flt}\n"));
        }
        out.push('}');
        if let Some(o) = &self.order {
            out.push_str(&format!("\n{o}"));
        }
        out
    }

    fn vars_in_patterns(&self) -> BTreeSet<&Var> {
        self.patterns
            .iter()
            .flat_map(|p| [p.subject.var(), p.object.var()])
            .flatten()
            .collect()
    }
}

impl fmt::Display for SparqlQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_sparql(self))
    }
}

// ---------------------------------------------------------------- tokenizer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Var(String),
    Prefixed(String),
    Lit(Literal),
    Iri,
    Int(String),
    Num(String),
    Op(&'static str),
    LBrace,
    RBrace,
    LParen,
    RParen,
    Dot,
}

const UNSUPPORTED: &[&str] = &[
    "UNION", "OPTIONAL", "MINUS", "GRAPH", "SERVICE", "BIND", "VALUES", "GROUP", "HAVING", "COUNT", "SUM", "MIN",
    "MAX", "AVG", "SAMPLE", "CONSTRUCT", "ASK", "DESCRIBE", "OFFSET", "NOT", "EXISTS", "REDUCED", "FROM", "AS",
    "LANG", "REGEX", "STR", "CONTAINS", "BOUND", "IN",
];

struct Spanned {
    tok: Tok,
    line: usize,
    column: usize,
}

fn tokenize(text: &str) -> Result<Vec<Spanned>, BridgeError> {
    let mut out = Vec::new();
    let mut line = 1;
    let mut line_start = 0;
    let bytes = text.as_bytes();
    let mut i = 0;
    let is_sym = |c: char| !c.is_whitespace() && !matches!(c, '(' | ')' | '{' | '}' | '"' | ';' | '<' | '>');
    while i < text.len() {
        let c = text[i..].chars().next().unwrap();
        let column = text[line_start..i].chars().count() + 1;
        let err = |expected: &str| BridgeError::Parse { line, column, expected: expected.into() };
        if c == '\n' {
            line += 1;
            i += 1;
            line_start = i;
            continue;
        }
        if c.is_whitespace() {
            i += c.len_utf8();
            continue;
        }
        if c == '#' {
            while i < text.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        let tok = match c {
            '{' => {
                i += 1;
                Tok::LBrace
            }
            '}' => {
                i += 1;
                Tok::RBrace
            }
            '(' => {
                i += 1;
                Tok::LParen
            }
            ')' => {
                i += 1;
                Tok::RParen
            }
            '.' => {
                i += 1;
                Tok::Dot
            }
            '>' | '<' | '=' | '!' => {
                if c == '<' && text[i..].find('>').is_some_and(|j| !text[i..i + j].contains(char::is_whitespace)) {
                    let j = text[i..].find('>').unwrap();
                    i += j + 1;
                    Tok::Iri
                } else if text[i..].starts_with(">=") || text[i..].starts_with("<=") {
                    i += 2;
                    Tok::Op(if c == '>' { ">=" } else { "<=" })
                } else if c == '!' {
                    return Err(BridgeError::UnsupportedFeature("!=".into()));
                } else {
                    i += 1;
                    Tok::Op(match c {
                        '>' => ">",
                        '<' => "<",
                        _ => "=",
                    })
                }
            }
            '?' | '$' => {
                i += 1;
                let name_len = text[i..]
                    .find(|ch: char| !(ch.is_alphanumeric() || ch == '_'))
                    .unwrap_or(text.len() - i);
                if name_len == 0 {
                    return Err(err("a variable name"));
                }
                let name = text[i..i + name_len].to_string();
                i += name_len;
                Tok::Var(name)
            }
            '"' => {
                let rest = &text[i..];
                let (_, after) = crate::kg::unquote_prefix(rest).ok_or_else(|| err("a closing quote"))?;
                let mut end = rest.len() - after.len();
                if after.starts_with('@') || after.starts_with("^^") {
                    end += after.find(|ch: char| ch.is_whitespace() || ch == ')' || ch == '}').unwrap_or(after.len());
                    // a terminating " ." glued to the literal
                    if rest[..end].ends_with('.') && !rest[..end].ends_with("\".") {
                        end -= 1;
                    }
                }
                let lit = parse_quoted_literal(&rest[..end]).map_err(|_| err("a literal"))?;
                i += end;
                Tok::Lit(lit)
            }
            '&' if text[i..].starts_with("&&") => {
                i += 2;
                Tok::Op("&&")
            }
            '*' | '/' | '|' | '^' | '&' | ',' | ';' | '+' => {
                return Err(BridgeError::UnsupportedFeature(c.to_string()));
            }
            _ if c.is_ascii_digit() || (c == '-' && text[i + 1..].starts_with(|ch: char| ch.is_ascii_digit())) => {
                let (len, integer) = number_len(&text[i..]);
                i += len;
                let n = text[start..i].to_string();
                if integer && c != '-' {
                    Tok::Int(n)
                } else {
                    Tok::Num(n)
                }
            }
            _ => {
                let len = text[i..].find(|ch: char| !is_sym(ch)).unwrap_or(text.len() - i);
                let mut word = &text[i..i + len];
                if word.len() > 1 && word.ends_with('.') {
                    word = &word[..word.len() - 1];
                }
                i += word.len();
                if word.starts_with(':') && word.contains(['/', '|', '^', '*', '+']) {
                    return Err(BridgeError::UnsupportedFeature("property path".into()));
                } else if let Some(sym) = word.strip_prefix(':') {
                    Tok::Prefixed(sym.to_string())
                } else if word.contains(':') {
                    // `xsd:` or other prefix declarations
                    Tok::Word(word.to_string())
                } else if word.chars().all(|ch| ch.is_ascii_alphabetic()) {
                    Tok::Word(word.to_ascii_uppercase())
                } else {
                    return Err(err("a keyword, variable, symbol or literal"));
                }
            }
        };
        out.push(Spanned { tok, line, column });
    }
    Ok(out)
}

/// Length of a leading `-?digits(.digits)?([eE][+-]?digits)?` and whether it
/// is a plain integer.
fn number_len(s: &str) -> (usize, bool) {
    let b = s.as_bytes();
    let digits = |mut i: usize| {
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        i
    };
    let mut i = digits(usize::from(b[0] == b'-'));
    let mut integer = true;
    if i + 1 < b.len() && b[i] == b'.' && b[i + 1].is_ascii_digit() {
        i = digits(i + 1);
        integer = false;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        let mut j = i + 1;
        if j < b.len() && (b[j] == b'+' || b[j] == b'-') {
            j += 1;
        }
        if j < b.len() && b[j].is_ascii_digit() {
            i = digits(j);
            integer = false;
        }
    }
    (i, integer)
}

// ------------------------------------------------------------------- parser

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
    end: (usize, usize),
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|s| &s.tok)
    }

    fn err(&self, expected: &str) -> BridgeError {
        if let Some(Spanned { tok: Tok::Word(w), .. }) = self.toks.get(self.pos) {
            if UNSUPPORTED.contains(&w.as_str()) {
                return BridgeError::UnsupportedFeature(w.clone());
            }
        }
        let (line, column) = self.toks.get(self.pos).map(|s| (s.line, s.column)).unwrap_or(self.end);
        BridgeError::Parse { line, column, expected: expected.into() }
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|s| s.tok.clone());
        self.pos += 1;
        t
    }

    fn keyword(&mut self, kw: &str) -> Result<(), BridgeError> {
        match self.peek() {
            Some(Tok::Word(w)) if w == kw => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.err(kw)),
        }
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Tok::Word(w)) if w == kw)
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), BridgeError> {
        if self.peek() == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(what))
        }
    }

    fn var(&mut self) -> Result<Var, BridgeError> {
        match self.peek() {
            Some(Tok::Var(v)) => {
                let v = Var(v.clone());
                self.pos += 1;
                Ok(v)
            }
            _ => Err(self.err("a variable")),
        }
    }

    fn symbol<T>(&mut self, make: impl Fn(&str) -> Result<T, crate::kg::KgError>) -> Result<T, BridgeError> {
        match self.peek() {
            Some(Tok::Prefixed(s)) => {
                let s = s.clone();
                let out = make(&s).map_err(|_| self.err("a valid symbol"))?;
                self.pos += 1;
                Ok(out)
            }
            Some(Tok::Var(_)) => Err(BridgeError::UnsupportedFeature("variable in predicate position".into())),
            _ => Err(self.err("a :symbol")),
        }
    }

    fn term(&mut self, allow_literal: bool) -> Result<Term, BridgeError> {
        match self.peek() {
            Some(Tok::Var(_)) => self.var().map(Term::Var),
            Some(Tok::Prefixed(_)) => self.symbol(|s| EntityId::new(s)).map(Term::Entity),
            Some(Tok::Lit(l)) if allow_literal => {
                let l = l.clone();
                self.pos += 1;
                Ok(Term::Lit(l))
            }
            _ => Err(self.err(if allow_literal { "a variable, :symbol or literal" } else { "a variable or :symbol" })),
        }
    }

    /// `?v op literal` inside a FILTER.
    fn comparison(&mut self) -> Result<FilterClause, BridgeError> {
        let var = self.var()?;
        let op = match self.next() {
            Some(Tok::Op(o)) if o != "&&" => match o {
                "=" => ComparisonOp::Eq,
                ">=" => ComparisonOp::Ge,
                "<=" => ComparisonOp::Le,
                ">" => ComparisonOp::Gt,
                _ => ComparisonOp::Lt,
            },
            _ => {
                self.pos -= 1;
                return Err(self.err("a comparison operator"));
            }
        };
        let value = match self.next() {
            Some(Tok::Lit(l)) => l,
            Some(Tok::Int(n) | Tok::Num(n)) => Literal::numeric(&n).map_err(|_| {
                self.pos -= 1;
                self.err("a finite number")
            })?,
            _ => {
                self.pos -= 1;
                return Err(self.err("a literal"));
            }
        };
        Ok(FilterClause { var, op, value })
    }

    fn query(&mut self) -> Result<SparqlQuery, BridgeError> {
        while self.is_keyword("PREFIX") {
            self.pos += 1;
            match self.next() {
                Some(Tok::Word(w)) if w.ends_with(':') => {}
                Some(Tok::Prefixed(s)) if s.is_empty() => {}
                _ => {
                    self.pos -= 1;
                    return Err(self.err("a prefix name"));
                }
            }
            if self.peek() == Some(&Tok::Op(":")) {
                self.pos += 1;
            }
            self.expect(Tok::Iri, "an <iri>")?;
        }
        self.keyword("SELECT")?;
        if self.is_keyword("DISTINCT") {
            self.pos += 1;
        }
        let select_var = self.var()?;
        if matches!(self.peek(), Some(Tok::Var(_))) {
            return Err(BridgeError::UnsupportedFeature("multiple SELECT variables".into()));
        }
        self.keyword("WHERE")?;
        self.expect(Tok::LBrace, "{")?;
        let mut patterns = Vec::new();
        let mut filters = Vec::new();
        loop {
            match self.peek() {
                Some(Tok::RBrace) => {
                    self.pos += 1;
                    break;
                }
                Some(Tok::Word(w)) if w == "FILTER" => {
                    self.pos += 1;
                    self.expect(Tok::LParen, "(")?;
                    filters.push(self.comparison()?);
                    while self.peek() == Some(&Tok::Op("&&")) {
                        self.pos += 1;
                        filters.push(self.comparison()?);
                    }
                    self.expect(Tok::RParen, ")")?;
                    if self.peek() == Some(&Tok::Dot) {
                        self.pos += 1;
                    }
                }
                Some(Tok::LBrace) => return Err(BridgeError::UnsupportedFeature("nested group".into())),
                Some(_) => {
                    let subject = self.term(false)?;
                    let relation = self.symbol(|s| RelationId::new(s))?;
                    let object = self.term(true)?;
                    match self.peek() {
                        Some(Tok::Dot) => self.pos += 1,
                        Some(Tok::RBrace) => {}
                        _ => return Err(self.err("\".\"")),
                    }
                    patterns.push(TriplePattern { subject, relation, object });
                }
                None => return Err(self.err("}")),
            }
        }
        let mut order = None;
        if self.is_keyword("ORDER") {
            self.pos += 1;
            self.keyword("BY")?;
            let (var, direction) = if matches!(self.peek(), Some(Tok::Var(_))) {
                (self.var()?, Direction::Asc)
            } else {
                let direction = match self.next() {
                    Some(Tok::Word(w)) if w == "ASC" => Direction::Asc,
                    Some(Tok::Word(w)) if w == "DESC" => Direction::Desc,
                    _ => {
                        self.pos -= 1;
                        return Err(self.err("ASC, DESC or a variable"));
                    }
                };
                self.expect(Tok::LParen, "(")?;
                let var = self.var()?;
                self.expect(Tok::RParen, ")")?;
                (var, direction)
            };
            let mut limit_one = false;
            if self.is_keyword("LIMIT") {
                self.pos += 1;
                match self.next() {
                    Some(Tok::Int(n)) if n == "1" => limit_one = true,
                    Some(Tok::Int(n)) => return Err(BridgeError::UnsupportedFeature(format!("LIMIT {n}"))),
                    _ => {
                        self.pos -= 1;
                        return Err(self.err("1"));
                    }
                }
            }
            order = Some(OrderClause { var, direction, limit_one });
        }
        if self.pos < self.toks.len() {
            return Err(self.err("end of query"));
        }
        if patterns.is_empty() {
            return Err(self.err("at least one triple pattern"));
        }
        let q = SparqlQuery { select_var, patterns, filters, order };
        let bound = q.vars_in_patterns();
        let mentioned = std::iter::once(&q.select_var)
            .chain(q.filters.iter().map(|f| &f.var))
            .chain(q.order.iter().map(|o| &o.var));
        for v in mentioned {
            if !bound.contains(v) {
                return Err(BridgeError::UnboundVariable(v.0.clone()));
            }
        }
        Ok(q)
    }
}

pub fn parse_sparql(text: &str) -> Result<SparqlQuery, BridgeError> {
    let toks = tokenize(text)?;
    if let Some(w) = toks.iter().find_map(|t| match &t.tok {
        Tok::Word(w) if UNSUPPORTED.contains(&w.as_str()) => Some(w.clone()),
        _ => None,
    }) {
        return Err(BridgeError::UnsupportedFeature(w));
    }
    let last_line = text.lines().count().max(1);
    let last_col = text.lines().last().map(|l| l.chars().count() + 1).unwrap_or(1);
    Parser { toks, pos: 0, end: (last_line, last_col) }.query()
}

// ---------------------------------------------------------- structure

/// The unique pattern chain from a named entity to the SELECT variable.
struct Chain {
    topic: EntityId,
    /// pattern index and hop variable for hops 1..=N
    hops: Vec<(usize, Var)>,
}

impl Chain {
    fn hop_of(&self, v: &Var) -> Option<usize> {
        self.hops.iter().position(|(_, hv)| hv == v).map(|i| i + 1)
    }

    fn pattern_indices(&self) -> BTreeSet<usize> {
        self.hops.iter().map(|(i, _)| *i).collect()
    }
}

fn find_chain(q: &SparqlQuery) -> Result<Chain, BridgeError> {
    fn walk(
        q: &SparqlQuery,
        target: &Var,
        visited: &mut Vec<Var>,
        trail: &mut Vec<usize>,
        found: &mut Vec<(EntityId, Vec<usize>)>,
    ) {
        for (i, p) in q.patterns.iter().enumerate() {
            if found.len() > 1 || p.object.var() != Some(target) {
                continue;
            }
            trail.push(i);
            match &p.subject {
                Term::Entity(e) => found.push((e.clone(), trail.clone())),
                Term::Var(u) if !visited.contains(u) && u != target => {
                    visited.push(u.clone());
                    walk(q, u, visited, trail, found);
                    visited.pop();
                }
                _ => {}
            }
            trail.pop();
        }
    }
    let mut found = Vec::new();
    walk(q, &q.select_var, &mut vec![q.select_var.clone()], &mut Vec::new(), &mut found);
    match found.len() {
        0 => Err(BridgeError::NoTopicEntity),
        1 => {
            let (topic, mut trail) = found.pop().unwrap();
            trail.reverse();
            let hops = trail
                .into_iter()
                .map(|i| (i, q.patterns[i].object.var().cloned().expect("chain objects are variables")))
                .collect();
            Ok(Chain { topic, hops })
        }
        _ => Err(BridgeError::AmbiguousMainPath),
    }
}

fn filter_value(op: ComparisonOp, value: &Literal) -> Option<ConstraintValue> {
    match value.kind() {
        LiteralKind::String if op == ComparisonOp::Eq => Some(ConstraintValue::Str(value.value().to_string())),
        LiteralKind::String => None,
        _ => NumericCondition::compare(op, value.clone()).ok().map(ConstraintValue::Numeric),
    }
}

fn literal_value(l: &Literal) -> ConstraintValue {
    filter_value(ComparisonOp::Eq, l).expect("EQ against any literal classifies")
}

fn order_value(o: &OrderClause) -> Option<ConstraintValue> {
    o.limit_one.then(|| {
        ConstraintValue::Numeric(match o.direction {
            Direction::Desc => NumericCondition::argmax(),
            Direction::Asc => NumericCondition::argmin(),
        })
    })
}

/// Converts an annotated query into a CRP: the unique chain from the topic
/// entity to the SELECT variable becomes the main path, and every other
/// pattern, FILTER and ORDER BY becomes a constraint on the hop it hangs off.
pub fn sparql_to_crp(q: &SparqlQuery) -> Result<Crp, BridgeError> {
    let chain = find_chain(q)?;
    let on_chain = chain.pattern_indices();
    let unclassifiable_pattern = |p: &TriplePattern| BridgeError::UnclassifiableBranch(p.to_string());

    let mut occurrences: BTreeMap<&Var, usize> = BTreeMap::new();
    for p in &q.patterns {
        for v in [p.subject.var(), p.object.var()].into_iter().flatten() {
            *occurrences.entry(v).or_default() += 1;
        }
    }

    let mut constraints = Vec::new();
    let mut branch_vars: BTreeMap<Var, (usize, RelationId)> = BTreeMap::new();
    for (i, p) in q.patterns.iter().enumerate() {
        if on_chain.contains(&i) {
            continue;
        }
        let hop = p.subject.var().and_then(|v| chain.hop_of(v)).ok_or_else(|| unclassifiable_pattern(p))?;
        let value = match &p.object {
            Term::Entity(e) => ConstraintValue::grounded(e.clone()),
            Term::Lit(l) => literal_value(l),
            Term::Var(c) => {
                if chain.hop_of(c).is_some() || occurrences[c] != 1 || branch_vars.contains_key(c) {
                    return Err(unclassifiable_pattern(p));
                }
                branch_vars.insert(c.clone(), (hop, p.relation.clone()));
                continue;
            }
        };
        constraints.push(Constraint::new(hop, p.relation.clone(), value));
    }

    let mut used: BTreeSet<&Var> = BTreeSet::new();
    for f in &q.filters {
        let (hop, rel) = branch_vars.get(&f.var).ok_or_else(|| BridgeError::UnclassifiableBranch(f.to_string()))?;
        let value = filter_value(f.op, &f.value).ok_or_else(|| BridgeError::UnclassifiableBranch(f.to_string()))?;
        if !used.insert(&f.var) {
            // a range on one value has no flat-constraint equivalent
            return Err(BridgeError::UnclassifiableBranch(f.to_string()));
        }
        constraints.push(Constraint::new(*hop, rel.clone(), value));
    }
    if let Some(o) = &q.order {
        let (hop, rel) = branch_vars.get(&o.var).ok_or_else(|| BridgeError::UnclassifiableBranch(o.to_string()))?;
        let value = order_value(o).ok_or_else(|| BridgeError::UnclassifiableBranch(o.to_string()))?;
        if !used.insert(&o.var) {
            return Err(BridgeError::UnclassifiableBranch(o.to_string()));
        }
        constraints.push(Constraint::new(*hop, rel.clone(), value));
    }
    if let Some((v, _)) = branch_vars.iter().find(|(v, _)| !used.contains(v)) {
        let p = q.patterns.iter().find(|p| p.object.var() == Some(v)).expect("branch var has a pattern");
        return Err(unclassifiable_pattern(p));
    }

    let relations = chain.hops.iter().map(|(i, _)| q.patterns[*i].relation.clone()).collect();
    let mut crp = Crp::new(chain.topic.to_string(), MainPath::new(relations)?, constraints)?;
    crp.topic_entity = Some(chain.topic);
    Ok(crp)
}

fn hop_var(i: usize) -> Var {
    Var(format!("h{i}"))
}

fn branch_var(k: usize) -> Var {
    Var(format!("c{k}"))
}

/// Compiles a grounded CRP into the SPARQL subset.
pub fn crp_to_sparql(crp: &Crp) -> Result<SparqlQuery, BridgeError> {
    crp.validate()?;
    let topic = crp.topic_entity.clone().ok_or(BridgeError::UngroundedTopic)?;
    let mut patterns = Vec::new();
    let mut prev = Term::Entity(topic);
    for (i, r) in crp.main_path.relations().iter().enumerate() {
        let h = Term::Var(hop_var(i + 1));
        patterns.push(TriplePattern { subject: prev, relation: r.clone(), object: h.clone() });
        prev = h;
    }
    let mut filters = Vec::new();
    let mut order = None;
    let mut k = 0;
    for c in crp.sorted_constraints() {
        let subject = Term::Var(hop_var(c.hop));
        let mut branch = || {
            k += 1;
            branch_var(k)
        };
        match &c.value {
            ConstraintValue::Entity { surface, entity } => {
                let target = entity.clone().ok_or_else(|| BridgeError::UnresolvedConstraintEntity(surface.clone()))?;
                patterns.push(TriplePattern { subject, relation: c.relation.clone(), object: Term::Entity(target) });
            }
            ConstraintValue::Str(s) => {
                let v = branch();
                patterns.push(TriplePattern { subject, relation: c.relation.clone(), object: Term::Var(v.clone()) });
                filters.push(FilterClause { var: v, op: ComparisonOp::Eq, value: Literal::string(s.clone()) });
            }
            ConstraintValue::Numeric(n) => {
                let v = branch();
                patterns.push(TriplePattern { subject, relation: c.relation.clone(), object: Term::Var(v.clone()) });
                match n.threshold() {
                    Some(t) => filters.push(FilterClause { var: v, op: n.op(), value: t.clone() }),
                    None => {
                        if order.is_some() {
                            return Err(BridgeError::MultipleOrderings);
                        }
                        let direction =
                            if n.op() == ComparisonOp::ArgMax { Direction::Desc } else { Direction::Asc };
                        order = Some(OrderClause { var: v, direction, limit_one: true });
                    }
                }
            }
        }
    }
    Ok(SparqlQuery { select_var: hop_var(crp.main_path.len()), patterns, filters, order })
}

// ------------------------------------------------------------ canonical form

/// Normal form used for rendering and round-trip comparison: hop variables
/// renamed `?h1..?hN` along the main chain, single-use branch variables
/// renamed `?c1..` in `(hop, relation, body)` order, literal-object patterns
/// on hop variables rewritten as a branch variable plus an `=` FILTER, and
/// clauses sorted. Anything outside that shape keeps its relative order and
/// is renamed `?v1..` by first appearance.
pub fn canonicalize_query(q: &SparqlQuery) -> SparqlQuery {
    let Ok(chain) = find_chain(q) else {
        return rename_by_appearance(q);
    };
    let on_chain = chain.pattern_indices();
    let mut renames: BTreeMap<Var, Var> = BTreeMap::new();
    for (i, (_, v)) in chain.hops.iter().enumerate() {
        renames.insert(v.clone(), hop_var(i + 1));
    }
    let mut occurrences: BTreeMap<&Var, usize> = BTreeMap::new();
    for p in &q.patterns {
        for v in [p.subject.var(), p.object.var()].into_iter().flatten() {
            *occurrences.entry(v).or_default() += 1;
        }
    }

    struct Branch {
        key: (usize, RelationId, String),
        pattern: TriplePattern,
        var: Option<Var>,
        filters: Vec<FilterClause>,
        order: Option<OrderClause>,
    }
    let mut branches: Vec<Branch> = Vec::new();
    let mut leftovers: Vec<TriplePattern> = Vec::new();
    let mut claimed_filters = BTreeSet::new();
    let mut order_claimed = false;

    for (i, p) in q.patterns.iter().enumerate() {
        if on_chain.contains(&i) {
            continue;
        }
        let Some(hop) = p.subject.var().and_then(|v| chain.hop_of(v)) else {
            leftovers.push(p.clone());
            continue;
        };
        match &p.object {
            Term::Entity(e) => branches.push(Branch {
                key: (hop, p.relation.clone(), ConstraintValue::grounded(e.clone()).render_body()),
                pattern: p.clone(),
                var: None,
                filters: vec![],
                order: None,
            }),
            Term::Lit(l) => {
                let tmp = Var(format!("__lit{i}"));
                branches.push(Branch {
                    key: (hop, p.relation.clone(), literal_value(l).render_body()),
                    pattern: TriplePattern { object: Term::Var(tmp.clone()), ..p.clone() },
                    var: Some(tmp.clone()),
                    filters: vec![FilterClause { var: tmp, op: ComparisonOp::Eq, value: l.clone() }],
                    order: None,
                })
            }
            Term::Var(c) if chain.hop_of(c).is_none() && occurrences[c] == 1 => {
                let mut bodies = Vec::new();
                let mut filters = Vec::new();
                for (fi, f) in q.filters.iter().enumerate() {
                    if &f.var == c {
                        claimed_filters.insert(fi);
                        bodies.push(filter_value(f.op, &f.value).map(|v| v.render_body()).unwrap_or_else(|| f.to_string()));
                        filters.push(f.clone());
                    }
                }
                let order = q.order.clone().filter(|o| &o.var == c);
                if let Some(o) = &order {
                    order_claimed = true;
                    bodies.push(order_value(o).map(|v| v.render_body()).unwrap_or_else(|| o.to_string()));
                }
                bodies.sort();
                branches.push(Branch {
                    key: (hop, p.relation.clone(), bodies.join(" & ")),
                    pattern: p.clone(),
                    var: Some(c.clone()),
                    filters,
                    order,
                });
            }
            Term::Var(_) => leftovers.push(p.clone()),
        }
    }
    branches.sort_by(|a, b| a.key.cmp(&b.key));

    let mut k = 0;
    for b in &branches {
        if let Some(v) = &b.var {
            k += 1;
            renames.insert(v.clone(), branch_var(k));
        }
    }
    let mut patterns: Vec<TriplePattern> = chain.hops.iter().map(|(i, _)| q.patterns[*i].clone()).collect();
    patterns.extend(branches.iter().map(|b| b.pattern.clone()));
    patterns.extend(leftovers);
    let mut filters: Vec<FilterClause> = branches.iter().flat_map(|b| b.filters.clone()).collect();
    filters.extend(q.filters.iter().enumerate().filter(|(i, _)| !claimed_filters.contains(i)).map(|(_, f)| f.clone()));
    let order = branches.iter().find_map(|b| b.order.clone()).or_else(|| (!order_claimed).then(|| q.order.clone()).flatten());

    let staged = SparqlQuery { select_var: q.select_var.clone(), patterns, filters, order };
    apply_renames(&staged, renames)
}

fn rename_by_appearance(q: &SparqlQuery) -> SparqlQuery {
    apply_renames(q, BTreeMap::new())
}

fn apply_renames(q: &SparqlQuery, mut renames: BTreeMap<Var, Var>) -> SparqlQuery {
    let mut next = 0;
    let mut name = |v: &Var, renames: &mut BTreeMap<Var, Var>| -> Var {
        renames
            .entry(v.clone())
            .or_insert_with(|| {
                next += 1;
                Var(format!("v{next}"))
            })
            .clone()
    };
    let mut term = |t: &Term, renames: &mut BTreeMap<Var, Var>| match t {
        Term::Var(v) => Term::Var(name(v, renames)),
        other => other.clone(),
    };
    let patterns: Vec<TriplePattern> = q
        .patterns
        .iter()
        .map(|p| TriplePattern {
            subject: term(&p.subject, &mut renames),
            relation: p.relation.clone(),
            object: term(&p.object, &mut renames),
        })
        .collect();
    let lookup = |v: &Var| renames.get(v).cloned().unwrap_or_else(|| v.clone());
    SparqlQuery {
        select_var: lookup(&q.select_var),
        patterns,
        filters: q.filters.iter().map(|f| FilterClause { var: lookup(&f.var), ..f.clone() }).collect(),
        order: q.order.as_ref().map(|o| OrderClause { var: lookup(&o.var), ..o.clone() }),
    }
}

/// Canonical text: one clause per line, two-space indent inside the braces.
pub fn render_sparql(q: &SparqlQuery) -> String {
    canonicalize_query(q).print()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundTripReport {
    pub ok: bool,
    pub source: Option<String>,
    pub crp: Option<String>,
    pub regenerated: Option<String>,
    pub error: Option<BridgeError>,
}

impl RoundTripReport {
    fn failed(error: BridgeError, source: Option<String>, crp: Option<String>) -> Self {
        RoundTripReport { ok: false, source, crp, regenerated: None, error: Some(error) }
    }
}

/// SPARQL -> CRP -> SPARQL, compared on canonical renderings.
pub fn round_trip_check(sparql_text: &str) -> RoundTripReport {
    let q = match parse_sparql(sparql_text) {
        Ok(q) => q,
        Err(e) => return RoundTripReport::failed(e, None, None),
    };
    let source = render_sparql(&q);
    let crp = match sparql_to_crp(&q) {
        Ok(c) => c,
        Err(e) => return RoundTripReport::failed(e, Some(source), None),
    };
    let crp_text = crp.to_string();
    match crp_to_sparql(&crp) {
        Ok(back) => {
            let regenerated = render_sparql(&back);
            RoundTripReport {
                ok: regenerated == source,
                source: Some(source),
                crp: Some(crp_text),
                regenerated: Some(regenerated),
                error: None,
            }
        }
        Err(e) => RoundTripReport::failed(e, Some(source), Some(crp_text)),
    }
}

/// CRP text -> SPARQL -> CRP, compared on canonical CRP text. Entity
/// surfaces are taken as symbols.
pub fn crp_round_trip_check(crp_text: &str) -> RoundTripReport {
    let mut crp = match crate::crp::parse_crp(crp_text) {
        Ok(c) => c,
        Err(e) => return RoundTripReport::failed(e.into(), None, None),
    };
    let source = crp.to_string();
    if let Err(e) = crp.ground_by_symbol() {
        return RoundTripReport::failed(BridgeError::UnresolvedConstraintEntity(e.to_string()), None, Some(source));
    }
    let rendered = match crp_to_sparql(&crp) {
        Ok(q) => render_sparql(&q),
        Err(e) => return RoundTripReport::failed(e, None, Some(source)),
    };
    let back = parse_sparql(&rendered).and_then(|q| sparql_to_crp(&q));
    match back {
        Ok(c) => {
            let regenerated = c.to_string();
            RoundTripReport {
                ok: regenerated == source,
                source: Some(rendered),
                crp: Some(source),
                regenerated: Some(regenerated),
                error: None,
            }
        }
        Err(e) => RoundTripReport::failed(e, Some(rendered), Some(source)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crp::parse_crp;

    const WORKED_SPARQL: &str = "SELECT DISTINCT ?x WHERE { :USA :country.presidents ?t . ?t :president.office_holder ?x . }";

    #[test]
    fn parses_two_pattern_query() {
        let q = parse_sparql(WORKED_SPARQL).unwrap();
        assert_eq!(q.select_var, Var("x".into()));
        assert_eq!(q.patterns.len(), 2);
        assert!(q.filters.is_empty());
        assert!(q.order.is_none());
    }

    #[test]
    fn parses_order_by() {
        let q = parse_sparql(
            "SELECT DISTINCT ?x WHERE { :USA :country.presidents ?t . ?t :president.office_holder ?x . ?x :position.from ?v . } ORDER BY DESC(?v) LIMIT 1",
        )
        .unwrap();
        assert_eq!(q.order, Some(OrderClause { var: Var("v".into()), direction: Direction::Desc, limit_one: true }));
    }

    #[test]
    fn rejects_unsupported() {
        let e = parse_sparql("SELECT DISTINCT ?x WHERE { { :A :r ?x . } UNION { :B :r ?x . } }").unwrap_err();
        assert_eq!(e, BridgeError::UnsupportedFeature("UNION".into()));
        assert!(matches!(parse_sparql("SELECT * WHERE { :A :r ?x . }"), Err(BridgeError::UnsupportedFeature(_))));
        assert!(matches!(
            parse_sparql("SELECT DISTINCT ?x WHERE { OPTIONAL { :A :r ?x . } }"),
            Err(BridgeError::UnsupportedFeature(_))
        ));
        assert!(matches!(parse_sparql("SELECT DISTINCT ?x WHERE { :A :r/:s ?x . }"), Err(BridgeError::UnsupportedFeature(_))));
        assert!(matches!(
            parse_sparql("SELECT DISTINCT ?x WHERE { :A :r ?x . } ORDER BY DESC(?x) LIMIT 5"),
            Err(BridgeError::UnsupportedFeature(_))
        ));
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(parse_sparql("SELECT DISTINCT ?x WHERE { :A :r ?x . "), Err(BridgeError::Parse { .. })));
        assert!(matches!(parse_sparql("SELECT DISTINCT ?x WHERE { :A :r ?y . }"), Err(BridgeError::UnboundVariable(_))));
        assert!(matches!(parse_sparql("SELECT DISTINCT ?x WHERE { }"), Err(BridgeError::Parse { .. })));
    }

    #[test]
    fn tolerates_prefix_and_glued_dots() {
        let q = parse_sparql("PREFIX : <http://rdf.freebase.com/ns/>\nSELECT DISTINCT ?x WHERE { :A :r ?x. ?x :s \"3\"^^xsd:integer. }")
            .unwrap();
        assert_eq!(q.patterns.len(), 2);
        assert_eq!(q.patterns[1].object, Term::Lit(Literal::numeric("3").unwrap()));
    }

    #[test]
    fn minimal_query_converts() {
        let q = parse_sparql("SELECT DISTINCT ?x WHERE { :X :r ?x . }").unwrap();
        let c = sparql_to_crp(&q).unwrap();
        assert_eq!(c.to_string(), "TOPIC: X\nPATH: r");
        assert!(round_trip_check("SELECT DISTINCT ?x WHERE { :X :r ?x . }").ok);
    }

    #[test]
    fn ambiguous_and_topicless() {
        let q = parse_sparql("SELECT DISTINCT ?x WHERE { :A :r ?x . :B :s ?x . }").unwrap();
        assert_eq!(sparql_to_crp(&q), Err(BridgeError::AmbiguousMainPath));
        let q = parse_sparql("SELECT DISTINCT ?x WHERE { ?y :r ?x . }").unwrap();
        assert_eq!(sparql_to_crp(&q), Err(BridgeError::NoTopicEntity));
    }

    #[test]
    fn unclassifiable_branches() {
        for text in [
            // bare existence branch
            "SELECT DISTINCT ?x WHERE { :A :r ?x . ?x :s ?c . }",
            // two-hop branch
            "SELECT DISTINCT ?x WHERE { :A :r ?x . ?x :s ?c . ?c :t :B . }",
            // ordering comparison against a string
            "SELECT DISTINCT ?x WHERE { :A :r ?x . ?x :s ?c . FILTER(?c > \"abc\") }",
            // filter on a hop variable
            "SELECT DISTINCT ?x WHERE { :A :r ?x . FILTER(?x > 3) }",
        ] {
            let text = text.replace("> 3", "> \"3\"^^xsd:integer");
            let report = round_trip_check(&text);
            assert!(!report.ok, "{text}");
            assert!(matches!(report.error, Some(BridgeError::UnclassifiableBranch(_))), "{text}: {report:?}");
        }
    }

    #[test]
    fn worked_example_both_directions() {
        let mut crp = parse_crp("TOPIC: USA\nPATH: country.presidents -> president.office_holder\nCONSTRAINT: hop=2; rel=education.institution; entity=Harvard\nCONSTRAINT: hop=2; rel=position.from; op=GE; value=\"2000\"").unwrap();
        crp.ground_by_symbol().unwrap();
        let q = crp_to_sparql(&crp).unwrap();
        assert_eq!(q.patterns.len(), 4);
        assert_eq!(q.filters.len(), 1);
        assert_eq!(
            render_sparql(&q),
            "SELECT DISTINCT ?h2 WHERE {\n  :USA :country.presidents ?h1 .\n  ?h1 :president.office_holder ?h2 .\n  ?h2 :education.institution :Harvard .\n  ?h2 :position.from ?c1 .\n  FILTER(?c1 >= \"2000\"^^xsd:dateTime)\n}"
        );
        let back = sparql_to_crp(&q).unwrap();
        assert_eq!(back.canonical(), crp.canonical());
    }

    #[test]
    fn bare_numbers_conjunctions_and_default_order() {
        let q = parse_sparql("SELECT ?x WHERE { :A :r ?x . ?x :n ?v . ?x :m ?w . FILTER(?v > -1.5e3 && ?w <= 42) }").unwrap();
        assert_eq!(q.filters.len(), 2);
        assert_eq!(q.filters[0].value, Literal::numeric("-1.5e3").unwrap());
        assert_eq!(q.filters[1].value, Literal::numeric("42").unwrap());
        let q = parse_sparql("SELECT ?x WHERE { :A :r ?x . ?x :n ?v . } ORDER BY ?v LIMIT 1").unwrap();
        assert_eq!(q.order.unwrap().direction, Direction::Asc);
        assert!(matches!(parse_sparql("SELECT ?x WHERE { :A :r ?x . ?x :n ?v . FILTER(?v > 1 || ?v < 0) }"), Err(BridgeError::UnsupportedFeature(_))));
    }

    #[test]
    fn range_on_one_branch_value_is_unclassifiable() {
        let q = parse_sparql("SELECT ?x WHERE { :A :r ?x . ?x :n ?v . FILTER(?v > 1 && ?v < 5) }").unwrap();
        assert!(matches!(sparql_to_crp(&q), Err(BridgeError::UnclassifiableBranch(_))));
        let q = parse_sparql("SELECT ?x WHERE { :A :r ?x . ?x :n ?v . FILTER(?v > 1) } ORDER BY DESC(?v) LIMIT 1").unwrap();
        assert!(matches!(sparql_to_crp(&q), Err(BridgeError::UnclassifiableBranch(_))));
    }

    #[test]
    fn literal_object_patterns_canonicalize_to_filters() {
        let direct = "SELECT DISTINCT ?x WHERE { :A :r ?x . ?x :name \"Yale Law\" . }";
        let report = round_trip_check(direct);
        assert!(report.ok, "{report:?}");
        assert_eq!(report.crp.as_deref(), Some("TOPIC: A\nPATH: r\nCONSTRAINT: hop=1; rel=name; string=\"Yale Law\""));
    }

    #[test]
    fn argmax_compiles_to_order_by() {
        let mut crp = parse_crp("TOPIC: USA\nPATH: country.presidents -> president.office_holder\nCONSTRAINT: hop=2; rel=position.from; op=ARGMAX").unwrap();
        crp.ground_by_symbol().unwrap();
        let q = crp_to_sparql(&crp).unwrap();
        assert_eq!(q.order, Some(OrderClause { var: Var("c1".into()), direction: Direction::Desc, limit_one: true }));
        assert!(render_sparql(&q).ends_with("}\nORDER BY DESC(?c1) LIMIT 1"));
        assert_eq!(sparql_to_crp(&q).unwrap().canonical(), crp.canonical());

        let mut two = parse_crp("TOPIC: A\nPATH: r\nCONSTRAINT: hop=1; rel=s; op=ARGMAX\nCONSTRAINT: hop=1; rel=t; op=ARGMIN").unwrap();
        two.ground_by_symbol().unwrap();
        assert_eq!(crp_to_sparql(&two), Err(BridgeError::MultipleOrderings));
    }

    #[test]
    fn ungrounded_inputs_are_rejected() {
        let crp = parse_crp("TOPIC: USA\nPATH: r").unwrap();
        assert_eq!(crp_to_sparql(&crp), Err(BridgeError::UngroundedTopic));
        let mut crp = parse_crp("TOPIC: USA\nPATH: r\nCONSTRAINT: hop=1; rel=s; entity=Not An Id").unwrap();
        crp.ground_by_symbol().unwrap();
        assert_eq!(crp_to_sparql(&crp), Err(BridgeError::UnresolvedConstraintEntity("Not An Id".into())));
    }

    #[test]
    fn crp_direction_round_trip() {
        let r = crp_round_trip_check("TOPIC: USA\nPATH: a -> b\nCONSTRAINT: hop=2; rel=n; string=\"x y\"\nCONSTRAINT: hop=1; rel=d; op=LT; value=\"2000\"^^xsd:integer\nCONSTRAINT: hop=2; rel=e; op=ARGMIN");
        assert!(r.ok, "{r:?}");
    }

    #[test]
    fn empty_filter_section_is_omitted() {
        let text = render_sparql(&parse_sparql("SELECT DISTINCT ?x WHERE { :X :r ?x . }").unwrap());
        assert_eq!(text, "SELECT DISTINCT ?h1 WHERE {\n  :X :r ?h1 .\n}");
        assert!(!text.contains("FILTER"));
    }
}
