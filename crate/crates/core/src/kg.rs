//! In-memory knowledge graph.
//!
//! The graph is a set of `(subject, relation, object)` triples where the
//! object is either an entity or a typed literal. Two indexes are kept next
//! to the triple set: `adj` (subject -> relation -> objects) and `out_rel`
//! (subject -> outgoing relations). Both are derived from the triples once at
//! build time and never mutated afterwards, so a built [`KnowledgeGraph`] can
//! be shared freely between threads.
//!
//! All collections are ordered (`BTreeMap`/`BTreeSet`) so that iteration, and
//! therefore every downstream tie-break, is deterministic.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KgError {
    #[error("line {0}: expected 3 tab-separated fields")]
    MalformedLine(usize),
    #[error("line {0}: unparsable typed literal")]
    BadLiteral(usize),
    #[error("line {line}: invalid symbol {symbol:?}")]
    BadSymbol { line: usize, symbol: String },
    #[error("line {0}: alias points at an entity that does not occur in any triple")]
    DanglingAlias(usize),
    #[error("unknown entity {0:?}")]
    UnknownEntity(String),
    #[error("invalid symbol {0:?}")]
    InvalidSymbol(String),
    #[error("invalid literal: {0}")]
    InvalidLiteral(String),
    #[error("i/o error reading {path}: {message}")]
    Io { path: String, message: String },
}

fn valid_symbol(s: &str) -> bool {
    !s.is_empty()
        && !s.ends_with('.')
        && !s.starts_with(['?', ':', '@', '#', '"'])
        && !s
            .chars()
            .any(|c| c.is_whitespace() || c.is_control() || matches!(c, '"' | ';' | '{' | '}' | '(' | ')' | '<' | '>'))
}

macro_rules! symbol_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(Arc<str>);

        impl $name {
            /// Symbols are nonempty and contain no whitespace, quotes, `;`,
            /// brackets or braces, and do not end with `.`.
            pub fn new(symbol: impl AsRef<str>) -> Result<Self, KgError> {
                let symbol = symbol.as_ref();
                if valid_symbol(symbol) {
                    Ok(Self(Arc::from(symbol)))
                } else {
                    Err(KgError::InvalidSymbol(symbol.to_string()))
                }
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.0)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                $name::new(&s).map_err(serde::de::Error::custom)
            }
        }
    };
}

symbol_type!(
    /// Identifier of an entity node.
    EntityId
);
symbol_type!(
    /// Identifier of a relation, e.g. `country.presidents`.
    RelationId
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LiteralKind {
    String,
    Numeric,
    DateTime,
}

/// A typed literal value.
///
/// Numeric values keep their source text but are guaranteed to parse as a
/// finite decimal. DateTime values are normalized to `YYYY[-MM[-DD]]`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Literal {
    kind: LiteralKind,
    value: String,
    lang: Option<String>,
}

/// Returns true when `s` has the shape `YYYY`, `YYYY-MM` or `YYYY-MM-DD`.
pub fn is_date_text(s: &str) -> bool {
    normalize_date(s).is_some_and(|n| n == s)
}

fn normalize_date(s: &str) -> Option<String> {
    let date = s.split('T').next().unwrap_or(s);
    let parts: Vec<&str> = date.split('-').collect();
    let digits = |p: &str, n: usize| p.len() == n && p.bytes().all(|b| b.is_ascii_digit());
    match parts.as_slice() {
        [y] if digits(y, 4) => {}
        [y, m] if digits(y, 4) && digits(m, 2) => {
            let m: u32 = m.parse().ok()?;
            if !(1..=12).contains(&m) {
                return None;
            }
        }
        [y, m, d] if digits(y, 4) && digits(m, 2) && digits(d, 2) => {
            let m: u32 = m.parse().ok()?;
            let d: u32 = d.parse().ok()?;
            if !(1..=12).contains(&m) || !(1..=31).contains(&d) {
                return None;
            }
        }
        _ => return None,
    }
    // a time-of-day suffix is accepted and dropped
    if s.len() > date.len() && s.as_bytes()[date.len()] != b'T' {
        return None;
    }
    Some(date.to_string())
}

impl Literal {
    pub fn string(text: impl Into<String>) -> Self {
        Literal { kind: LiteralKind::String, value: text.into(), lang: None }
    }

    pub fn string_with_lang(text: impl Into<String>, lang: impl Into<String>) -> Self {
        Literal { kind: LiteralKind::String, value: text.into(), lang: Some(lang.into()) }
    }

    pub fn numeric(text: impl AsRef<str>) -> Result<Self, KgError> {
        let text = text.as_ref().trim();
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => {
                Ok(Literal { kind: LiteralKind::Numeric, value: text.to_string(), lang: None })
            }
            _ => Err(KgError::InvalidLiteral(format!("{text:?} is not a finite decimal"))),
        }
    }

    pub fn datetime(text: impl AsRef<str>) -> Result<Self, KgError> {
        let text = text.as_ref().trim();
        normalize_date(text)
            .map(|value| Literal { kind: LiteralKind::DateTime, value, lang: None })
            .ok_or_else(|| KgError::InvalidLiteral(format!("{text:?} is not an ISO-8601 date")))
    }

    pub fn kind(&self) -> LiteralKind {
        self.kind
    }

    pub fn value(&self) -> &str {
        &self.value
    }

    pub fn lang(&self) -> Option<&str> {
        self.lang.as_deref()
    }

    pub fn is_orderable(&self) -> bool {
        matches!(self.kind, LiteralKind::Numeric | LiteralKind::DateTime)
    }

    fn as_f64(&self) -> f64 {
        // guaranteed by the constructor
        self.value.parse().unwrap_or(f64::NAN)
    }

    /// Orders two literals of the same orderable kind. Numeric values compare
    /// as decimals, DateTime values lexicographically on their normalized
    /// text. Anything else is not comparable.
    pub fn compare(&self, other: &Literal) -> Option<std::cmp::Ordering> {
        match (self.kind, other.kind) {
            (LiteralKind::Numeric, LiteralKind::Numeric) => self.as_f64().partial_cmp(&other.as_f64()),
            (LiteralKind::DateTime, LiteralKind::DateTime) => Some(self.value.cmp(&other.value)),
            _ => None,
        }
    }

    /// Quoted rendering used by the TSV and SPARQL formats.
    pub fn to_quoted(&self) -> String {
        let q = quote(&self.value);
        match (self.kind, &self.lang) {
            (LiteralKind::String, Some(lang)) => format!("{q}@{lang}"),
            (LiteralKind::String, None) => q,
            (LiteralKind::DateTime, _) => format!("{q}^^xsd:dateTime"),
            (LiteralKind::Numeric, _) => {
                if self.value.contains(['.', 'e', 'E']) {
                    format!("{q}^^xsd:float")
                } else {
                    format!("{q}^^xsd:integer")
                }
            }
        }
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.value)
    }
}

/// Wraps `s` in double quotes, escaping `"` and `\`.
pub fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        if matches!(c, '"' | '\\') {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

/// Reads a quoted string at the start of `s`. Returns the unescaped content
/// and the remainder after the closing quote.
pub fn unquote_prefix(s: &str) -> Option<(String, &str)> {
    let rest = s.strip_prefix('"')?;
    let mut out = String::new();
    let mut chars = rest.char_indices();
    while let Some((i, c)) = chars.next() {
        match c {
            '\\' => out.push(chars.next()?.1),
            '"' => return Some((out, &rest[i + 1..])),
            c => out.push(c),
        }
    }
    None
}

/// Parses `"v"`, `"v"@lang` or `"v"^^xsd:type`. The whole input must be consumed.
pub fn parse_quoted_literal(s: &str) -> Result<Literal, KgError> {
    let (value, rest) = unquote_prefix(s).ok_or_else(|| KgError::InvalidLiteral(s.to_string()))?;
    if rest.is_empty() {
        return Ok(Literal::string(value));
    }
    if let Some(lang) = rest.strip_prefix('@') {
        if !lang.is_empty() && lang.chars().all(|c| c.is_ascii_alphanumeric() || c == '-') {
            return Ok(Literal::string_with_lang(value, lang));
        }
    }
    match rest {
        "^^xsd:dateTime" | "^^xsd:date" => Literal::datetime(&value),
        "^^xsd:float" | "^^xsd:integer" | "^^xsd:decimal" | "^^xsd:double" => Literal::numeric(&value),
        _ => Err(KgError::InvalidLiteral(s.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeRef {
    Entity(EntityId),
    Lit(Literal),
}

impl NodeRef {
    pub fn as_entity(&self) -> Option<&EntityId> {
        match self {
            NodeRef::Entity(e) => Some(e),
            NodeRef::Lit(_) => None,
        }
    }

    pub fn as_literal(&self) -> Option<&Literal> {
        match self {
            NodeRef::Lit(l) => Some(l),
            NodeRef::Entity(_) => None,
        }
    }
}

impl fmt::Display for NodeRef {
    /// Entities render as their symbol, literals as their bare value.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeRef::Entity(e) => e.fmt(f),
            NodeRef::Lit(l) => l.fmt(f),
        }
    }
}

impl Serialize for NodeRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: NodeRef,
}

impl Triple {
    pub fn new(subject: EntityId, relation: RelationId, object: NodeRef) -> Self {
        Triple { subject, relation, object }
    }
}

type Adjacency = BTreeMap<EntityId, BTreeMap<RelationId, BTreeSet<NodeRef>>>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeGraph {
    triples: BTreeSet<Triple>,
    adj: Adjacency,
    out_rel: BTreeMap<EntityId, BTreeSet<RelationId>>,
    aliases: BTreeMap<String, BTreeSet<EntityId>>,
    entities: BTreeSet<EntityId>,
    relations: BTreeSet<RelationId>,
}

fn fold(surface: &str) -> String {
    surface.trim().to_lowercase()
}

/// Accumulates triples and aliases, then builds the indexed graph.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    triples: BTreeSet<Triple>,
    aliases: Vec<(String, EntityId)>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn triple(&mut self, triple: Triple) -> &mut Self {
        self.triples.insert(triple);
        self
    }

    pub fn alias(&mut self, surface: impl Into<String>, entity: EntityId) -> &mut Self {
        self.aliases.push((surface.into(), entity));
        self
    }

    pub fn build(self) -> KnowledgeGraph {
        let (adj, out_rel) = index(&self.triples);
        let mut entities = BTreeSet::new();
        let mut relations = BTreeSet::new();
        for t in &self.triples {
            entities.insert(t.subject.clone());
            if let NodeRef::Entity(o) = &t.object {
                entities.insert(o.clone());
            }
            relations.insert(t.relation.clone());
        }
        let mut aliases: BTreeMap<String, BTreeSet<EntityId>> = BTreeMap::new();
        for e in &entities {
            aliases.entry(fold(e.as_str())).or_default().insert(e.clone());
        }
        for (surface, e) in self.aliases {
            entities.insert(e.clone());
            aliases.entry(fold(&surface)).or_default().insert(e);
        }
        KnowledgeGraph { triples: self.triples, adj, out_rel, aliases, entities, relations }
    }
}

fn index(triples: &BTreeSet<Triple>) -> (Adjacency, BTreeMap<EntityId, BTreeSet<RelationId>>) {
    let mut adj: Adjacency = BTreeMap::new();
    let mut out_rel: BTreeMap<EntityId, BTreeSet<RelationId>> = BTreeMap::new();
    for t in triples {
        adj.entry(t.subject.clone())
            .or_default()
            .entry(t.relation.clone())
            .or_default()
            .insert(t.object.clone());
        out_rel.entry(t.subject.clone()).or_default().insert(t.relation.clone());
    }
    (adj, out_rel)
}

fn parse_object(field: &str, line: usize) -> Result<NodeRef, KgError> {
    if field.starts_with('"') {
        parse_quoted_literal(field).map(NodeRef::Lit).map_err(|_| KgError::BadLiteral(line))
    } else {
        EntityId::new(field)
            .map(NodeRef::Entity)
            .map_err(|_| KgError::BadSymbol { line, symbol: field.to_string() })
    }
}

impl KnowledgeGraph {
    pub fn from_triples(triples: impl IntoIterator<Item = Triple>) -> Self {
        let mut b = GraphBuilder::new();
        for t in triples {
            b.triple(t);
        }
        b.build()
    }

    /// Parses the TSV graph format. Blank lines and lines starting with `#`
    /// are skipped; `@alias<TAB>surface<TAB>entity` lines register aliases.
    pub fn parse_tsv(text: &str) -> Result<Self, KgError> {
        let mut b = GraphBuilder::new();
        let mut alias_lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 || fields.iter().any(|f| f.trim().is_empty()) {
                return Err(KgError::MalformedLine(line_no));
            }
            let (s, r, o) = (fields[0].trim(), fields[1].trim(), fields[2].trim());
            if s == "@alias" {
                let e = EntityId::new(o).map_err(|_| KgError::BadSymbol { line: line_no, symbol: o.to_string() })?;
                alias_lines.push((line_no, r.to_string(), e));
                continue;
            }
            let subject =
                EntityId::new(s).map_err(|_| KgError::BadSymbol { line: line_no, symbol: s.to_string() })?;
            let relation =
                RelationId::new(r).map_err(|_| KgError::BadSymbol { line: line_no, symbol: r.to_string() })?;
            b.triple(Triple::new(subject, relation, parse_object(o, line_no)?));
        }
        let known: HashSet<EntityId> = b
            .triples
            .iter()
            .flat_map(|t| std::iter::once(t.subject.clone()).chain(t.object.as_entity().cloned()))
            .collect();
        for (line_no, surface, e) in alias_lines {
            if !known.contains(&e) {
                return Err(KgError::DanglingAlias(line_no));
            }
            b.alias(surface, e);
        }
        Ok(b.build())
    }

    pub fn load_tsv(path: impl AsRef<Path>) -> Result<Self, KgError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| KgError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::parse_tsv(&text)
    }

    pub fn triples(&self) -> &BTreeSet<Triple> {
        &self.triples
    }

    pub fn entities(&self) -> &BTreeSet<EntityId> {
        &self.entities
    }

    pub fn relations(&self) -> &BTreeSet<RelationId> {
        &self.relations
    }

    pub fn alias_count(&self) -> usize {
        self.aliases.len()
    }

    pub fn contains_entity(&self, e: &EntityId) -> bool {
        self.entities.contains(e)
    }

    /// `{o | (e, r, o) ∈ G}`.
    pub fn neighbors(&self, e: &EntityId, r: &RelationId) -> BTreeSet<NodeRef> {
        self.objects(e, r).cloned().collect()
    }

    /// Borrowing variant of [`neighbors`](Self::neighbors).
    pub fn objects<'a>(&'a self, e: &EntityId, r: &RelationId) -> impl Iterator<Item = &'a NodeRef> + 'a {
        self.adj.get(e).and_then(|m| m.get(r)).into_iter().flatten()
    }

    pub fn has_triple(&self, e: &EntityId, r: &RelationId, o: &NodeRef) -> bool {
        self.adj.get(e).and_then(|m| m.get(r)).is_some_and(|s| s.contains(o))
    }

    /// Follows `path` hop by hop from `start`. Literals reached at an
    /// intermediate hop do not expand further. The empty path yields `{start}`.
    pub fn reach(&self, start: &EntityId, path: &[RelationId]) -> BTreeSet<NodeRef> {
        let mut frontier = BTreeSet::from([NodeRef::Entity(start.clone())]);
        for r in path {
            frontier = self.step(&frontier, r);
            if frontier.is_empty() {
                break;
            }
        }
        frontier
    }

    /// One hop: objects of `r` from every entity in `frontier`.
    pub fn step(&self, frontier: &BTreeSet<NodeRef>, r: &RelationId) -> BTreeSet<NodeRef> {
        frontier
            .iter()
            .filter_map(NodeRef::as_entity)
            .flat_map(|e| self.objects(e, r))
            .cloned()
            .collect()
    }

    pub fn outgoing_relations<'a, I>(&self, frontier: I) -> BTreeSet<RelationId>
    where
        I: IntoIterator<Item = &'a EntityId>,
    {
        frontier
            .into_iter()
            .filter_map(|e| self.out_rel.get(e))
            .flatten()
            .cloned()
            .collect()
    }

    /// Case-folded exact alias lookup; the smallest entity wins on ties.
    pub fn ground_entity(&self, surface: &str) -> Result<EntityId, KgError> {
        self.aliases
            .get(&fold(surface))
            .and_then(|s| s.first())
            .cloned()
            .ok_or_else(|| KgError::UnknownEntity(surface.to_string()))
    }

    /// Checks that the stored indexes equal a fresh projection of the triples.
    pub fn indexes_consistent(&self) -> bool {
        let (adj, out_rel) = index(&self.triples);
        adj == self.adj && out_rel == self.out_rel
    }
}
