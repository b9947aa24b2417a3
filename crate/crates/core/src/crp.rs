//! Constraint-aware reasoning paths.
//!
//! A CRP is a topic entity, a main path of relations followed hop by hop from
//! it, and a flat list of constraints that restrict the entities bound at a
//! given hop. The text form is line based:
//!
//! ```text
//! TOPIC: USA
//! PATH: country.presidents -> president.office_holder
//! CONSTRAINT: hop=2; rel=education.institution; entity=Harvard
//! CONSTRAINT: hop=2; rel=position.from; op=GE; value="2000"
//! ```
//!
//! Threshold values are typed by shape: `YYYY[-MM[-DD]]` reads as a date,
//! anything else must be a finite decimal. A numeric value that happens to
//! look like a year carries an explicit `^^xsd:integer` suffix so that the
//! type survives a round trip.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{is_date_text, quote, unquote_prefix, EntityId, KgError, KnowledgeGraph, Literal, LiteralKind, RelationId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CrpError {
    #[error("line {line}, column {column}: expected {expected}")]
    Parse { line: usize, column: usize, expected: String },
    #[error("constraint {constraint_index} refers to a hop outside the main path")]
    HopOutOfRange { constraint_index: usize },
    #[error("main path must contain at least one relation")]
    EmptyPath,
    #[error("{0}")]
    InvalidValue(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ComparisonOp {
    #[serde(rename = "EQ")]
    Eq,
    #[serde(rename = "GE")]
    Ge,
    #[serde(rename = "LE")]
    Le,
    #[serde(rename = "GT")]
    Gt,
    #[serde(rename = "LT")]
    Lt,
    #[serde(rename = "ARGMAX")]
    ArgMax,
    #[serde(rename = "ARGMIN")]
    ArgMin,
}

impl ComparisonOp {
    pub const ALL: [ComparisonOp; 7] = [
        ComparisonOp::Eq,
        ComparisonOp::Ge,
        ComparisonOp::Le,
        ComparisonOp::Gt,
        ComparisonOp::Lt,
        ComparisonOp::ArgMax,
        ComparisonOp::ArgMin,
    ];

    pub fn is_extremum(self) -> bool {
        matches!(self, ComparisonOp::ArgMax | ComparisonOp::ArgMin)
    }

    pub fn keyword(self) -> &'static str {
        match self {
            ComparisonOp::Eq => "EQ",
            ComparisonOp::Ge => "GE",
            ComparisonOp::Le => "LE",
            ComparisonOp::Gt => "GT",
            ComparisonOp::Lt => "LT",
            ComparisonOp::ArgMax => "ARGMAX",
            ComparisonOp::ArgMin => "ARGMIN",
        }
    }

    /// Evaluates a binary comparison given `value.cmp(threshold)`.
    pub fn holds(self, ord: std::cmp::Ordering) -> bool {
        use std::cmp::Ordering::*;
        match self {
            ComparisonOp::Eq => ord == Equal,
            ComparisonOp::Ge => ord != Less,
            ComparisonOp::Le => ord != Greater,
            ComparisonOp::Gt => ord == Greater,
            ComparisonOp::Lt => ord == Less,
            ComparisonOp::ArgMax | ComparisonOp::ArgMin => false,
        }
    }
}

impl FromStr for ComparisonOp {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        ComparisonOp::ALL.into_iter().find(|op| op.keyword() == s).ok_or(())
    }
}

/// A numeric restriction: a binary comparison against a threshold, or an
/// argmax/argmin selection. Thresholds are Numeric or DateTime literals.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NumericCondition {
    op: ComparisonOp,
    threshold: Option<Literal>,
}

impl NumericCondition {
    pub fn compare(op: ComparisonOp, threshold: Literal) -> Result<Self, CrpError> {
        if op.is_extremum() {
            return Err(CrpError::InvalidValue(format!("{} takes no threshold", op.keyword())));
        }
        if !threshold.is_orderable() {
            return Err(CrpError::InvalidValue("numeric threshold must be a number or a date".into()));
        }
        Ok(NumericCondition { op, threshold: Some(threshold) })
    }

    pub fn argmax() -> Self {
        NumericCondition { op: ComparisonOp::ArgMax, threshold: None }
    }

    pub fn argmin() -> Self {
        NumericCondition { op: ComparisonOp::ArgMin, threshold: None }
    }

    pub fn op(&self) -> ComparisonOp {
        self.op
    }

    pub fn threshold(&self) -> Option<&Literal> {
        self.threshold.as_ref()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConstraintValue {
    /// A named entity; `entity` is filled in once the surface is grounded.
    Entity { surface: String, entity: Option<EntityId> },
    Numeric(NumericCondition),
    Str(String),
}

impl ConstraintValue {
    pub fn entity(surface: impl Into<String>) -> Self {
        ConstraintValue::Entity { surface: surface.into(), entity: None }
    }

    pub fn grounded(entity: EntityId) -> Self {
        ConstraintValue::Entity { surface: entity.to_string(), entity: Some(entity) }
    }

    pub fn kind(&self) -> ConstraintKind {
        match self {
            ConstraintValue::Entity { .. } => ConstraintKind::Entity,
            ConstraintValue::Numeric(_) => ConstraintKind::Numeric,
            ConstraintValue::Str(_) => ConstraintKind::Str,
        }
    }

    /// The body as it appears after `rel=...; ` in the text form.
    pub fn render_body(&self) -> String {
        match self {
            ConstraintValue::Entity { surface, .. } => format!("entity={surface}"),
            ConstraintValue::Str(s) => format!("string={}", quote(s)),
            ConstraintValue::Numeric(n) => match &n.threshold {
                None => format!("op={}", n.op.keyword()),
                Some(t) => format!("op={}; value={}", n.op.keyword(), render_threshold(t)),
            },
        }
    }
}

/// Relaxation tiers drop constraints by kind: strings first, then numerics,
/// then entities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintKind {
    Entity,
    Numeric,
    Str,
}

fn render_threshold(t: &Literal) -> String {
    let q = quote(t.value());
    match t.kind() {
        LiteralKind::Numeric if is_date_text(t.value()) => format!("{q}^^xsd:integer"),
        _ => q,
    }
}

fn infer_threshold(text: &str, suffix: &str) -> Result<Literal, String> {
    match suffix {
        "" if is_date_text(text) => Literal::datetime(text).map_err(|e| e.to_string()),
        "" => Literal::numeric(text).map_err(|e| e.to_string()),
        "^^xsd:dateTime" | "^^xsd:date" => Literal::datetime(text).map_err(|e| e.to_string()),
        "^^xsd:integer" | "^^xsd:float" | "^^xsd:decimal" | "^^xsd:double" => {
            Literal::numeric(text).map_err(|e| e.to_string())
        }
        other => Err(format!("unknown datatype {other}")),
    }
}

/// `(i, r, o)`: the entity bound at hop `i` must satisfy relation `r` with
/// value or condition `o`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Constraint {
    pub hop: usize,
    pub relation: RelationId,
    pub value: ConstraintValue,
}

impl Constraint {
    pub fn new(hop: usize, relation: RelationId, value: ConstraintValue) -> Self {
        Constraint { hop, relation, value }
    }

    pub fn kind(&self) -> ConstraintKind {
        self.value.kind()
    }

    fn sort_key(&self) -> (usize, &str, String) {
        (self.hop, self.relation.as_str(), self.value.render_body())
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CONSTRAINT: hop={}; rel={}; {}", self.hop, self.relation, self.value.render_body())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MainPath(Vec<RelationId>);

impl MainPath {
    pub fn new(relations: Vec<RelationId>) -> Result<Self, CrpError> {
        if relations.is_empty() {
            Err(CrpError::EmptyPath)
        } else {
            Ok(MainPath(relations))
        }
    }

    pub fn relations(&self) -> &[RelationId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl fmt::Display for MainPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, r) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" -> ")?;
            }
            f.write_str(r.as_str())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Crp {
    pub topic_surface: String,
    pub topic_entity: Option<EntityId>,
    pub main_path: MainPath,
    pub constraints: Vec<Constraint>,
}

impl Crp {
    /// Builds a CRP and checks every constraint hop lies in `1..=N`.
    pub fn new(
        topic_surface: impl Into<String>,
        main_path: MainPath,
        constraints: Vec<Constraint>,
    ) -> Result<Self, CrpError> {
        let crp = Crp { topic_surface: topic_surface.into(), topic_entity: None, main_path, constraints };
        crp.validate()?;
        Ok(crp)
    }

    pub fn validate(&self) -> Result<(), CrpError> {
        let n = self.main_path.len();
        if let Some(i) = self.constraints.iter().position(|c| c.hop == 0 || c.hop > n) {
            return Err(CrpError::HopOutOfRange { constraint_index: i });
        }
        Ok(())
    }

    /// The hop count of the main path, used as the repair depth budget.
    pub fn predicted_depth(&self) -> usize {
        self.main_path.len()
    }

    /// Canonical form: constraints sorted by `(hop, relation, body)` with
    /// duplicates removed, groundings cleared (they are not part of the text
    /// form).
    pub fn canonical(&self) -> Crp {
        let mut constraints: Vec<Constraint> = self
            .constraints
            .iter()
            .map(|c| {
                let value = match &c.value {
                    ConstraintValue::Entity { surface, .. } => ConstraintValue::entity(surface.trim()),
                    v => v.clone(),
                };
                Constraint::new(c.hop, c.relation.clone(), value)
            })
            .collect();
        constraints.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        constraints.dedup();
        Crp {
            topic_surface: self.topic_surface.trim().to_string(),
            topic_entity: None,
            main_path: self.main_path.clone(),
            constraints,
        }
    }

    /// Constraints in canonical order with duplicates removed, groundings kept.
    pub fn sorted_constraints(&self) -> Vec<Constraint> {
        let mut out = self.constraints.clone();
        out.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        out.dedup();
        out
    }

    /// Grounds the topic and every entity constraint against the alias table.
    /// Fails only when the topic cannot be grounded; unresolvable constraint
    /// entities are left ungrounded.
    pub fn ground(&mut self, g: &KnowledgeGraph) -> Result<(), KgError> {
        self.topic_entity = Some(g.ground_entity(&self.topic_surface)?);
        for c in &mut self.constraints {
            if let ConstraintValue::Entity { surface, entity } = &mut c.value {
                *entity = g.ground_entity(surface).ok();
            }
        }
        Ok(())
    }

    /// Grounds by taking surfaces as entity symbols verbatim.
    pub fn ground_by_symbol(&mut self) -> Result<(), KgError> {
        self.topic_entity = Some(EntityId::new(self.topic_surface.trim())?);
        for c in &mut self.constraints {
            if let ConstraintValue::Entity { surface, entity } = &mut c.value {
                *entity = EntityId::new(surface.trim()).ok();
            }
        }
        Ok(())
    }

    pub fn with_main_path(&self, main_path: MainPath) -> Crp {
        Crp { main_path, ..self.clone() }
    }
}

impl fmt::Display for Crp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_crp(self))
    }
}

impl FromStr for Crp {
    type Err = CrpError;

    fn from_str(s: &str) -> Result<Self, CrpError> {
        parse_crp(s)
    }
}

/// Canonical text: fixed field order, single spaces, constraints sorted.
/// No trailing newline.
pub fn serialize_crp(crp: &Crp) -> String {
    let c = crp.canonical();
    let mut out = format!("TOPIC: {}\nPATH: {}", c.topic_surface, c.main_path);
    for k in &c.constraints {
        out.push('\n');
        out.push_str(&k.to_string());
    }
    out
}

struct Cursor<'a> {
    line: usize,
    text: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, expected: impl Into<String>) -> CrpError {
        CrpError::Parse { line: self.line, column: self.text[..self.pos].chars().count() + 1, expected: expected.into() }
    }

    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    fn eat(&mut self, lit: &str) -> Result<(), CrpError> {
        if self.rest().starts_with(lit) {
            self.pos += lit.len();
            Ok(())
        } else {
            Err(self.err(format!("{lit:?}")))
        }
    }

    fn try_eat(&mut self, lit: &str) -> bool {
        self.eat(lit).is_ok()
    }

    fn until(&mut self, stop: &str) -> &'a str {
        let rest = self.rest();
        let end = rest.find(stop).unwrap_or(rest.len());
        self.pos += end;
        &rest[..end]
    }

    fn relation(&mut self, stop: &str) -> Result<RelationId, CrpError> {
        let start = self.pos;
        let raw = self.until(stop);
        RelationId::new(raw).map_err(|_| {
            self.pos = start;
            self.err("a relation symbol")
        })
    }

    fn quoted(&mut self) -> Result<String, CrpError> {
        let rest = self.rest();
        let (value, after) = unquote_prefix(rest).ok_or_else(|| self.err("a double-quoted string"))?;
        self.pos += rest.len() - after.len();
        Ok(value)
    }

    fn end(&self) -> Result<(), CrpError> {
        if self.rest().trim_end().is_empty() {
            Ok(())
        } else {
            Err(self.err("end of line"))
        }
    }
}

/// Parses the line-based CRP grammar. Surrounding blank lines and trailing
/// whitespace are tolerated.
pub fn parse_crp(text: &str) -> Result<Crp, CrpError> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();
    let mut it = lines.into_iter();

    let (line, text) = it.next().ok_or(CrpError::Parse { line: 1, column: 1, expected: "\"TOPIC: \"".into() })?;
    let mut cur = Cursor { line, text, pos: 0 };
    cur.eat("TOPIC: ")?;
    let topic = cur.rest().trim();
    if topic.is_empty() {
        return Err(cur.err("a topic surface"));
    }
    let topic = topic.to_string();

    let last_line = line;
    let (line, text) = it.next().ok_or(CrpError::Parse { line: last_line + 1, column: 1, expected: "\"PATH: \"".into() })?;
    let mut cur = Cursor { line, text: text.trim_end(), pos: 0 };
    cur.eat("PATH: ")?;
    let mut relations = vec![cur.relation(" -> ")?];
    while cur.try_eat(" -> ") {
        relations.push(cur.relation(" -> ")?);
    }
    cur.end()?;
    let main_path = MainPath::new(relations)?;

    let mut constraints = Vec::new();
    for (line, text) in it {
        let mut cur = Cursor { line, text: text.trim_end(), pos: 0 };
        cur.eat("CONSTRAINT: hop=")?;
        let digits = cur.until(";");
        let hop: usize = digits.parse().map_err(|_| {
            cur.pos -= digits.len();
            cur.err("a hop number")
        })?;
        cur.eat("; rel=")?;
        let relation = cur.relation(";")?;
        cur.eat("; ")?;
        let value = if cur.try_eat("entity=") {
            let surface = cur.rest().trim();
            if surface.is_empty() {
                return Err(cur.err("an entity surface"));
            }
            cur.pos = cur.text.len();
            ConstraintValue::entity(surface)
        } else if cur.try_eat("string=") {
            let s = cur.quoted()?;
            if s.trim().is_empty() {
                return Err(cur.err("a nonempty string"));
            }
            ConstraintValue::Str(s)
        } else if cur.try_eat("op=") {
            let kw = cur.until(";");
            let op: ComparisonOp = kw.trim_end().parse().map_err(|_| {
                cur.pos -= kw.len();
                cur.err("one of EQ, GE, LE, GT, LT, ARGMAX, ARGMIN")
            })?;
            if op.is_extremum() {
                ConstraintValue::Numeric(if op == ComparisonOp::ArgMax {
                    NumericCondition::argmax()
                } else {
                    NumericCondition::argmin()
                })
            } else {
                cur.eat("; value=")?;
                let at = cur.pos;
                let v = cur.quoted()?;
                let suffix = cur.rest().trim_end();
                let lit = infer_threshold(&v, suffix).map_err(|m| {
                    cur.pos = at;
                    cur.err(format!("a number or date ({m})"))
                })?;
                cur.pos = cur.text.len();
                ConstraintValue::Numeric(NumericCondition::compare(op, lit)?)
            }
        } else {
            return Err(cur.err("\"entity=\", \"op=\" or \"string=\""));
        };
        cur.end()?;
        constraints.push(Constraint::new(hop, relation, value));
    }
    Crp::new(topic, main_path, constraints)
}
