//! Deterministic CRP execution: skeleton reachability, constrained execution
//! with hop bindings, tiered relaxation, and an interpreter for the SPARQL
//! subset AST.
//!
//! Entity, comparison and string constraints are filters on the hop they
//! name. ARGMAX/ARGMIN is a selection over complete answers: among hop
//! candidates that still reach the end of the path under every other
//! constraint, keep those attaining the extremum. This is what
//! `ORDER BY .. LIMIT 1` means over the compiled query, except that ties are
//! all kept.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::crp::{ComparisonOp, Constraint, ConstraintKind, ConstraintValue, Crp, CrpError, MainPath};
use crate::kg::{EntityId, KnowledgeGraph, Literal, LiteralKind, NodeRef, RelationId};
use crate::sparql::{Direction, SparqlQuery, Term, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecError {
    #[error("CRP topic {0:?} is not grounded")]
    UngroundedTopic(String),
    #[error(transparent)]
    InvalidCrp(#[from] CrpError),
}

/// A comparison that could not be made: a date threshold against a plain
/// number or the reverse. The candidate is filtered out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NonComparableLiteral {
    pub entity: String,
    pub relation: String,
    pub literal: String,
    pub threshold: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AnswerSet {
    pub answers: BTreeSet<NodeRef>,
    pub relaxation_tier: u8,
}

impl AnswerSet {
    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    /// Display strings of the answers, sorted and deduplicated.
    pub fn answer_strings(&self) -> Vec<String> {
        let set: BTreeSet<String> = self.answers.iter().map(|n| n.to_string()).collect();
        set.into_iter().collect()
    }
}

/// Surviving candidates per hop; `hops[i - 1]` holds the hop-`i` set.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HopBindings {
    pub hops: Vec<BTreeSet<NodeRef>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Execution {
    pub bindings: HopBindings,
    pub warnings: Vec<NonComparableLiteral>,
}

pub fn execute_skeleton(g: &KnowledgeGraph, topic: &EntityId, path: &MainPath) -> BTreeSet<NodeRef> {
    g.reach(topic, path.relations())
}

enum Test {
    Pass,
    Fail,
    NonComparable,
}

fn compare_literal(lit: &Literal, op: ComparisonOp, threshold: &Literal) -> Test {
    if !lit.is_orderable() {
        return Test::Fail;
    }
    match lit.compare(threshold) {
        Some(ord) if op.holds(ord) => Test::Pass,
        Some(_) => Test::Fail,
        None => Test::NonComparable,
    }
}

fn string_matches(lit: &Literal, text: &str) -> bool {
    lit.kind() == LiteralKind::String && lit.value().trim() == text.trim()
}

/// FILTER semantics shared by the CRP executor and the query interpreter.
/// Returns `None` for a cross-kind comparison.
pub fn filter_holds(lit: &Literal, op: ComparisonOp, threshold: &Literal) -> Option<bool> {
    if threshold.kind() == LiteralKind::String {
        return Some(op == ComparisonOp::Eq && string_matches(lit, threshold.value()));
    }
    match compare_literal(lit, op, threshold) {
        Test::Pass => Some(true),
        Test::Fail => Some(false),
        Test::NonComparable => None,
    }
}

/// The extremum kind over a set of attribute values: dates when any value is
/// a date, plain numbers otherwise.
fn extremum_kind<'a>(values: impl Iterator<Item = &'a Literal>) -> Option<LiteralKind> {
    let mut kind = None;
    for v in values {
        match v.kind() {
            LiteralKind::DateTime => return Some(LiteralKind::DateTime),
            LiteralKind::Numeric => kind = Some(LiteralKind::Numeric),
            LiteralKind::String => {}
        }
    }
    kind
}

fn better(a: &Literal, b: &Literal, op: ComparisonOp) -> bool {
    let ord = a.compare(b).unwrap_or(Ordering::Equal);
    if op == ComparisonOp::ArgMax {
        ord == Ordering::Greater
    } else {
        ord == Ordering::Less
    }
}

/// Keeps the candidates whose attribute attains the extremum. Ties stay.
fn extremum_winners(
    g: &KnowledgeGraph,
    candidates: &BTreeSet<NodeRef>,
    relation: &RelationId,
    op: ComparisonOp,
) -> BTreeSet<NodeRef> {
    let attrs: Vec<(&NodeRef, Vec<&Literal>)> = candidates
        .iter()
        .filter_map(|n| n.as_entity().map(|e| (n, g.objects(e, relation).filter_map(NodeRef::as_literal).collect())))
        .collect();
    let Some(kind) = extremum_kind(attrs.iter().flat_map(|(_, v)| v.iter().copied())) else {
        return BTreeSet::new();
    };
    let mut best: Option<&Literal> = None;
    for v in attrs.iter().flat_map(|(_, v)| v.iter()).filter(|v| v.kind() == kind) {
        if best.is_none_or(|b| better(v, b, op)) {
            best = Some(v);
        }
    }
    let best = best.expect("kind was found among the values");
    attrs
        .into_iter()
        .filter(|(_, vs)| vs.iter().any(|v| v.kind() == kind && v.compare(best) == Some(Ordering::Equal)))
        .map(|(n, _)| n.clone())
        .collect()
}

fn passes_filter(
    g: &KnowledgeGraph,
    node: &NodeRef,
    c: &Constraint,
    warnings: &mut Vec<NonComparableLiteral>,
) -> bool {
    let Some(e) = node.as_entity() else {
        return false;
    };
    match &c.value {
        ConstraintValue::Entity { entity: Some(target), .. } => {
            g.has_triple(e, &c.relation, &NodeRef::Entity(target.clone()))
        }
        ConstraintValue::Entity { entity: None, .. } => false,
        ConstraintValue::Str(text) => {
            g.objects(e, &c.relation).filter_map(NodeRef::as_literal).any(|l| string_matches(l, text))
        }
        ConstraintValue::Numeric(cond) => {
            let threshold = cond.threshold().expect("extremum handled separately");
            let mut pass = false;
            for lit in g.objects(e, &c.relation).filter_map(NodeRef::as_literal) {
                match compare_literal(lit, cond.op(), threshold) {
                    Test::Pass => pass = true,
                    Test::Fail => {}
                    Test::NonComparable => {
                        let w = NonComparableLiteral {
                            entity: e.to_string(),
                            relation: c.relation.to_string(),
                            literal: lit.to_quoted(),
                            threshold: threshold.to_quoted(),
                        };
                        log::warn!("non-comparable literal {} vs {} on {}", w.literal, w.threshold, w.entity);
                        warnings.push(w);
                    }
                }
            }
            pass
        }
    }
}

fn is_extremum(c: &Constraint) -> bool {
    matches!(&c.value, ConstraintValue::Numeric(n) if n.op().is_extremum())
}

/// Applies one constraint to a set of hop candidates.
pub fn apply_constraint(
    g: &KnowledgeGraph,
    candidates: &BTreeSet<NodeRef>,
    c: &Constraint,
) -> (BTreeSet<NodeRef>, Vec<NonComparableLiteral>) {
    let mut warnings = Vec::new();
    let kept = match &c.value {
        ConstraintValue::Numeric(n) if n.op().is_extremum() => extremum_winners(g, candidates, &c.relation, n.op()),
        _ => candidates.iter().filter(|n| passes_filter(g, n, c, &mut warnings)).cloned().collect(),
    };
    (kept, warnings)
}

/// Forward pass: hop sets under the filters and any extremum restrictions.
fn forward(
    g: &KnowledgeGraph,
    topic: &EntityId,
    path: &[RelationId],
    filters: &[Vec<&Constraint>],
    restrict: &[Option<BTreeSet<NodeRef>>],
    warnings: &mut Vec<NonComparableLiteral>,
) -> Vec<BTreeSet<NodeRef>> {
    let mut layers = Vec::with_capacity(path.len());
    let mut frontier: BTreeSet<NodeRef> = [NodeRef::Entity(topic.clone())].into();
    for (i, r) in path.iter().enumerate() {
        let mut next = g.step(&frontier, r);
        for c in &filters[i] {
            next.retain(|n| passes_filter(g, n, c, warnings));
        }
        if let Some(allowed) = &restrict[i] {
            next.retain(|n| allowed.contains(n));
        }
        layers.push(next.clone());
        frontier = next;
    }
    layers
}

/// Backward pass: keep hop candidates that have a continuation to the end.
fn alive(g: &KnowledgeGraph, path: &[RelationId], layers: &[BTreeSet<NodeRef>]) -> Vec<BTreeSet<NodeRef>> {
    let mut out = layers.to_vec();
    for i in (0..path.len().saturating_sub(1)).rev() {
        let (head, tail) = out.split_at_mut(i + 1);
        let next = &tail[0];
        let r = &path[i + 1];
        head[i].retain(|n| n.as_entity().is_some_and(|e| g.objects(e, r).any(|o| next.contains(o))));
    }
    out
}

fn topic_of(crp: &Crp) -> Result<&EntityId, ExecError> {
    crp.validate()?;
    crp.topic_entity.as_ref().ok_or_else(|| ExecError::UngroundedTopic(crp.topic_surface.clone()))
}

fn run(g: &KnowledgeGraph, topic: &EntityId, path: &[RelationId], constraints: &[Constraint]) -> Execution {
    let mut filters: Vec<Vec<&Constraint>> = vec![Vec::new(); path.len()];
    let mut extrema = Vec::new();
    for c in constraints {
        if is_extremum(c) {
            extrema.push(c);
        } else {
            filters[c.hop - 1].push(c);
        }
    }
    let mut restrict: Vec<Option<BTreeSet<NodeRef>>> = vec![None; path.len()];
    let mut warnings = Vec::new();
    for c in extrema {
        let layers = forward(g, topic, path, &filters, &restrict, &mut Vec::new());
        let live = alive(g, path, &layers);
        let ConstraintValue::Numeric(n) = &c.value else { unreachable!() };
        let winners = extremum_winners(g, &live[c.hop - 1], &c.relation, n.op());
        restrict[c.hop - 1] = Some(match restrict[c.hop - 1].take() {
            Some(prev) => prev.intersection(&winners).cloned().collect(),
            None => winners,
        });
    }
    let layers = forward(g, topic, path, &filters, &restrict, &mut warnings);
    Execution { bindings: HopBindings { hops: layers }, warnings }
}

/// Full constrained execution with per-hop bindings and warnings.
pub fn execute_full_traced(g: &KnowledgeGraph, crp: &Crp) -> Result<(AnswerSet, Execution), ExecError> {
    let topic = topic_of(crp)?;
    let exec = run(g, topic, crp.main_path.relations(), &crp.sorted_constraints());
    let answers = exec.bindings.hops.last().cloned().unwrap_or_default();
    Ok((AnswerSet { answers, relaxation_tier: 0 }, exec))
}

pub fn execute_full(g: &KnowledgeGraph, crp: &Crp) -> Result<AnswerSet, ExecError> {
    execute_full_traced(g, crp).map(|(a, _)| a)
}

/// The constraints kept at a relaxation tier: 0 all, 1 without strings,
/// 2 entity constraints only, 3 none.
pub fn constraints_at_tier(crp: &Crp, tier: u8) -> Vec<Constraint> {
    crp.sorted_constraints()
        .into_iter()
        .filter(|c| match c.kind() {
            ConstraintKind::Str => tier < 1,
            ConstraintKind::Numeric => tier < 2,
            ConstraintKind::Entity => tier < 3,
        })
        .collect()
}

/// Runs tier 0 to 3 and returns the first non-empty result, or the empty
/// tier-3 result. The main path is never changed.
pub fn execute_with_relaxation(g: &KnowledgeGraph, crp: &Crp) -> Result<AnswerSet, ExecError> {
    let topic = topic_of(crp)?;
    let path = crp.main_path.relations();
    for tier in 0..=3u8 {
        let exec = run(g, topic, path, &constraints_at_tier(crp, tier));
        let answers = exec.bindings.hops.last().cloned().unwrap_or_default();
        if !answers.is_empty() || tier == 3 {
            return Ok(AnswerSet { answers, relaxation_tier: tier });
        }
    }
    unreachable!("tier 3 always returns")
}

// ------------------------------------------------------------- interpreter

type Solution = BTreeMap<Var, NodeRef>;

fn bound<'a>(t: &'a Term, s: &'a Solution) -> Option<NodeRef> {
    match t {
        Term::Var(v) => s.get(v).cloned(),
        Term::Entity(e) => Some(NodeRef::Entity(e.clone())),
        Term::Lit(l) => Some(NodeRef::Lit(l.clone())),
    }
}

fn object_matches(pattern_obj: &Term, actual: &NodeRef) -> bool {
    match (pattern_obj, actual) {
        (Term::Lit(want), NodeRef::Lit(have)) => filter_holds(have, ComparisonOp::Eq, want) == Some(true),
        (Term::Lit(_), _) => false,
        (Term::Entity(e), NodeRef::Entity(have)) => e == have,
        _ => false,
    }
}

/// Evaluates a parsed query by joining its patterns into solution mappings,
/// filtering, then applying `ORDER BY .. LIMIT 1` with ties kept.
pub fn execute_query(g: &KnowledgeGraph, q: &SparqlQuery) -> BTreeSet<NodeRef> {
    let mut solutions: Vec<Solution> = vec![Solution::new()];
    let mut pending: Vec<&crate::sparql::TriplePattern> = q.patterns.iter().collect();
    let mut bound_vars: BTreeSet<&Var> = BTreeSet::new();
    while !pending.is_empty() {
        let ready = |t: &Term| t.var().is_none_or(|v| bound_vars.contains(v));
        let idx = pending
            .iter()
            .position(|p| ready(&p.subject))
            .or_else(|| pending.iter().position(|p| ready(&p.object)))
            .unwrap_or(0);
        let p = pending.remove(idx);
        let mut next = Vec::new();
        for s in &solutions {
            let subjects: Vec<EntityId> = match bound(&p.subject, s) {
                Some(NodeRef::Entity(e)) => vec![e],
                Some(NodeRef::Lit(_)) => vec![],
                None => g
                    .triples()
                    .iter()
                    .filter(|t| t.relation == p.relation)
                    .map(|t| t.subject.clone())
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect(),
            };
            for subj in subjects {
                for o in g.objects(&subj, &p.relation) {
                    let mut ext = s.clone();
                    if let Term::Var(v) = &p.subject {
                        ext.insert(v.clone(), NodeRef::Entity(subj.clone()));
                    }
                    match &p.object {
                        Term::Var(v) => match s.get(v) {
                            Some(have) if have != o => continue,
                            Some(_) => {}
                            None => {
                                if p.subject.var() == Some(v) && ext.get(v) != Some(o) {
                                    continue;
                                }
                                ext.insert(v.clone(), o.clone());
                            }
                        },
                        t => {
                            if !object_matches(t, o) {
                                continue;
                            }
                        }
                    }
                    next.push(ext);
                }
            }
        }
        for t in [&p.subject, &p.object] {
            if let Some(v) = t.var() {
                bound_vars.insert(v);
            }
        }
        solutions = next;
    }
    solutions.retain(|s| {
        q.filters.iter().all(|f| match s.get(&f.var) {
            Some(NodeRef::Lit(l)) => filter_holds(l, f.op, &f.value) == Some(true),
            _ => false,
        })
    });
    if let Some(order) = q.order.as_ref().filter(|o| o.limit_one) {
        let op = if order.direction == Direction::Desc { ComparisonOp::ArgMax } else { ComparisonOp::ArgMin };
        let values = || solutions.iter().filter_map(|s| s.get(&order.var).and_then(NodeRef::as_literal));
        match extremum_kind(values()) {
            None => solutions.clear(),
            Some(kind) => {
                let mut best: Option<Literal> = None;
                for v in values().filter(|v| v.kind() == kind) {
                    if best.as_ref().is_none_or(|b| better(v, b, op)) {
                        best = Some(v.clone());
                    }
                }
                let best = best.expect("kind present");
                solutions.retain(|s| {
                    s.get(&order.var)
                        .and_then(NodeRef::as_literal)
                        .is_some_and(|v| v.kind() == kind && v.compare(&best) == Some(Ordering::Equal))
                });
            }
        }
    }
    solutions.into_iter().filter_map(|mut s| s.remove(&q.select_var)).collect()
}
