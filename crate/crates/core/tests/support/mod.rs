//! Random instance generators and brute-force oracles shared by the property
//! and acceptance suites. The oracles read only the raw triple list.

#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use routerkgqa::crp::{ComparisonOp, Constraint, ConstraintValue, Crp, MainPath, NumericCondition};
use routerkgqa::kg::{EntityId, KnowledgeGraph, Literal, LiteralKind, NodeRef, RelationId, Triple};

pub use rand::SeedableRng;
pub type Rng8 = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng8 {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn ent(s: &str) -> EntityId {
    EntityId::new(s).unwrap()
}

pub fn rel(s: &str) -> RelationId {
    RelationId::new(s).unwrap()
}

pub const LINK_RELATIONS: [&str; 6] = ["r0", "r1", "r2", "r3", "r4", "r5"];
pub const NUM_REL: &str = "num";
pub const DATE_REL: &str = "date";
pub const NAME_REL: &str = "name";
/// Numbers on some subjects, dates on others.
pub const MIXED_REL: &str = "mixed";
const NAMES: [&str; 4] = ["alpha", "beta", "gamma", "delta"];

fn year(rng: &mut Rng8) -> Literal {
    Literal::datetime(format!("{}", rng.gen_range(2000..2008))).unwrap()
}

fn number(rng: &mut Rng8) -> Literal {
    Literal::numeric(format!("{}", rng.gen_range(0..12))).unwrap()
}

/// Up to 50 entities and exactly the 10 relations above (when all are used).
pub fn random_graph(rng: &mut Rng8) -> KnowledgeGraph {
    let n = rng.gen_range(3..=50);
    let ents: Vec<EntityId> = (0..n).map(|i| ent(&format!("E{i}"))).collect();
    let mut triples = Vec::new();
    let edges = rng.gen_range(n..=n * 3);
    for _ in 0..edges {
        let s = ents.choose(rng).unwrap().clone();
        let o = ents.choose(rng).unwrap().clone();
        let r = rel(LINK_RELATIONS.choose(rng).unwrap());
        triples.push(Triple::new(s, r, NodeRef::Entity(o)));
    }
    for e in &ents {
        for _ in 0..rng.gen_range(0..=2) {
            let (r, v) = match rng.gen_range(0..4) {
                0 => (NUM_REL, number(rng)),
                1 => (DATE_REL, year(rng)),
                2 => (NAME_REL, Literal::string(*NAMES.choose(rng).unwrap())),
                _ => (MIXED_REL, if rng.gen_bool(0.5) { number(rng) } else { year(rng) }),
            };
            triples.push(Triple::new(e.clone(), rel(r), NodeRef::Lit(v)));
        }
    }
    KnowledgeGraph::from_triples(triples)
}

/// Which constraint kinds the generator may draw.
#[derive(Debug, Clone, Copy)]
pub struct Mix {
    pub extrema: bool,
    pub max_constraints: usize,
    pub max_depth: usize,
}

impl Default for Mix {
    fn default() -> Self {
        Mix { extrema: true, max_constraints: 3, max_depth: 3 }
    }
}

fn objects_of(g: &KnowledgeGraph, e: &EntityId) -> Vec<(RelationId, NodeRef)> {
    g.triples().iter().filter(|t| &t.subject == e).map(|t| (t.relation.clone(), t.object.clone())).collect()
}

/// A grounded CRP whose main path usually, but not always, is walkable.
pub fn random_crp(rng: &mut Rng8, g: &KnowledgeGraph, mix: Mix) -> Crp {
    let ents: Vec<EntityId> = g.entities().iter().cloned().collect();
    let topic = ents.choose(rng).unwrap().clone();
    let depth = rng.gen_range(1..=mix.max_depth);
    let mut path = Vec::with_capacity(depth);
    let mut walk = Some(topic.clone());
    let mut visited = Vec::new();
    for _ in 0..depth {
        let step = walk.as_ref().and_then(|e| {
            let links: Vec<_> =
                objects_of(g, e).into_iter().filter(|(_, o)| o.as_entity().is_some()).collect();
            links.choose(rng).cloned()
        });
        match step {
            Some((r, o)) if rng.gen_bool(0.9) => {
                path.push(r);
                walk = o.as_entity().cloned();
            }
            _ => {
                path.push(rel(LINK_RELATIONS.choose(rng).unwrap()));
                walk = None;
            }
        }
        visited.push(walk.clone());
    }
    let mut constraints = Vec::new();
    for _ in 0..rng.gen_range(0..=mix.max_constraints) {
        let hop = rng.gen_range(1..=depth);
        let kinds = if mix.extrema { 4 } else { 3 };
        let c = match rng.gen_range(0..kinds) {
            0 => {
                // prefer an entity actually linked from the walked node
                let linked: Vec<_> = visited[hop - 1]
                    .as_ref()
                    .map(|e| objects_of(g, e).into_iter().filter(|(_, o)| o.as_entity().is_some()).collect())
                    .unwrap_or_default();
                let (r, target) = match linked.choose(rng) {
                    Some((r, o)) if rng.gen_bool(0.7) => (r.clone(), o.as_entity().unwrap().clone()),
                    _ => (rel(LINK_RELATIONS.choose(rng).unwrap()), ents.choose(rng).unwrap().clone()),
                };
                Constraint::new(hop, r, ConstraintValue::grounded(target))
            }
            1 => {
                let op = *[ComparisonOp::Eq, ComparisonOp::Ge, ComparisonOp::Le, ComparisonOp::Gt, ComparisonOp::Lt]
                    .choose(rng)
                    .unwrap();
                let (r, t) = match rng.gen_range(0..3) {
                    0 => (NUM_REL, number(rng)),
                    1 => (DATE_REL, year(rng)),
                    _ => (MIXED_REL, if rng.gen_bool(0.5) { number(rng) } else { year(rng) }),
                };
                Constraint::new(hop, rel(r), ConstraintValue::Numeric(NumericCondition::compare(op, t).unwrap()))
            }
            2 => Constraint::new(hop, rel(NAME_REL), ConstraintValue::Str(NAMES.choose(rng).unwrap().to_string())),
            _ => {
                let cond = if rng.gen_bool(0.5) { NumericCondition::argmax() } else { NumericCondition::argmin() };
                let r = *[NUM_REL, DATE_REL, MIXED_REL].choose(rng).unwrap();
                Constraint::new(hop, rel(r), ConstraintValue::Numeric(cond))
            }
        };
        constraints.push(c);
    }
    let mut crp = Crp::new(topic.to_string(), MainPath::new(path).unwrap(), constraints).unwrap();
    crp.topic_entity = Some(topic);
    crp
}

// ------------------------------------------------------------------ oracle

fn is_date(l: &Literal) -> bool {
    l.kind() == LiteralKind::DateTime
}

fn is_num(l: &Literal) -> bool {
    l.kind() == LiteralKind::Numeric
}

/// Same-kind ordering: decimals by value, dates by their canonical text.
fn order(a: &Literal, b: &Literal) -> Option<Ordering> {
    if is_num(a) && is_num(b) {
        a.value().parse::<f64>().ok()?.partial_cmp(&b.value().parse::<f64>().ok()?)
    } else if is_date(a) && is_date(b) {
        Some(a.value().cmp(b.value()))
    } else {
        None
    }
}

fn op_holds(op: ComparisonOp, o: Ordering) -> bool {
    match op {
        ComparisonOp::Eq => o == Ordering::Equal,
        ComparisonOp::Ge => o != Ordering::Less,
        ComparisonOp::Le => o != Ordering::Greater,
        ComparisonOp::Gt => o == Ordering::Greater,
        ComparisonOp::Lt => o == Ordering::Less,
        _ => unreachable!("extrema are not comparisons"),
    }
}

fn attrs<'a>(triples: &'a [Triple], node: &NodeRef, r: &RelationId) -> Vec<&'a NodeRef> {
    match node {
        NodeRef::Entity(e) => triples.iter().filter(|t| &t.subject == e && &t.relation == r).map(|t| &t.object).collect(),
        NodeRef::Lit(_) => Vec::new(),
    }
}

fn satisfies(triples: &[Triple], node: &NodeRef, c: &Constraint) -> bool {
    let objs = attrs(triples, node, &c.relation);
    match &c.value {
        ConstraintValue::Entity { entity, .. } => {
            entity.as_ref().is_some_and(|t| objs.iter().any(|o| o.as_entity() == Some(t)))
        }
        ConstraintValue::Str(s) => objs
            .iter()
            .filter_map(|o| o.as_literal())
            .any(|l| l.kind() == LiteralKind::String && l.value().trim() == s.trim()),
        ConstraintValue::Numeric(n) => {
            let t = n.threshold().expect("comparison");
            objs.iter().filter_map(|o| o.as_literal()).any(|l| order(l, t).is_some_and(|o| op_holds(n.op(), o)))
        }
    }
}

/// Every walk `topic, h1, .., hN` along the main path.
pub fn walks(g: &KnowledgeGraph, crp: &Crp) -> Vec<Vec<NodeRef>> {
    let triples: Vec<Triple> = g.triples().iter().cloned().collect();
    let topic = NodeRef::Entity(crp.topic_entity.clone().expect("grounded"));
    let mut out = vec![vec![topic]];
    for r in crp.main_path.relations() {
        let mut next = Vec::new();
        for w in &out {
            for o in attrs(&triples, w.last().unwrap(), r) {
                let mut w2 = w.clone();
                w2.push(o.clone());
                next.push(w2);
            }
        }
        out = next;
    }
    out
}

pub fn is_extremum(c: &Constraint) -> bool {
    matches!(&c.value, ConstraintValue::Numeric(n) if n.op().is_extremum())
}

/// Brute force: enumerate walks, keep those whose hop nodes pass every
/// filter, then let each extremum (in canonical order) keep the walks whose
/// hop node attains the best value among the surviving walks' hop nodes.
/// Dates win the extremum kind over plain numbers when both occur.
pub fn oracle_answers(g: &KnowledgeGraph, crp: &Crp, constraints: &[Constraint]) -> BTreeSet<NodeRef> {
    let triples: Vec<Triple> = g.triples().iter().cloned().collect();
    let mut sorted = constraints.to_vec();
    sorted.sort_by_key(|c| (c.hop, c.relation.to_string(), c.value.render_body()));
    let mut ws: Vec<Vec<NodeRef>> = walks(g, crp)
        .into_iter()
        .filter(|w| sorted.iter().filter(|c| !is_extremum(c)).all(|c| satisfies(&triples, &w[c.hop], c)))
        .collect();
    for c in sorted.iter().filter(|c| is_extremum(c)) {
        let ConstraintValue::Numeric(n) = &c.value else { unreachable!() };
        let nodes: BTreeSet<NodeRef> = ws.iter().map(|w| w[c.hop].clone()).collect();
        let vals: Vec<(NodeRef, Literal)> = nodes
            .iter()
            .flat_map(|node| {
                attrs(&triples, node, &c.relation)
                    .into_iter()
                    .filter_map(|o| o.as_literal().cloned())
                    .map(move |l| (node.clone(), l))
            })
            .collect();
        let kind_pick: fn(&Literal) -> bool = if vals.iter().any(|(_, l)| is_date(l)) { is_date } else { is_num };
        let typed: Vec<&(NodeRef, Literal)> = vals.iter().filter(|(_, l)| kind_pick(l)).collect();
        let want = if n.op() == ComparisonOp::ArgMax { Ordering::Greater } else { Ordering::Less };
        let best = typed.iter().map(|(_, l)| l).fold(None::<&Literal>, |b, l| match b {
            Some(b) if order(l, b) != Some(want) => Some(b),
            _ => Some(l),
        });
        let winners: BTreeSet<&NodeRef> = match best {
            Some(b) => typed.iter().filter(|(_, l)| order(l, b) == Some(Ordering::Equal)).map(|(n, _)| n).collect(),
            None => BTreeSet::new(),
        };
        ws.retain(|w| winners.contains(&w[c.hop]));
    }
    ws.into_iter().map(|mut w| w.pop().unwrap()).collect()
}

/// Constraints kept at each relaxation tier, selected independently.
pub fn oracle_tier(crp: &Crp, tier: u8) -> Vec<Constraint> {
    crp.constraints
        .iter()
        .filter(|c| match &c.value {
            ConstraintValue::Str(_) => tier == 0,
            ConstraintValue::Numeric(_) => tier <= 1,
            ConstraintValue::Entity { .. } => tier <= 2,
        })
        .cloned()
        .collect()
}

// ------------------------------------------------------------------ repair

/// Relation lists of the `Path k: start -> r1 -> .. -> ends` lines in a
/// path-selection prompt, in prompt order.
pub fn prompt_paths(prompt: &str) -> Vec<Vec<String>> {
    prompt
        .lines()
        .filter_map(|l| {
            let rest = l.strip_prefix("Path ")?;
            let (_, body) = rest.split_once(": ")?;
            let parts: Vec<&str> = body.split(" -> ").collect();
            (parts.len() >= 3).then(|| parts[1..parts.len() - 1].iter().map(|s| s.to_string()).collect())
        })
        .collect()
}

pub fn is_selection_prompt(prompt: &str) -> bool {
    prompt.contains("Select up to")
}

/// Selects exactly the listed paths that are prefixes of `gold`.
pub fn oracle_reply(prompt: &str, gold: &[RelationId]) -> String {
    if !is_selection_prompt(prompt) {
        return "#1 follow the links\n#2 keep going".into();
    }
    let picks: Vec<String> = prompt_paths(prompt)
        .iter()
        .enumerate()
        .filter(|(_, p)| p.len() <= gold.len() && p.iter().zip(gold).all(|(a, b)| a == b.as_str()))
        .map(|(i, _)| format!("Path {}", i + 1))
        .collect();
    if picks.is_empty() {
        "none of these".into()
    } else {
        picks.join(", ")
    }
}

/// All relation sequences of length `d` from `topic` with a non-empty reach.
pub fn executable_paths(g: &KnowledgeGraph, topic: &EntityId, d: usize) -> Vec<Vec<RelationId>> {
    let rels: Vec<RelationId> = g.relations().iter().cloned().collect();
    let mut out: Vec<Vec<RelationId>> = vec![Vec::new()];
    for _ in 0..d {
        let mut next = Vec::new();
        for p in &out {
            for r in &rels {
                let mut q = p.clone();
                q.push(r.clone());
                if !walks_along(g, topic, &q).is_empty() {
                    next.push(q);
                }
            }
        }
        out = next;
    }
    out
}

/// End nodes of walks along `path`, read from the raw triple list.
pub fn walks_along(g: &KnowledgeGraph, topic: &EntityId, path: &[RelationId]) -> BTreeSet<NodeRef> {
    let mut frontier: BTreeSet<NodeRef> = [NodeRef::Entity(topic.clone())].into();
    for r in path {
        frontier = g
            .triples()
            .iter()
            .filter(|t| &t.relation == r && frontier.contains(&NodeRef::Entity(t.subject.clone())))
            .map(|t| t.object.clone())
            .collect();
    }
    frontier
}

/// A topic and a length-`d` path that is the only one reaching its answer
/// set, or `None` when the sampled walk has a twin.
pub fn unique_gold_path(rng: &mut Rng8, g: &KnowledgeGraph, d: usize) -> Option<(EntityId, Vec<RelationId>)> {
    let ents: Vec<EntityId> = g.entities().iter().cloned().collect();
    let topic = ents.choose(rng)?.clone();
    let candidates = executable_paths(g, &topic, d);
    let gold = candidates.choose(rng)?.clone();
    let answers = walks_along(g, &topic, &gold);
    let twins = candidates.iter().filter(|p| walks_along(g, &topic, p) == answers).count();
    (twins == 1).then_some((topic, gold))
}
