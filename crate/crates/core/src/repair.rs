//! KG-guided main-path repair.
//!
//! One LLM call turns the question into a blueprint of textual steps. Then,
//! for each depth up to the budget, every beam path is expanded with the
//! relations leaving its frontier (top `x` per blueprint step by
//! similarity), the expansions are cut to the top `y` by similarity to the
//! question, and one LLM call picks the next beam (`w` paths, or 1 at the
//! last depth). A run costs at most `d + 1` calls, and every path that ever
//! enters a beam is executable because it is built from real outgoing edges.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::Serialize;
use thiserror::Error;

use crate::crp::MainPath;
use crate::kg::{EntityId, KnowledgeGraph, NodeRef, RelationId};
use crate::providers::{prompts, EmbeddingProvider, MeteredLlm, ProviderError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepairConfig {
    pub beam_width: usize,
    pub relation_filter: usize,
    pub path_filter: usize,
    pub max_depth_cap: usize,
}

impl Default for RepairConfig {
    fn default() -> Self {
        RepairConfig { beam_width: 3, relation_filter: 4, path_filter: 10, max_depth_cap: 4 }
    }
}

impl RepairConfig {
    pub fn validate(&self) -> Result<(), RepairError> {
        let bad = |m: &str| Err(RepairError::InvalidConfig(m.into()));
        if self.beam_width == 0 {
            return bad("beam width must be at least 1");
        }
        if self.relation_filter == 0 {
            return bad("relation filter size must be at least 1");
        }
        if self.path_filter < self.beam_width {
            return bad("path filter size must be at least the beam width");
        }
        if self.max_depth_cap == 0 {
            return bad("depth cap must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RepairError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("repair depth must be at least 1")]
    ZeroDepth,
    #[error("invalid repair configuration: {0}")]
    InvalidConfig(String),
    #[error("no `#k` step in blueprint reply {0:?}")]
    EmptyBlueprint(String),
    #[error("repair failed: {0}")]
    RepairFailed(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Blueprint {
    pub steps: Vec<String>,
}

fn blueprint_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^\s*(?:A:\s*)?#(\d+)[.:)]?\s+(.+?)\s*$").expect("valid regex"))
}

fn path_ref() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bpath\s*#?\s*(\d+)").expect("valid regex"))
}

impl Blueprint {
    pub fn parse(reply: &str) -> Result<Blueprint, RepairError> {
        let steps: Vec<String> = blueprint_line().captures_iter(reply).map(|c| c[2].to_string()).collect();
        if steps.is_empty() {
            return Err(RepairError::EmptyBlueprint(reply.chars().take(80).collect()));
        }
        Ok(Blueprint { steps })
    }
}

pub fn generate_blueprint(llm: &MeteredLlm, question: &str) -> Result<(Blueprint, String), RepairError> {
    if question.trim().is_empty() {
        return Err(RepairError::EmptyQuestion);
    }
    let reply = llm.call(&prompts::blueprint(question))?.text;
    Ok((Blueprint::parse(&reply)?, reply))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartialPath {
    pub relations: Vec<RelationId>,
    pub score: f64,
}

impl PartialPath {
    pub fn linearize(&self) -> String {
        linearize(&self.relations)
    }
}

pub fn linearize(relations: &[RelationId]) -> String {
    relations.iter().map(RelationId::as_str).collect::<Vec<_>>().join(" -> ")
}

fn frontier_entities<'a>(g: &'a KnowledgeGraph, s1: &'a EntityId, path: &[RelationId]) -> Vec<EntityId> {
    if path.is_empty() {
        return vec![s1.clone()];
    }
    g.reach(s1, path).into_iter().filter_map(|n| n.as_entity().cloned()).collect()
}

/// Ranks by descending score, then by name.
fn rank<T: Ord>(items: &mut [(f64, T)]) {
    items.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expansion {
    pub candidates: Vec<Vec<RelationId>>,
    pub dead_ends: Vec<Vec<RelationId>>,
}

/// Extends every beam path by the top-`x` outgoing relations for each
/// blueprint step. Paths whose frontier has no outgoing relation are
/// reported as dead ends and dropped.
pub fn expand_beam(
    g: &KnowledgeGraph,
    s1: &EntityId,
    beam: &[Vec<RelationId>],
    blueprint: &Blueprint,
    emb: &dyn EmbeddingProvider,
    x: usize,
) -> Result<Expansion, ProviderError> {
    let mut out = BTreeSet::new();
    let mut dead_ends = Vec::new();
    for path in beam {
        let frontier = frontier_entities(g, s1, path);
        let rels = g.outgoing_relations(frontier.iter());
        if rels.is_empty() {
            dead_ends.push(path.clone());
            continue;
        }
        for step in &blueprint.steps {
            let mut scored = Vec::with_capacity(rels.len());
            for r in &rels {
                scored.push((emb.similarity(step, r.as_str())?, r.clone()));
            }
            rank(&mut scored);
            for (_, r) in scored.into_iter().take(x) {
                let mut p = path.clone();
                p.push(r);
                out.insert(p);
            }
        }
    }
    Ok(Expansion { candidates: out.into_iter().collect(), dead_ends })
}

/// Keeps the `y` candidates most similar to the question, best first.
pub fn filter_paths(
    cands: &[Vec<RelationId>],
    question: &str,
    emb: &dyn EmbeddingProvider,
    y: usize,
) -> Result<Vec<PartialPath>, ProviderError> {
    let mut scored = Vec::with_capacity(cands.len());
    for c in cands {
        let lin = linearize(c);
        scored.push((emb.similarity(question, &lin)?, (lin, c.clone())));
    }
    rank(&mut scored);
    Ok(scored.into_iter().take(y).map(|(score, (_, relations))| PartialPath { relations, score }).collect())
}

/// `start -> r1 -> .. -> rk -> e1, e2, e3, ...` with up to three end nodes.
pub fn render_path_line(g: &KnowledgeGraph, s1: &EntityId, start_name: &str, path: &[RelationId]) -> String {
    let ends: Vec<String> = g.reach(s1, path).iter().map(NodeRef::to_string).collect();
    let mut end = ends.iter().take(3).cloned().collect::<Vec<_>>().join(", ");
    if ends.len() > 3 {
        end.push_str(", ...");
    }
    format!("{start_name} -> {} -> {end}", linearize(path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub chosen: Vec<PartialPath>,
    pub reply: String,
    pub fallback: bool,
}

/// Parses `Path N` references in reply order, capped at `n`. Returns `None`
/// when nothing parses or an index is out of range.
pub fn parse_selection(reply: &str, candidates: usize, n: usize) -> Option<Vec<usize>> {
    let mut picked = Vec::new();
    for cap in path_ref().captures_iter(reply) {
        let k: usize = cap[1].parse().ok()?;
        if k == 0 || k > candidates {
            return None;
        }
        if !picked.contains(&(k - 1)) {
            picked.push(k - 1);
        }
    }
    if picked.is_empty() {
        return None;
    }
    picked.truncate(n);
    Some(picked)
}

pub struct SelectRequest<'a> {
    pub g: &'a KnowledgeGraph,
    pub question: &'a str,
    pub s1: &'a EntityId,
    pub start_name: &'a str,
}

/// One LLM call choosing up to `n` candidates. Unusable replies fall back to
/// the first `n` candidates by filter score.
pub fn select_paths(
    llm: &MeteredLlm,
    req: &SelectRequest<'_>,
    cands: &[PartialPath],
    n: usize,
) -> Result<Selection, ProviderError> {
    let lines: Vec<String> =
        cands.iter().map(|c| render_path_line(req.g, req.s1, req.start_name, &c.relations)).collect();
    let reply = llm.call(&prompts::path_selection(req.question, req.start_name, &lines, n))?.text;
    let (chosen, fallback) = match parse_selection(&reply, cands.len(), n) {
        Some(idx) => (idx.into_iter().map(|i| cands[i].clone()).collect(), false),
        None => {
            log::info!("SelectionFallback: unusable selection reply {reply:?}");
            (cands.iter().take(n).cloned().collect(), true)
        }
    };
    Ok(Selection { chosen, reply, fallback })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredPath {
    pub path: String,
    pub score: f64,
}

/// One beam-search depth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceStep {
    pub depth: usize,
    pub beam: Vec<String>,
    pub candidates: Vec<ScoredPath>,
    pub llm_reply: String,
    pub chosen: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub dead_ends: Vec<String>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub selection_fallback: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RepairTrace {
    pub blueprint: Vec<String>,
    pub blueprint_reply: String,
    pub steps: Vec<TraceStep>,
}

impl RepairTrace {
    /// One JSON object per depth.
    pub fn to_json_lines(&self) -> String {
        self.steps
            .iter()
            .map(|s| serde_json::to_string(s).expect("trace serializes"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepairReport {
    pub outcome: Result<MainPath, RepairError>,
    pub llm_calls: usize,
    pub effective_depth: usize,
    pub trace: RepairTrace,
    /// Every beam after each selection, for executability checks.
    pub beams: Vec<Vec<Vec<RelationId>>>,
}

pub struct RepairRequest<'a> {
    pub question: &'a str,
    pub topic: &'a EntityId,
    pub topic_name: &'a str,
    pub depth: usize,
}

pub fn repair(
    g: &KnowledgeGraph,
    req: &RepairRequest<'_>,
    cfg: &RepairConfig,
    llm: &MeteredLlm,
    emb: &dyn EmbeddingProvider,
) -> RepairReport {
    let mut report = RepairReport {
        outcome: Err(RepairError::ZeroDepth),
        llm_calls: 0,
        effective_depth: req.depth.min(cfg.max_depth_cap),
        trace: RepairTrace::default(),
        beams: Vec::new(),
    };
    report.outcome = run(g, req, cfg, llm, emb, &mut report);
    assert!(report.llm_calls <= report.effective_depth + 1, "repair exceeded its call budget");
    report
}

fn run(
    g: &KnowledgeGraph,
    req: &RepairRequest<'_>,
    cfg: &RepairConfig,
    llm: &MeteredLlm,
    emb: &dyn EmbeddingProvider,
    report: &mut RepairReport,
) -> Result<MainPath, RepairError> {
    if req.depth == 0 {
        return Err(RepairError::ZeroDepth);
    }
    cfg.validate()?;
    if req.question.trim().is_empty() {
        return Err(RepairError::EmptyQuestion);
    }
    report.llm_calls += 1;
    let (blueprint, reply) = generate_blueprint(llm, req.question)?;
    report.trace.blueprint = blueprint.steps.clone();
    report.trace.blueprint_reply = reply;

    let d = report.effective_depth;
    let sel = SelectRequest { g, question: req.question, s1: req.topic, start_name: req.topic_name };
    let mut beam: Vec<Vec<RelationId>> = vec![Vec::new()];
    for depth in 1..=d {
        let expansion = expand_beam(g, req.topic, &beam, &blueprint, emb, cfg.relation_filter)?;
        if expansion.candidates.is_empty() {
            return Err(RepairError::RepairFailed(format!("every beam path dead-ends at depth {depth}")));
        }
        let filtered = filter_paths(&expansion.candidates, req.question, emb, cfg.path_filter)?;
        let n = if depth < d { cfg.beam_width } else { 1 };
        report.llm_calls += 1;
        let selection = select_paths(llm, &sel, &filtered, n)?;
        let step = TraceStep {
            depth,
            beam: beam.iter().map(|p| linearize(p)).collect(),
            candidates: filtered.iter().map(|p| ScoredPath { path: p.linearize(), score: p.score }).collect(),
            llm_reply: selection.reply.clone(),
            chosen: selection.chosen.iter().map(PartialPath::linearize).collect(),
            dead_ends: expansion.dead_ends.iter().map(|p| linearize(p)).collect(),
            selection_fallback: selection.fallback,
        };
        report.trace.steps.push(step);
        beam = selection.chosen.into_iter().map(|p| p.relations).collect();
        report.beams.push(beam.clone());
    }
    let path = beam.into_iter().next().expect("selection returns at least one path");
    Ok(MainPath::new(path).expect("depth >= 1 gives a nonempty path"))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::providers::{CostLedger, Role, ScriptEntry, ScriptedLlm, TokenOverlap};

    fn fixture() -> KnowledgeGraph {
        KnowledgeGraph::parse_tsv(include_str!("../../../fixtures/presidents.tsv")).unwrap()
    }

    fn rel(s: &str) -> RelationId {
        RelationId::new(s).unwrap()
    }

    fn metered(entries: Vec<ScriptEntry>) -> MeteredLlm {
        MeteredLlm::new(Arc::new(ScriptedLlm::new(entries).unwrap()), Role::General, 0.0, Arc::new(CostLedger::new()))
    }

    fn general_script() -> Vec<ScriptEntry> {
        vec![
            ScriptEntry::always("reasoning steps", "#1 Identify the presidents of the country.\n#2 Determine who holds the office."),
            ScriptEntry::always("Select up to", "Path 1"),
        ]
    }

    #[test]
    fn blueprint_parsing() {
        let b = Blueprint::parse("#1 Identify the team for which Lou Seal is the mascot.\n#2 Determine the year this team last won the World Series.").unwrap();
        assert_eq!(b.steps.len(), 2);
        assert_eq!(b.steps[0], "Identify the team for which Lou Seal is the mascot.");
        assert_eq!(Blueprint::parse("#1 Find X.").unwrap().steps, ["Find X."]);
        assert!(matches!(Blueprint::parse("no steps here"), Err(RepairError::EmptyBlueprint(_))));
        assert_eq!(Blueprint::parse("A: #1 a\n#2. b").unwrap().steps, ["a", "b"]);
    }

    #[test]
    fn expand_examples() {
        let g = fixture();
        let usa = EntityId::new("USA").unwrap();
        let bp = Blueprint { steps: vec!["anything".into()] };
        let e = expand_beam(&g, &usa, &[vec![]], &bp, &TokenOverlap, 4).unwrap();
        assert_eq!(e.candidates, [vec![rel("country.presidents")]]);

        let bp = Blueprint { steps: vec!["who holds the office".into()] };
        let e = expand_beam(&g, &usa, &[vec![rel("country.presidents")]], &bp, &TokenOverlap, 1).unwrap();
        assert_eq!(e.candidates, [vec![rel("country.presidents"), rel("president.office_holder")]]);

        let dead = vec![rel("country.presidents"), rel("president.office_holder"), rel("position.from")];
        let e = expand_beam(&g, &usa, std::slice::from_ref(&dead), &bp, &TokenOverlap, 4).unwrap();
        assert!(e.candidates.is_empty());
        assert_eq!(e.dead_ends, [dead]);
    }

    #[test]
    fn filter_ordering() {
        let cands: Vec<Vec<RelationId>> = (0..12).map(|i| vec![rel(&format!("r{i:02}"))]).collect();
        assert_eq!(filter_paths(&cands, "q", &TokenOverlap, 10).unwrap().len(), 10);
        assert_eq!(filter_paths(&cands[..3], "q", &TokenOverlap, 10).unwrap().len(), 3);
        // equal score: lexicographically smaller first
        let tie = [vec![rel("b.x")], vec![rel("a.x")]];
        let out = filter_paths(&tie, "x", &TokenOverlap, 10).unwrap();
        assert_eq!(out[0].relations, [rel("a.x")]);
        assert_eq!(out[0].score, out[1].score);
        let ranked = filter_paths(&[vec![rel("zz.holder")], vec![rel("aa.other")]], "holder", &TokenOverlap, 10).unwrap();
        assert_eq!(ranked[0].relations, [rel("zz.holder")]);
    }

    #[test]
    fn selection_parsing() {
        assert_eq!(parse_selection("Path 2, Path 1", 3, 3), Some(vec![1, 0]));
        assert_eq!(parse_selection("I think Path 1 is best.", 3, 1), Some(vec![0]));
        assert_eq!(parse_selection("none of these", 3, 1), None);
        assert_eq!(parse_selection("Path 4", 3, 1), None);
        assert_eq!(parse_selection("Path 3, Path 1, Path 2", 3, 2), Some(vec![2, 0]));
    }

    #[test]
    fn selection_fallback_uses_score_order() {
        let g = fixture();
        let usa = EntityId::new("USA").unwrap();
        let llm = metered(vec![ScriptEntry::always("", "none of these")]);
        let cands = vec![
            PartialPath { relations: vec![rel("country.presidents")], score: 0.9 },
            PartialPath { relations: vec![rel("country.presidents")], score: 0.1 },
        ];
        let req = SelectRequest { g: &g, question: "q", s1: &usa, start_name: "USA" };
        let s = select_paths(&llm, &req, &cands, 1).unwrap();
        assert!(s.fallback);
        assert_eq!(s.chosen, cands[..1]);
    }

    #[test]
    fn path_lines_show_end_nodes() {
        let g = fixture();
        let usa = EntityId::new("USA").unwrap();
        assert_eq!(
            render_path_line(&g, &usa, "USA", &[rel("country.presidents"), rel("president.office_holder")]),
            "USA -> country.presidents -> president.office_holder -> Clinton, GWBush, Obama"
        );
    }

    fn run_fixture(d: usize, topic: &str) -> RepairReport {
        let g = fixture();
        let topic = EntityId::new(topic).unwrap();
        let req = RepairRequest {
            question: "which presidents of the US held office",
            topic: &topic,
            topic_name: topic.as_str(),
            depth: d,
        };
        repair(&g, &req, &RepairConfig::default(), &metered(general_script()), &TokenOverlap)
    }

    #[test]
    fn repairs_fixture_within_budget() {
        let r = run_fixture(2, "USA");
        assert_eq!(r.outcome.unwrap().to_string(), "country.presidents -> president.office_holder");
        assert_eq!(r.llm_calls, 3);
        let r = run_fixture(1, "USA");
        assert_eq!(r.outcome.unwrap().to_string(), "country.presidents");
        assert_eq!(r.llm_calls, 2);
    }

    #[test]
    fn dead_start_and_zero_depth() {
        let r = run_fixture(2, "Harvard");
        assert!(matches!(r.outcome, Err(RepairError::RepairFailed(_))));
        assert_eq!(r.llm_calls, 1);
        let r = run_fixture(0, "USA");
        assert_eq!((r.outcome, r.llm_calls), (Err(RepairError::ZeroDepth), 0));
    }

    #[test]
    fn depth_is_capped() {
        let r = run_fixture(9, "USA");
        assert_eq!(r.effective_depth, 4);
        // depth 3 reaches literals only, so depth 4 has nothing to expand
        assert!(matches!(r.outcome, Err(RepairError::RepairFailed(_))));
        assert_eq!(r.llm_calls, 4);
    }

    #[test]
    fn trace_lines() {
        let r = run_fixture(2, "USA");
        let lines = r.trace.to_json_lines();
        assert_eq!(lines.lines().count(), 2);
        let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
        for k in ["depth", "beam", "candidates", "llm_reply", "chosen"] {
            assert!(first.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(RepairConfig::default().validate().is_ok());
        let bad = RepairConfig { path_filter: 2, ..RepairConfig::default() };
        assert!(matches!(bad.validate(), Err(RepairError::InvalidConfig(_))));
    }
}
