//! Dataset ingestion, answer and CRP metrics, and batch evaluation.
//!
//! Answers compare after case-folding, trimming and collapsing whitespace.
//! Skeleton accuracy masks entity and literal payloads but keeps the
//! constraint kind and operator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crp::{ComparisonOp, ConstraintKind, ConstraintValue, Crp};
use crate::executor::execute_query;
use crate::kg::{KnowledgeGraph, NodeRef};
use crate::pipeline::{answer_question, run_stage2_only, PipelineConfig, Providers, QuestionResult, ResultRecord, Route};
use crate::providers::{ledger_summary, CallRecord, PriceTable};
use crate::sparql::{parse_sparql, sparql_to_crp};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("dataset {0} has no records")]
    NoRecords(String),
    #[error("cannot build worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub answers: Vec<String>,
    #[serde(default)]
    pub sparql: Option<String>,
    #[serde(default)]
    pub topic: Option<String>,
    #[serde(default)]
    pub depth: Option<usize>,
}

/// A dataset line: a record, or the reason it could not be used.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetLine {
    Record(DatasetRecord),
    Flagged { line: usize, id: String, message: String },
}

/// Parses JSONL; blank lines are skipped, bad lines are flagged.
pub fn parse_dataset(text: &str) -> Vec<DatasetLine> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let flag = |message: String| DatasetLine::Flagged { line: i + 1, id: format!("line-{}", i + 1), message };
        match serde_json::from_str::<DatasetRecord>(line) {
            Ok(r) if r.answers.is_empty() && r.sparql.is_none() => {
                out.push(flag("record has neither answers nor sparql".into()))
            }
            Ok(r) => out.push(DatasetLine::Record(r)),
            Err(e) => out.push(flag(e.to_string())),
        }
    }
    out
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetLine>, EvalError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EvalError::Io { path: path.display().to_string(), message: e.to_string() })?;
    let lines = parse_dataset(&text);
    if lines.is_empty() {
        return Err(EvalError::NoRecords(path.display().to_string()));
    }
    Ok(lines)
}

pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

pub fn normalize_set<'a>(items: impl IntoIterator<Item = &'a str>) -> BTreeSet<String> {
    items.into_iter().map(normalize_answer).collect()
}

/// 1 when the sets overlap.
pub fn hits_at_1(pred: &BTreeSet<String>, gold: &BTreeSet<String>) -> f64 {
    if pred.intersection(gold).next().is_some() {
        1.0
    } else {
        0.0
    }
}

/// Set F1; 1 when both sets are empty, 0 when exactly one is.
pub fn f1(pred: &BTreeSet<String>, gold: &BTreeSet<String>) -> f64 {
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let inter = pred.intersection(gold).count() as f64;
    if inter == 0.0 {
        return 0.0;
    }
    let p = inter / pred.len() as f64;
    let r = inter / gold.len() as f64;
    2.0 * p * r / (p + r)
}

fn masked(crp: &Crp) -> Vec<(usize, String, ConstraintKind, Option<ComparisonOp>)> {
    let mut out: Vec<_> = crp
        .constraints
        .iter()
        .map(|c| {
            let op = match &c.value {
                ConstraintValue::Numeric(n) => Some(n.op()),
                _ => None,
            };
            (c.hop, c.relation.to_string(), c.kind(), op)
        })
        .collect();
    out.sort();
    out
}

/// Same main path and the same constraint multiset with payloads masked.
pub fn skeleton_accuracy(pred: &Crp, gold: &Crp) -> bool {
    pred.main_path == gold.main_path && masked(pred) == masked(gold)
}

pub fn exact_match(pred: &Crp, gold: &Crp) -> bool {
    pred.to_string() == gold.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRecord {
    #[serde(flatten)]
    pub result: ResultRecord,
    pub gold: Vec<String>,
    pub hits_at_1: f64,
    pub f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skeleton_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_match: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
    #[serde(skip)]
    pub calls: Vec<CallRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub questions: usize,
    pub flagged: usize,
    pub hits_at_1: f64,
    pub f1: f64,
    pub skeleton_accuracy: Option<f64>,
    pub exact_match: Option<f64>,
    pub avg_calls: f64,
    pub avg_prompt_tokens: f64,
    pub avg_completion_tokens: f64,
    pub avg_tokens: f64,
    pub total_cost_usd: f64,
    pub cost_per_10k_usd: f64,
    pub routes: BTreeMap<Route, usize>,
    pub relaxation_tiers: BTreeMap<String, usize>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct BatchOptions {
    pub workers: usize,
    pub include_trace: bool,
    pub stage2_only: bool,
    pub seed: u64,
    pub prices: PriceTable,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions { workers: 1, include_trace: false, stage2_only: false, seed: 42, prices: PriceTable::default() }
    }
}

#[derive(Debug, Clone)]
pub struct BatchReport {
    pub records: Vec<EvalRecord>,
    pub summary: Summary,
}

impl BatchReport {
    pub fn jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        s.push('\n');
        s
    }

    pub fn table(&self) -> String {
        let s = &self.summary;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        let rows = [
            ("questions", s.questions.to_string()),
            ("flagged", s.flagged.to_string()),
            ("hits@1", format!("{:.4}", s.hits_at_1)),
            ("f1", format!("{:.4}", s.f1)),
            ("skeleton_acc", opt(s.skeleton_accuracy)),
            ("exact_match", opt(s.exact_match)),
            ("avg_calls", format!("{:.4}", s.avg_calls)),
            ("avg_prompt_tokens", format!("{:.2}", s.avg_prompt_tokens)),
            ("avg_completion_tokens", format!("{:.2}", s.avg_completion_tokens)),
            ("avg_tokens", format!("{:.2}", s.avg_tokens)),
            ("cost_per_10k_usd", format!("{:.6}", s.cost_per_10k_usd)),
        ];
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v}");
        }
        for (route, n) in &s.routes {
            let _ = writeln!(out, "{:<width$}  {n}", format!("route:{}", route.as_str()));
        }
        out
    }
}

fn empty_result(id: &str, question: &str) -> ResultRecord {
    ResultRecord {
        id: id.into(),
        question: question.into(),
        route: Route::RepairFailedFallback,
        answers: Vec::new(),
        relaxation_tier: None,
        crp_initial: None,
        crp_final: None,
        llm_calls: 0,
        prompt_tokens: 0,
        completion_tokens: 0,
        trace: None,
    }
}

fn score_record(
    g: &KnowledgeGraph,
    rec: &DatasetRecord,
    providers: &Providers,
    cfg: &PipelineConfig,
    opts: &BatchOptions,
) -> EvalRecord {
    let mut flags = Vec::new();
    let mut gold_answers: BTreeSet<String> = normalize_set(rec.answers.iter().map(String::as_str));
    let mut gold_crp = None;
    if let Some(text) = &rec.sparql {
        match parse_sparql(text) {
            Ok(q) => {
                if gold_answers.is_empty() {
                    let derived: Vec<String> = execute_query(g, &q).iter().map(NodeRef::to_string).collect();
                    gold_answers = normalize_set(derived.iter().map(String::as_str));
                }
                match sparql_to_crp(&q) {
                    Ok(c) => gold_crp = Some(c),
                    Err(e) => flags.push(format!("gold sparql conversion: {e}")),
                }
            }
            Err(e) => flags.push(format!("gold sparql: {e}")),
        }
    }

    let result: Option<QuestionResult> = if opts.stage2_only {
        match (&rec.topic, rec.depth) {
            (Some(t), Some(d)) => Some(run_stage2_only(
                g,
                &rec.id,
                &rec.question,
                t,
                d,
                &providers.general,
                providers.embedder.as_ref(),
                cfg,
            )),
            _ => {
                flags.push("stage-2-only run needs topic and depth".into());
                None
            }
        }
    } else {
        Some(answer_question(g, &rec.id, &rec.question, providers, cfg))
    };

    let (record, calls, pred) = match &result {
        Some(r) => (r.record(opts.include_trace), r.calls.clone(), normalize_set(r.answer_strings().iter().map(String::as_str))),
        None => (empty_result(&rec.id, &rec.question), Vec::new(), BTreeSet::new()),
    };
    let (skel, em) = match &gold_crp {
        Some(gold) => {
            let initial = result.as_ref().and_then(|r| r.crp_initial.as_ref());
            let s = initial.is_some_and(|p| skeleton_accuracy(&p.canonical(), &gold.canonical()));
            let e = initial.is_some_and(|p| exact_match(p, gold));
            (Some(s as u8 as f64), Some(e as u8 as f64))
        }
        None => (None, None),
    };
    EvalRecord {
        result: record,
        gold: gold_answers.iter().cloned().collect(),
        hits_at_1: hits_at_1(&pred, &gold_answers),
        f1: f1(&pred, &gold_answers),
        skeleton_accuracy: skel,
        exact_match: em,
        flag: (!flags.is_empty()).then(|| flags.join("; ")),
        calls,
    }
}

fn flagged_record(id: &str, message: &str) -> EvalRecord {
    EvalRecord {
        result: empty_result(id, ""),
        gold: Vec::new(),
        hits_at_1: 0.0,
        f1: 0.0,
        skeleton_accuracy: None,
        exact_match: None,
        flag: Some(message.into()),
        calls: Vec::new(),
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn summarize(records: &[EvalRecord], opts: &BatchOptions) -> Summary {
    let n = records.len();
    let calls: Vec<CallRecord> = records.iter().flat_map(|r| r.calls.iter().copied()).collect();
    let ledger = ledger_summary(&calls, &opts.prices, n);
    let mut routes = BTreeMap::new();
    let mut tiers = BTreeMap::new();
    for r in records {
        *routes.entry(r.result.route).or_default() += 1;
        let tier = r.result.relaxation_tier.map(|t| t.to_string()).unwrap_or_else(|| "none".into());
        *tiers.entry(tier).or_default() += 1;
    }
    Summary {
        questions: n,
        flagged: records.iter().filter(|r| r.flag.is_some()).count(),
        hits_at_1: mean(records.iter().map(|r| r.hits_at_1)).unwrap_or(0.0),
        f1: mean(records.iter().map(|r| r.f1)).unwrap_or(0.0),
        skeleton_accuracy: mean(records.iter().filter_map(|r| r.skeleton_accuracy)),
        exact_match: mean(records.iter().filter_map(|r| r.exact_match)),
        avg_calls: ledger.avg_calls,
        avg_prompt_tokens: ledger.avg_prompt_tokens,
        avg_completion_tokens: ledger.avg_completion_tokens,
        avg_tokens: ledger.avg_tokens,
        total_cost_usd: ledger.total_cost_usd,
        cost_per_10k_usd: ledger.cost_per_10k_usd,
        routes,
        relaxation_tiers: tiers,
        seed: opts.seed,
    }
}

/// Answers and scores every line on a pool of `opts.workers` threads.
/// Records come back in dataset order regardless of the worker count.
pub fn run_batch(
    lines: &[DatasetLine],
    g: &KnowledgeGraph,
    providers: &Providers,
    cfg: &PipelineConfig,
    opts: &BatchOptions,
) -> Result<BatchReport, EvalError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    let records: Vec<EvalRecord> = pool.install(|| {
        lines
            .par_iter()
            .map(|line| match line {
                DatasetLine::Record(rec) => score_record(g, rec, providers, cfg, opts),
                DatasetLine::Flagged { id, line, message } => flagged_record(id, &format!("line {line}: {message}")),
            })
            .collect()
    });
    let summary = summarize(&records, opts);
    Ok(BatchReport { records, summary })
}
