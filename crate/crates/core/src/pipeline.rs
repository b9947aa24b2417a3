//! End-to-end question answering: CRP generation, reachability routing,
//! repair when the main path is unreachable, and execution with relaxation.
//!
//! Every question gets its own cost ledger, so a result's call records cover
//! exactly that question. Failures never abort: they end in
//! `RepairFailedFallback` with an empty answer set and the cause in the trace.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::Serialize;

use crate::crp::{parse_crp, Crp};
use crate::executor::{execute_full_traced, execute_skeleton, execute_with_relaxation, NonComparableLiteral};
use crate::kg::{KnowledgeGraph, NodeRef};
use crate::providers::{prompts, CallRecord, CostLedger, EmbeddingProvider, LlmProvider, MeteredLlm, Role};
use crate::repair::{repair, RepairConfig, RepairRequest, RepairTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Route {
    Stage1Only,
    Stage1Plus2,
    Stage2Only,
    RepairFailedFallback,
}

impl Route {
    pub fn as_str(self) -> &'static str {
        match self {
            Route::Stage1Only => "Stage1Only",
            Route::Stage1Plus2 => "Stage1Plus2",
            Route::Stage2Only => "Stage2Only",
            Route::RepairFailedFallback => "RepairFailedFallback",
        }
    }
}

#[derive(Clone)]
pub struct Providers {
    pub specialized: Arc<dyn LlmProvider>,
    pub general: Arc<dyn LlmProvider>,
    pub embedder: Arc<dyn EmbeddingProvider>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub repair: RepairConfig,
    pub relaxation: bool,
    pub temperature: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { repair: RepairConfig::default(), relaxation: true, temperature: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Stage1Reply { reply: String },
    Stage1Error { error: String },
    Skeleton { path: String, answers: usize },
    Repair { depth: usize, calls: usize, trace: RepairTrace },
    RepairFailed { error: String },
    RepairedPathUnchanged { path: String },
    ConstraintDropped { constraint: String },
    Execution { tier: u8, answers: usize, warnings: Vec<NonComparableLiteral> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuestionResult {
    pub id: String,
    pub question: String,
    pub route: Route,
    pub answers: BTreeSet<NodeRef>,
    /// `None` when nothing was executed.
    pub relaxation_tier: Option<u8>,
    pub crp_initial: Option<Crp>,
    pub crp_final: Option<Crp>,
    pub calls: Vec<CallRecord>,
    pub trace: Vec<TraceEvent>,
}

/// One JSONL line of batch output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRecord {
    pub id: String,
    pub question: String,
    pub route: Route,
    pub answers: Vec<String>,
    pub relaxation_tier: Option<u8>,
    pub crp_initial: Option<String>,
    pub crp_final: Option<String>,
    pub llm_calls: usize,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<TraceEvent>>,
}

impl QuestionResult {
    pub fn answer_strings(&self) -> Vec<String> {
        let set: BTreeSet<String> = self.answers.iter().map(NodeRef::to_string).collect();
        set.into_iter().collect()
    }

    pub fn record(&self, include_trace: bool) -> ResultRecord {
        ResultRecord {
            id: self.id.clone(),
            question: self.question.clone(),
            route: self.route,
            answers: self.answer_strings(),
            relaxation_tier: self.relaxation_tier,
            crp_initial: self.crp_initial.as_ref().map(Crp::to_string),
            crp_final: self.crp_final.as_ref().map(Crp::to_string),
            llm_calls: self.calls.len(),
            prompt_tokens: self.calls.iter().map(|c| c.usage.prompt_tokens).sum(),
            completion_tokens: self.calls.iter().map(|c| c.usage.completion_tokens).sum(),
            trace: include_trace.then(|| self.trace.clone()),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Stage1Error {
    #[error("cannot parse CRP from reply {excerpt:?}: {source}")]
    CrpParse { excerpt: String, source: crate::crp::CrpError },
    #[error(transparent)]
    Grounding(#[from] crate::kg::KgError),
    #[error(transparent)]
    Provider(#[from] crate::providers::ProviderError),
}

/// Renders the generation prompt, makes one specialized call, parses and
/// grounds the reply.
pub fn run_stage1(specialized: &MeteredLlm, g: &KnowledgeGraph, question: &str) -> Result<(Crp, String), Stage1Error> {
    let reply = specialized.call(&prompts::crp_generation(question))?.text;
    let mut crp = parse_crp(reply.trim())
        .map_err(|source| Stage1Error::CrpParse { excerpt: reply.chars().take(80).collect(), source })?;
    crp.ground(g)?;
    Ok((crp, reply))
}

struct Run {
    result: QuestionResult,
    ledger: Arc<CostLedger>,
}

impl Run {
    fn new(id: &str, question: &str) -> Self {
        Run {
            result: QuestionResult {
                id: id.to_string(),
                question: question.to_string(),
                route: Route::RepairFailedFallback,
                answers: BTreeSet::new(),
                relaxation_tier: None,
                crp_initial: None,
                crp_final: None,
                calls: Vec::new(),
                trace: Vec::new(),
            },
            ledger: Arc::new(CostLedger::new()),
        }
    }

    fn metered(&self, provider: &Arc<dyn LlmProvider>, role: Role, cfg: &PipelineConfig) -> MeteredLlm {
        MeteredLlm::new(provider.clone(), role, cfg.temperature, self.ledger.clone())
    }

    fn execute(&mut self, g: &KnowledgeGraph, crp: Crp, cfg: &PipelineConfig) {
        let outcome = if cfg.relaxation {
            execute_with_relaxation(g, &crp).map(|a| (a, Vec::new()))
        } else {
            execute_full_traced(g, &crp).map(|(a, e)| (a, e.warnings))
        };
        match outcome {
            Ok((answers, warnings)) => {
                self.result.trace.push(TraceEvent::Execution {
                    tier: answers.relaxation_tier,
                    answers: answers.answers.len(),
                    warnings,
                });
                self.result.answers = answers.answers;
                self.result.relaxation_tier = Some(answers.relaxation_tier);
                self.result.crp_final = Some(crp);
            }
            Err(e) => {
                self.result.route = Route::RepairFailedFallback;
                self.result.trace.push(TraceEvent::RepairFailed { error: e.to_string() });
            }
        }
    }

    fn finish(mut self) -> QuestionResult {
        self.result.calls = self.ledger.records();
        self.result
    }
}

/// Stage 1, routing on main-path reachability, Stage 2 when unreachable,
/// then execution.
pub fn answer_question(
    g: &KnowledgeGraph,
    id: &str,
    question: &str,
    providers: &Providers,
    cfg: &PipelineConfig,
) -> QuestionResult {
    let mut run = Run::new(id, question);
    let specialized = run.metered(&providers.specialized, Role::Specialized, cfg);
    let crp = match run_stage1(&specialized, g, question) {
        Ok((crp, reply)) => {
            run.result.trace.push(TraceEvent::Stage1Reply { reply });
            crp
        }
        Err(e) => {
            run.result.trace.push(TraceEvent::Stage1Error { error: e.to_string() });
            return run.finish();
        }
    };
    run.result.crp_initial = Some(crp.clone());
    let topic = crp.topic_entity.clone().expect("stage 1 grounds the topic");
    let skeleton = execute_skeleton(g, &topic, &crp.main_path);
    run.result.trace.push(TraceEvent::Skeleton { path: crp.main_path.to_string(), answers: skeleton.len() });
    if !skeleton.is_empty() {
        run.result.route = Route::Stage1Only;
        run.execute(g, crp, cfg);
        return run.finish();
    }

    let general = run.metered(&providers.general, Role::General, cfg);
    let req = RepairRequest { question, topic: &topic, topic_name: &crp.topic_surface, depth: crp.predicted_depth() };
    let report = repair(g, &req, &cfg.repair, &general, providers.embedder.as_ref());
    run.result.trace.push(TraceEvent::Repair {
        depth: report.effective_depth,
        calls: report.llm_calls,
        trace: report.trace.clone(),
    });
    let path = match report.outcome {
        Ok(p) => p,
        Err(e) => {
            run.result.trace.push(TraceEvent::RepairFailed { error: e.to_string() });
            return run.finish();
        }
    };
    if path == crp.main_path {
        log::warn!("repaired path equals the unreachable original: {path}");
        run.result.trace.push(TraceEvent::RepairedPathUnchanged { path: path.to_string() });
    }
    let mut repaired = crp.with_main_path(path);
    let depth = repaired.main_path.len();
    let (kept, dropped): (Vec<_>, Vec<_>) = repaired.constraints.drain(..).partition(|c| c.hop <= depth);
    for c in dropped {
        run.result.trace.push(TraceEvent::ConstraintDropped { constraint: c.to_string() });
    }
    repaired.constraints = kept;
    run.result.route = Route::Stage1Plus2;
    run.execute(g, repaired, cfg);
    run.finish()
}

/// Repair from scratch with an externally supplied topic and depth, without
/// the specialized model. Answers are the repaired path's skeleton.
pub fn run_stage2_only(
    g: &KnowledgeGraph,
    id: &str,
    question: &str,
    topic_surface: &str,
    depth: usize,
    general: &Arc<dyn LlmProvider>,
    embedder: &dyn EmbeddingProvider,
    cfg: &PipelineConfig,
) -> QuestionResult {
    let mut run = Run::new(id, question);
    let topic = match g.ground_entity(topic_surface) {
        Ok(t) => t,
        Err(e) => {
            run.result.trace.push(TraceEvent::RepairFailed { error: e.to_string() });
            return run.finish();
        }
    };
    let general = run.metered(general, Role::General, cfg);
    let req = RepairRequest { question, topic: &topic, topic_name: topic_surface.trim(), depth };
    let report = repair(g, &req, &cfg.repair, &general, embedder);
    run.result.trace.push(TraceEvent::Repair {
        depth: report.effective_depth,
        calls: report.llm_calls,
        trace: report.trace.clone(),
    });
    match report.outcome {
        Ok(path) => {
            let mut crp = Crp::new(topic_surface.trim(), path, Vec::new()).expect("no constraints to validate");
            crp.topic_entity = Some(topic);
            run.result.route = Route::Stage2Only;
            run.execute(g, crp, cfg);
        }
        Err(e) => run.result.trace.push(TraceEvent::RepairFailed { error: e.to_string() }),
    }
    run.finish()
}
