//! `routerkgqa` command-line front end.
//!
//! Exit codes: 0 success, 1 when some records or conversions failed, 2 for
//! configuration and I/O errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use routerkgqa::config::Config;
use routerkgqa::crp::parse_crp;
use routerkgqa::eval::{load_dataset, run_batch, BatchOptions};
use routerkgqa::kg::KnowledgeGraph;
use routerkgqa::pipeline::{answer_question, run_stage2_only, Providers, QuestionResult};
use routerkgqa::providers::{CostLedger, MeteredLlm, Role};
use routerkgqa::repair::{repair, RepairRequest};
use routerkgqa::sparql::{crp_round_trip_check, crp_to_sparql, parse_sparql, render_sparql, round_trip_check, sparql_to_crp};

#[derive(Parser, Debug)]
#[command(name = "routerkgqa", version, about = "Knowledge-graph question answering with reachability routing and path repair")]
struct Cli {
    /// Configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Knowledge graph TSV; overrides `kg_path`.
    #[arg(long, global = true)]
    kg: Option<PathBuf>,
    /// Include the per-question event log in the output.
    #[arg(long, global = true)]
    trace: bool,
    /// Worker threads for batch evaluation; overrides `workers`.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Recorded in the summary; all tie-breaks are deterministic.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load the knowledge graph and print its statistics.
    LoadCheck,
    /// Answer one question.
    Ask {
        question: String,
        /// Skip CRP generation and repair from `--topic` at `--depth`.
        #[arg(long, requires_all = ["topic", "depth"])]
        stage2_only: bool,
        #[arg(long)]
        topic: Option<String>,
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Run a JSONL dataset and write results.jsonl and summary.json.
    Eval {
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use each record's `topic` and `depth` and skip CRP generation.
        #[arg(long)]
        stage2_only: bool,
    },
    /// Convert between CRP text and SPARQL, or check round trips.
    Convert {
        direction: Direction,
        input: PathBuf,
        output: PathBuf,
    },
    /// Run path repair alone and print the beam-search trace.
    RepairDemo {
        question: String,
        #[arg(long)]
        topic: String,
        #[arg(long)]
        depth: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Direction {
    Crp2sparql,
    Sparql2crp,
    Roundtrip,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::from_env()?,
    };
    if let Some(kg) = &cli.kg {
        cfg.kg_path = Some(kg.clone());
    }
    if let Some(w) = cli.workers {
        if w == 0 {
            bail!("--workers must be at least 1");
        }
        cfg.workers = w;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_kg(cfg: &Config) -> Result<KnowledgeGraph> {
    let path = cfg.kg_path.as_ref().context("missing configuration: kg_path (set it in the config or pass --kg)")?;
    Ok(KnowledgeGraph::load_tsv(path)?)
}

fn run(cli: Cli) -> Result<u8> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::LoadCheck => {
            let g = load_kg(&cfg)?;
            println!("triples: {}", g.triples().len());
            println!("entities: {}", g.entities().len());
            println!("relations: {}", g.relations().len());
            println!("aliases: {}", g.alias_count());
            println!("indexes: {}", if g.indexes_consistent() { "consistent" } else { "INCONSISTENT" });
            Ok(0)
        }
        Command::Ask { question, stage2_only, topic, depth } => {
            let g = load_kg(&cfg)?;
            let pipeline = cfg.pipeline();
            let result = if *stage2_only {
                let (topic, depth) = (topic.as_deref().unwrap_or_default(), depth.unwrap_or_default());
                run_stage2_only(&g, "ask", question, topic, depth, &cfg.general_llm()?, cfg.embedder()?.as_ref(), &pipeline)
            } else {
                let providers = Providers {
                    specialized: cfg.specialized_llm()?,
                    general: cfg.general_llm()?,
                    embedder: cfg.embedder()?,
                };
                answer_question(&g, "ask", question, &providers, &pipeline)
            };
            print!("{}", format_result(&result, cli.trace));
            Ok(0)
        }
        Command::Eval { dataset, out, stage2_only } => {
            let g = load_kg(&cfg)?;
            let lines = load_dataset(dataset)?;
            let general = cfg.general_llm()?;
            let specialized = if *stage2_only { general.clone() } else { cfg.specialized_llm()? };
            let providers = Providers { specialized, general, embedder: cfg.embedder()? };
            let opts = BatchOptions {
                workers: cfg.workers,
                include_trace: cli.trace,
                stage2_only: *stage2_only,
                seed: cfg.seed,
                prices: cfg.prices,
            };
            let report = run_batch(&lines, &g, &providers, &cfg.pipeline(), &opts)?;
            std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
            write(&out.join("results.jsonl"), &report.jsonl())?;
            write(&out.join("summary.json"), &report.summary_json())?;
            print!("{}", report.table());
            for r in report.records.iter().filter(|r| r.flag.is_some()) {
                eprintln!("flagged {}: {}", r.result.id, r.flag.as_deref().unwrap_or_default());
            }
            Ok(if report.summary.flagged > 0 { 1 } else { 0 })
        }
        Command::Convert { direction, input, output } => {
            let g = cli.kg.as_ref().map(KnowledgeGraph::load_tsv).transpose()?;
            let text = std::fs::read_to_string(input).with_context(|| format!("cannot read {}", input.display()))?;
            let (converted, failures) = convert(*direction, &text, &input.display().to_string(), g.as_ref());
            write(output, &converted)?;
            for f in &failures {
                eprintln!("{f}");
            }
            Ok(if failures.is_empty() { 0 } else { 1 })
        }
        Command::RepairDemo { question, topic, depth } => {
            let g = load_kg(&cfg)?;
            let topic_id = g.ground_entity(topic)?;
            let ledger = std::sync::Arc::new(CostLedger::new());
            let llm = MeteredLlm::new(cfg.general_llm()?, Role::General, 0.0, ledger.clone());
            let req = RepairRequest { question, topic: &topic_id, topic_name: topic, depth: *depth };
            let report = repair(&g, &req, &cfg.repair, &llm, cfg.embedder()?.as_ref());
            println!("blueprint: {}", report.trace.blueprint.join(" | "));
            let lines = report.trace.to_json_lines();
            if !lines.is_empty() {
                println!("{lines}");
            }
            match &report.outcome {
                Ok(p) => println!("path: {p}"),
                Err(e) => println!("failed: {e}"),
            }
            println!("llm_calls: {} (budget {})", report.llm_calls, report.effective_depth + 1);
            Ok(0)
        }
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn format_result(r: &QuestionResult, trace: bool) -> String {
    let rec = r.record(false);
    let mut out = String::new();
    out.push_str(&format!("route: {}\n", r.route.as_str()));
    out.push_str(&format!("answers: {{{}}}\n", rec.answers.join(", ")));
    let tier = r.relaxation_tier.map(|t| t.to_string()).unwrap_or_else(|| "-".into());
    out.push_str(&format!("relaxation_tier: {tier}\n"));
    out.push_str(&format!("llm_calls: {}\n", rec.llm_calls));
    out.push_str(&format!("tokens: {} prompt, {} completion\n", rec.prompt_tokens, rec.completion_tokens));
    if let Some(c) = &rec.crp_final {
        out.push_str("crp_final:\n");
        for line in c.lines() {
            out.push_str(&format!("  {line}\n"));
        }
    }
    if trace {
        out.push_str("trace:\n");
        for e in &r.trace {
            out.push_str(&serde_json::to_string(e).expect("trace serializes"));
            out.push('\n');
        }
    }
    out
}

/// Blank-line separated blocks with the 1-based line each starts on.
fn blocks(text: &str) -> Vec<(usize, String)> {
    let mut out = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    let mut start = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                out.push((start, cur.join("\n")));
                cur.clear();
            }
        } else {
            if cur.is_empty() {
                start = i + 1;
            }
            cur.push(line);
        }
    }
    if !cur.is_empty() {
        out.push((start, cur.join("\n")));
    }
    out
}

fn convert(direction: Direction, text: &str, origin: &str, g: Option<&KnowledgeGraph>) -> (String, Vec<String>) {
    let mut outputs = Vec::new();
    let mut failures = Vec::new();
    for (line, block) in blocks(text) {
        let at = format!("{origin}:{line}");
        match direction {
            Direction::Crp2sparql => {
                let result = parse_crp(&block).map_err(|e| e.to_string()).and_then(|mut crp| {
                    match g {
                        Some(g) => crp.ground(g),
                        None => crp.ground_by_symbol(),
                    }
                    .map_err(|e| e.to_string())?;
                    crp_to_sparql(&crp).map(|q| render_sparql(&q)).map_err(|e| e.to_string())
                });
                match result {
                    Ok(s) => outputs.push(s),
                    Err(e) => failures.push(format!("{at}: {e}")),
                }
            }
            Direction::Sparql2crp => {
                match parse_sparql(&block).and_then(|q| sparql_to_crp(&q)) {
                    Ok(c) => outputs.push(c.to_string()),
                    Err(e) => failures.push(format!("{at}: {e}")),
                }
            }
            Direction::Roundtrip => {
                let report = if block.trim_start().starts_with("TOPIC:") {
                    crp_round_trip_check(&block)
                } else {
                    round_trip_check(&block)
                };
                if report.ok {
                    outputs.push(format!("PASS {at}"));
                } else {
                    let why = match &report.error {
                        Some(e) => e.to_string(),
                        None => format!(
                            "regenerated form differs:\n{}\n--- vs ---\n{}",
                            report.source.as_deref().or(report.crp.as_deref()).unwrap_or_default(),
                            report.regenerated.as_deref().unwrap_or_default()
                        ),
                    };
                    outputs.push(format!("FAIL {at}: {why}"));
                    failures.push(format!("{at}: round trip failed"));
                }
            }
        }
    }
    let sep = if matches!(direction, Direction::Roundtrip) { "\n" } else { "\n\n" };
    let mut joined = outputs.join(sep);
    if !joined.is_empty() {
        joined.push('\n');
    }
    (joined, failures)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_blocks_with_line_numbers() {
        let b = blocks("a\nb\n\n\nc\n");
        assert_eq!(b, vec![(1, "a\nb".to_string()), (5, "c".to_string())]);
    }

    #[test]
    fn ask_requires_topic_and_depth_for_stage2() {
        assert!(Cli::try_parse_from(["routerkgqa", "ask", "q", "--stage2-only"]).is_err());
        assert!(Cli::try_parse_from(["routerkgqa", "ask", "q", "--stage2-only", "--topic", "USA", "--depth", "2"]).is_ok());
        assert!(Cli::try_parse_from(["routerkgqa", "--workers", "2", "eval", "d.jsonl", "--out", "o"]).is_ok());
        assert!(Cli::try_parse_from(["routerkgqa", "convert", "sideways", "a", "b"]).is_err());
    }
}
