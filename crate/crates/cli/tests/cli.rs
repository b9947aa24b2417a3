use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn fixture(rel: &str) -> String {
    fixtures().join(rel).display().to_string()
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_routerkgqa"))
        .args(args)
        .env_remove("ROUTERKGQA_KG_PATH")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn load_check_reports_counts() {
    let o = run(&["--kg", &fixture("presidents.tsv"), "load-check"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o), "triples: 12\nentities: 9\nrelations: 4\naliases: 9\nindexes: consistent\n");
}

#[test]
fn missing_kg_path_exits_2() {
    let o = run(&["load-check"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("kg_path"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.txt");
    std::fs::write(&cfg, "kg_path = x.tsv\nbeam = 3\n").unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "load-check"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("beam"), "{}", stderr(&o));
}

#[test]
fn ask_worked_example() {
    let o = run(&["--config", &fixture("eval3/config.txt"), "ask", "Which US presidents after 2000 went to Harvard?"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("route: Stage1Only\nanswers: {GWBush, Obama}\nrelaxation_tier: 0\nllm_calls: 1\n"), "{out}");
    assert!(out.contains("crp_final:\n  TOPIC: USA\n"), "{out}");
    assert!(!out.contains("trace:"));
}

#[test]
fn ask_trace_prints_json_events() {
    let o = run(&["--config", &fixture("eval3/config.txt"), "--trace", "ask", "Who held the US presidency?"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let events: Vec<&str> = out.split("trace:\n").nth(1).expect("trace section").lines().collect();
    assert!(events.iter().all(|l| l.starts_with("{\"event\":")), "{out}");
    assert!(events.iter().any(|l| l.starts_with("{\"event\":\"repair\"")));
    assert!(out.contains("route: Stage1Plus2\n"));
}

#[test]
fn ask_stage2_only_gives_skeleton_answers() {
    let o = run(&[
        "--config",
        &fixture("eval3/config.txt"),
        "ask",
        "Who held the US presidency?",
        "--stage2-only",
        "--topic",
        "USA",
        "--depth",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("route: Stage2Only\nanswers: {Clinton, GWBush, Obama}\n"), "{}", stdout(&o));
}

#[test]
fn ask_without_script_match_still_exits_0() {
    let o = run(&["--config", &fixture("eval3/config.txt"), "ask", "Something nobody scripted?"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("route: RepairFailedFallback\nanswers: {}\n"), "{}", stdout(&o));
}

#[test]
fn eval_writes_golden_outputs() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&[
        "--config",
        &fixture("eval3/config.txt"),
        "eval",
        &fixture("eval3/dataset.jsonl"),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("questions"));
    for name in ["results.jsonl", "summary.json"] {
        let got = std::fs::read_to_string(out.path().join(name)).unwrap();
        let want = std::fs::read_to_string(fixtures().join("eval3/golden").join(name)).unwrap();
        assert_eq!(got, want, "{name}");
    }
}

#[test]
fn eval_workers_do_not_change_metrics() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for (dir, workers) in [(&a, "1"), (&b, "4")] {
        let o = run(&[
            "--config",
            &fixture("routing20/config.txt"),
            "--workers",
            workers,
            "eval",
            &fixture("routing20/dataset.jsonl"),
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let read = |d: &tempfile::TempDir| std::fs::read_to_string(d.path().join("summary.json")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn eval_with_flagged_record_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let good = std::fs::read_to_string(fixtures().join("eval3/dataset.jsonl")).unwrap();
    std::fs::write(&data, format!("{good}{{\"id\": \"broken\"\n")).unwrap();
    let out = dir.path().join("out");
    let o = run(&["--config", &fixture("eval3/config.txt"), "eval", data.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stdout(&o).contains("flagged                1"), "{}", stdout(&o));
    assert_eq!(std::fs::read_to_string(out.join("results.jsonl")).unwrap().lines().count(), 4);
}

#[test]
fn eval_empty_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("empty.jsonl");
    std::fs::write(&data, "\n").unwrap();
    let out = dir.path().join("out");
    let o = run(&["--config", &fixture("eval3/config.txt"), "eval", data.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no records"), "{}", stderr(&o));
}

#[test]
fn convert_worked_example_both_directions() {
    let dir = tempfile::tempdir().unwrap();
    let crp = dir.path().join("crp.txt");
    let o = run(&["convert", "sparql2crp", &fixture("worked_example/query.rq"), crp.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let want = std::fs::read_to_string(fixtures().join("worked_example/crp.txt")).unwrap();
    assert_eq!(std::fs::read_to_string(&crp).unwrap(), want);

    let rq = dir.path().join("query.rq");
    let o = run(&["--kg", &fixture("presidents.tsv"), "convert", "crp2sparql", crp.to_str().unwrap(), rq.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let want = std::fs::read_to_string(fixtures().join("worked_example/query.rq")).unwrap();
    assert_eq!(std::fs::read_to_string(&rq).unwrap(), want);
}

#[test]
fn convert_roundtrip_corpus_passes() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.txt");
    let o = run(&["convert", "roundtrip", &fixture("sparql_corpus.rq"), report.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.lines().count() >= 30);
    assert!(text.lines().all(|l| l.starts_with("PASS ")), "{text}");
}

#[test]
fn convert_union_reports_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.rq");
    std::fs::write(
        &input,
        "SELECT ?x WHERE { :A :r ?x . }\n\nSELECT ?x WHERE { { :A :r ?x . } UNION { :A :s ?x . } }\n",
    )
    .unwrap();
    let out = dir.path().join("out.txt");
    let o = run(&["convert", "sparql2crp", input.to_str().unwrap(), out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("in.rq:3:") && err.contains("UNION"), "{err}");
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "TOPIC: A\nPATH: r\n");
}

#[test]
fn repair_demo_prints_trace_and_budget() {
    let o = run(&[
        "--config",
        &fixture("eval3/config.txt"),
        "repair-demo",
        "Who held the US presidency?",
        "--topic",
        "USA",
        "--depth",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("path: country.presidents -> president.office_holder\n"), "{out}");
    assert!(out.ends_with("llm_calls: 3 (budget 3)\n"), "{out}");
    assert_eq!(out.lines().filter(|l| l.starts_with("{\"depth\":")).count(), 2);
}

#[test]
fn bad_arguments_exit_2_from_clap() {
    let o = run(&["ask", "q", "--stage2-only"]);
    assert_eq!(o.status.code(), Some(2));
}
