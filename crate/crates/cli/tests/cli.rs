use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Duration;

use cyclesql::adapter::conformance::check_conformance;
use cyclesql::canon::{parse_sql, render, CoarseTemplate};
use cyclesql::dist::TemplateDistribution;
use cyclesql::exec::{execute, DEFAULT_TIMEOUT};
use cyclesql::fixtures;
use cyclesql::sampler::read_sampled;
use cyclesql::schema::{load_corpus, load_schemas, write_corpus, CorpusExample, DatabaseEnv, Provenance};
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_cyclesql");

struct Work {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Work {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let out = run(&root, &["fixtures", root.to_str().unwrap()]);
        assert!(out.status.success());
        Work { _dir: dir, root }
    }

    fn p(&self, rel: &str) -> String {
        self.root.join(rel).to_str().unwrap().to_string()
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut full = vec![
            "--data-root".to_string(),
            self.p("data"),
            "--scratch".into(),
            self.p("scratch"),
        ];
        full.extend(args.iter().map(|s| s.to_string()));
        let refs: Vec<&str> = full.iter().map(String::as_str).collect();
        run(&self.root, &refs)
    }

    fn fit(&self) {
        let out = self.run(&[
            "fit",
            "--tables",
            &self.p("data/tables.json"),
            "--corpus",
            &self.p("train.json"),
            "--out",
            &self.p("dist.json"),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }

    fn envs(&self) -> Vec<DatabaseEnv> {
        load_schemas(&self.root.join("data/tables.json"))
            .unwrap()
            .into_iter()
            .map(|e| e.with_data_root(&self.root.join("data")))
            .collect()
    }
}

fn run(cwd: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).current_dir(cwd).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn fit_writes_counts_coverage_and_manifest() {
    let w = Work::new();
    let out = w.run(&[
        "fit",
        "--tables",
        &w.p("data/tables.json"),
        "--corpus",
        &w.p("train.json"),
        "--out",
        &w.p("dist.json"),
        "--eval",
        &w.p("dev.json"),
    ]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("coverage 0.5000"), "{}", stdout(&out));
    let dist = json(&w.root.join("dist.json"));
    let total: u64 = dist["unigram"]
        .as_array()
        .unwrap()
        .iter()
        .map(|u| u["count"].as_u64().unwrap())
        .sum();
    assert_eq!(total, fixtures::school_corpus().len() as u64);
    let m = json(&w.root.join("dist.json.manifest.json"));
    assert_eq!(m["subcommand"], "fit");
    assert_eq!(m["config"]["coverage"]["fraction"], 0.5);

    let missing = w.run(&[
        "fit",
        "--tables",
        &w.p("nope.json"),
        "--corpus",
        &w.p("train.json"),
        "--out",
        &w.p("d.json"),
    ]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn sample_writes_valid_queries() {
    let w = Work::new();
    w.fit();
    let tables = w.p("data/tables.json");
    let dist = w.p("dist.json");
    let sample = |extra: &[&str], out: &str| {
        let out = w.p(out);
        let mut args = vec![
            "sample", "--tables", &tables, "--dist", &dist, "--db", "school", "--out", &out,
        ];
        args.extend_from_slice(extra);
        w.run(&args)
    };
    let out = w.run(&[
        "--seed",
        "4",
        "sample",
        "--tables",
        &w.p("data/tables.json"),
        "--dist",
        &w.p("dist.json"),
        "--db",
        "school",
        "--count",
        "100",
        "--out",
        &w.p("s.jsonl"),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let envs = w.envs();
    let school = fixtures::env(&envs, "school");
    let recs = read_sampled(&w.root.join("s.jsonl")).unwrap();
    assert_eq!(recs.len(), 100);
    for r in &recs {
        assert!(!execute(&r.sql, school, DEFAULT_TIMEOUT).unwrap().is_empty());
    }
    assert!(w.root.join("s.jsonl.manifest.json").exists());

    let again = w.run(&[
        "--seed",
        "4",
        "--jobs",
        "1",
        "sample",
        "--tables",
        &w.p("data/tables.json"),
        "--dist",
        &w.p("dist.json"),
        "--db",
        "school",
        "--count",
        "100",
        "--out",
        &w.p("s2.jsonl"),
    ]);
    assert!(again.status.success());
    assert_eq!(
        std::fs::read(w.root.join("s.jsonl")).unwrap(),
        std::fs::read(w.root.join("s2.jsonl")).unwrap()
    );

    let turns = sample(&["--count", "10", "--turns", "2"], "t.jsonl");
    assert!(turns.status.success());
    let recs = read_sampled(&w.root.join("t.jsonl")).unwrap();
    assert_eq!(recs.len(), 20);
    for pair in recs.chunks(2) {
        assert!(pair[0].prev_sql.is_none());
        assert_eq!(pair[1].prev_sql.as_deref(), Some(pair[0].sql.as_str()));
    }
}

#[test]
fn sample_failures_have_distinct_exit_codes() {
    let w = Work::new();
    w.fit();
    let bad_root = run(
        &w.root,
        &[
            "--data-root",
            &w.p("nowhere"),
            "sample",
            "--tables",
            &w.p("data/tables.json"),
            "--dist",
            &w.p("dist.json"),
            "--db",
            "school",
            "--count",
            "3",
            "--out",
            &w.p("x.jsonl"),
        ],
    );
    assert_eq!(bad_root.status.code(), Some(2), "{}", stderr(&bad_root));

    let unknown = w.run(&[
        "sample",
        "--tables",
        &w.p("data/tables.json"),
        "--dist",
        &w.p("dist.json"),
        "--db",
        "atlantis",
        "--out",
        &w.p("x.jsonl"),
    ]);
    assert_eq!(unknown.status.code(), Some(2));

    // every number column of islands is null
    let mut d = TemplateDistribution::default();
    d.add(CoarseTemplate::parse("select key1 where number1 = val", 1).unwrap(), 1);
    d.save(&w.root.join("hard.json")).unwrap();
    let exhausted = w.run(&[
        "sample",
        "--tables",
        &w.p("data/tables.json"),
        "--dist",
        &w.p("hard.json"),
        "--db",
        "islands",
        "--count",
        "2",
        "--max-attempts",
        "20",
        "--out",
        &w.p("x.jsonl"),
    ]);
    assert_eq!(exhausted.status.code(), Some(3), "{}", stderr(&exhausted));
}

fn synth(w: &Work, pair: &str, extra: &[&str], out: &str) -> (Output, Value) {
    let tables = w.p("data/tables.json");
    let dist = w.p("dist.json");
    let out_dir = w.p(out);
    let train = w.p("train.json");
    let mut args = vec![
        "--seed",
        "11",
        "synth",
        "--tables",
        &tables,
        "--dist",
        &dist,
        "--db",
        "school",
        "--generator",
        pair,
        "--parser",
        pair,
        "--count",
        "300",
        "--out-dir",
        &out_dir,
        "--train-corpus",
        &train,
    ];
    args.extend_from_slice(extra);
    let o = w.run(&args);
    let summary = std::fs::read_to_string(w.root.join(out).join("summary.json"))
        .ok()
        .map(|s| serde_json::from_str(&s).unwrap())
        .unwrap_or(Value::Null);
    (o, summary)
}

#[test]
fn synth_keep_rates_and_outputs() {
    let w = Work::new();
    w.fit();
    let (o, perfect) = synth(&w, "builtin:perfect", &[], "p");
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(perfect["keep_rate"], 1.0);
    assert_eq!(perfect["attempts"], 300);
    let corpus = load_corpus(&w.root.join("p/adaptation.json")).unwrap();
    let n_train = fixtures::school_corpus().len();
    assert_eq!(corpus.len(), n_train + 300);
    assert!(corpus[..n_train]
        .iter()
        .all(|e| e.provenance == Some(Provenance::Original)));
    assert!(w.root.join("p/manifest.json").exists());
    let lines = std::fs::read_to_string(w.root.join("p/synth.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 300);

    let (_, lossy) = synth(&w, "builtin:lossy", &[], "l");
    assert!(lossy["keep_rate"].as_f64().unwrap() < 0.2);
    let (_, none) = synth(&w, "builtin:lossy", &["--consistency", "none"], "n");
    assert!(none["kept"].as_u64().unwrap() >= lossy["kept"].as_u64().unwrap());
    let (_, em) = synth(&w, "builtin:corrupting", &["--consistency", "string-match"], "e");
    let (_, ex) = synth(&w, "builtin:corrupting", &[], "x");
    assert!(ex["kept"].as_u64().unwrap() >= em["kept"].as_u64().unwrap());
}

#[test]
fn synth_adapter_failures_exit_4() {
    let w = Work::new();
    w.fit();
    let (o, _) = synth(&w, "cmd:\"definitely-not-a-program-xyz\"", &[], "f");
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let (o, _) = synth(&w, "builtin:oracle", &[], "g");
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn synth_through_a_subprocess_matches_the_builtin() {
    let w = Work::new();
    w.fit();
    let spec = format!("cmd:\"{BIN} serve-adapter builtin:perfect\"");
    let (o, sub) = synth(&w, &spec, &[], "sub");
    assert!(o.status.success(), "{}", stderr(&o));
    let (_, builtin) = synth(&w, "builtin:perfect", &[], "bi");
    assert_eq!(sub["keep_rate"], 1.0);
    assert_eq!(sub["kept"], builtin["kept"]);
    assert_eq!(
        std::fs::read(w.root.join("sub/adaptation.json")).unwrap(),
        std::fs::read(w.root.join("bi/adaptation.json")).unwrap()
    );
}

#[test]
fn serve_adapter_passes_conformance() {
    let w = Work::new();
    let envs = w.envs();
    let school = fixtures::env(&envs, "school");
    let queries: Vec<String> = fixtures::school_corpus()
        .iter()
        .filter(|e| e.db_id == "school")
        .map(|e| render(&parse_sql(&e.gold_sql, school).unwrap()))
        .collect();
    let report = check_conformance(
        &format!("{BIN} serve-adapter builtin:perfect"),
        school,
        &queries,
        Duration::from_secs(20),
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.checks);
    for (q, _, back) in &report.round_trips {
        let back = parse_sql(back.as_ref().unwrap(), school).unwrap();
        assert_eq!(&render(&back), q);
    }
}

#[test]
fn eval_reports_and_exit_codes() {
    let w = Work::new();
    let golds = load_corpus(&w.root.join("train.json")).unwrap();
    let write_preds = |name: &str, lines: Vec<String>| {
        std::fs::write(w.root.join(name), lines.join("\n") + "\n").unwrap();
    };
    write_preds("gold.txt", golds.iter().map(|g| g.gold_sql.clone()).collect());
    write_preds("ones.txt", vec!["select 1".into(); golds.len()]);
    write_preds("short.txt", vec!["select 1".into(); 2]);
    let tables = w.p("data/tables.json");
    let gold = w.p("train.json");
    let eval = |pred: &str, out: &str, extra: &[&str]| {
        let pred = w.p(pred);
        let out = w.p(out);
        let mut args = vec![
            "eval", "--tables", &tables, "--gold", &gold, "--pred", &pred, "--out-dir", &out,
        ];
        args.extend_from_slice(extra);
        w.run(&args)
    };

    let o = eval("gold.txt", "e1", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&w.root.join("e1/report.json"));
    for m in ["em", "ex", "fx"] {
        assert_eq!(r["overall"][m].as_f64(), Some(1.0), "{m}");
    }
    assert!(w.root.join("e1/report.txt").exists());
    assert!(w.root.join("e1/manifest.json").exists());
    let verdicts = std::fs::read_to_string(w.root.join("e1/verdicts.jsonl")).unwrap();
    assert_eq!(verdicts.lines().count(), golds.len());

    let o = eval("ones.txt", "e2", &[]);
    assert!(o.status.success());
    let r = json(&w.root.join("e2/report.json"));
    assert!(r["overall"]["fx"].as_f64().unwrap() <= r["overall"]["ex"].as_f64().unwrap());

    let o = eval("gold.txt", "e3", &["--fuzz-instances", "0"]);
    assert!(o.status.success());
    let r = json(&w.root.join("e3/report.json"));
    assert!(r["overall"].get("fx").is_none());
    assert!(!stdout(&o).contains("FX"));

    let o = eval("short.txt", "e4", &[]);
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn fuzz_db_writes_instances() {
    let w = Work::new();
    let o = w.run(&[
        "fuzz-db",
        "--tables",
        &w.p("data/tables.json"),
        "--db",
        "school",
        "--instances",
        "3",
        "--out-dir",
        &w.p("fz"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let paths: Vec<&str> = out.lines().collect();
    assert_eq!(paths.len(), 3);
    assert!(paths.iter().all(|p| Path::new(p).exists()));
    let m = json(&w.root.join("fz/manifest.json"));
    assert_eq!(m["outputs"].as_array().unwrap().len(), 3);
}

#[test]
fn deduplicated_adaptation_corpus_reloads() {
    let w = Work::new();
    w.fit();
    let (o, _) = synth(&w, "builtin:corrupting", &["--dedup"], "d");
    assert!(o.status.success());
    let c: Vec<CorpusExample> = load_corpus(&w.root.join("d/adaptation.json")).unwrap();
    write_corpus(&w.root.join("copy.json"), &c).unwrap();
    assert_eq!(load_corpus(&w.root.join("copy.json")).unwrap(), c);
}
