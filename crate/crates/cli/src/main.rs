use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use cyclesql::adapter::{open_adapter, serve};
use cyclesql::dist::{coverage_report, fit, TemplateDistribution};
use cyclesql::eval::{evaluate, read_predictions, EvalConfig};
use cyclesql::exec::Semantics;
use cyclesql::fuzz::{randomize_db, FuzzConfig};
use cyclesql::sampler::{sample_batch, write_sampled, BatchConfig, EnvChoice, Sampler};
use cyclesql::schema::{load_corpus, load_schemas, write_corpus, CorpusExample, DatabaseEnv};
use cyclesql::synth::{
    build_adaptation_set, select_envs, synthesize, write_examples, Consistency, SynthMode, SynthRunConfig,
};
use cyclesql::{fixtures, Error};

#[derive(Parser)]
#[command(name = "cyclesql", version, about = "Sample, synthesize and score text-to-SQL data")]
struct Cli {
    /// Base seed; every random stream derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Directory holding `<db_id>/<db_id>.sqlite`. Defaults to `database/`
    /// next to the tables file.
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    /// Where fuzzed databases are written.
    #[arg(long, global = true)]
    scratch: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Count coarse templates in training corpora.
    Fit(FitArgs),
    /// Draw executable queries from a fitted distribution.
    Sample(SampleArgs),
    /// Generate utterances, parse them back and keep consistent pairs.
    Synth(SynthArgs),
    /// Score predictions with EM, EX and FX.
    Eval(EvalArgs),
    /// Write randomized copies of a database.
    FuzzDb(FuzzDbArgs),
    /// Serve a builtin adapter over stdin/stdout.
    #[command(hide = true)]
    ServeAdapter { spec: String },
    /// Write the small demo databases and corpora.
    #[command(hide = true)]
    Fixtures { out: PathBuf },
}

#[derive(Args, Serialize)]
struct FitArgs {
    #[arg(long)]
    tables: PathBuf,
    /// Training corpus; repeat to pool several.
    #[arg(long, required = true)]
    corpus: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Evaluation corpus to report template coverage on.
    #[arg(long)]
    eval: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct SampleArgs {
    #[arg(long)]
    tables: PathBuf,
    #[arg(long)]
    dist: PathBuf,
    /// Databases to sample in; repeat for several. Defaults to all.
    #[arg(long)]
    db: Vec<String>,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 1)]
    turns: usize,
    #[arg(long, default_value_t = cyclesql::sampler::DEFAULT_MAX_ATTEMPTS)]
    max_attempts: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum ConsistencyArg {
    Execution,
    StringMatch,
    None,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModeArg {
    Adapt,
    Syntrain,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SemanticsArg {
    Bag,
    Set,
}

impl From<SemanticsArg> for Semantics {
    fn from(s: SemanticsArg) -> Self {
        match s {
            SemanticsArg::Bag => Semantics::Bag,
            SemanticsArg::Set => Semantics::Set,
        }
    }
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long)]
    tables: PathBuf,
    #[arg(long)]
    dist: PathBuf,
    /// Utterance generator: `builtin:<name>` or `cmd:"<shell command>"`.
    #[arg(long)]
    generator: String,
    /// Semantic parser, same forms as --generator.
    #[arg(long)]
    parser: String,
    /// Attempts to make.
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, value_enum, default_value_t = ConsistencyArg::Execution)]
    consistency: ConsistencyArg,
    #[arg(long, value_enum, default_value_t = ModeArg::Adapt)]
    mode: ModeArg,
    /// Training corpus: its databases are the syntrain environments and its
    /// examples open the adaptation set.
    #[arg(long)]
    train_corpus: Option<PathBuf>,
    /// Inference databases for adapt mode. Defaults to every database not
    /// in the training corpus.
    #[arg(long)]
    db: Vec<String>,
    #[arg(long, default_value_t = 1)]
    turns: usize,
    /// Drop repeated (query, utterance) pairs from the adaptation set.
    #[arg(long)]
    dedup: bool,
    #[arg(long, default_value_t = 30)]
    adapter_timeout_secs: u64,
    #[arg(long, value_enum, default_value_t = SemanticsArg::Bag)]
    semantics: SemanticsArg,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    tables: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    /// One SQL query per line, aligned with the gold corpus.
    #[arg(long)]
    pred: PathBuf,
    /// Randomized databases per gold database; 0 disables FX.
    #[arg(long, default_value_t = 10)]
    fuzz_instances: usize,
    #[arg(long)]
    keep_fuzz_dbs: bool,
    #[arg(long, value_enum, default_value_t = SemanticsArg::Bag)]
    semantics: SemanticsArg,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct FuzzDbArgs {
    #[arg(long)]
    tables: PathBuf,
    #[arg(long)]
    db: String,
    #[arg(long, default_value_t = 10)]
    instances: usize,
    #[arg(long, default_value_t = 5)]
    rows_min: usize,
    #[arg(long, default_value_t = 50)]
    rows_max: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    subcommand: &'a str,
    config: Value,
    seed: u64,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    tool_version: &'static str,
    duration_secs: f64,
}

struct Ctx {
    seed: u64,
    data_root: Option<PathBuf>,
    scratch: PathBuf,
    started: Instant,
}

impl Ctx {
    fn envs(&self, tables: &Path) -> anyhow::Result<Vec<DatabaseEnv>> {
        let envs = load_schemas(tables)?;
        let root = match &self.data_root {
            Some(root) => Some(root.clone()),
            // fall back to databases stored beside the tables file
            None => {
                let dir = tables.parent().unwrap_or(Path::new(".")).to_path_buf();
                let missing = envs.iter().any(|e| !e.store_path.is_file());
                let beside = envs.iter().all(|e| e.clone().with_data_root(&dir).store_path.is_file());
                (missing && beside).then_some(dir)
            }
        };
        Ok(match root {
            Some(root) => envs.into_iter().map(|e| e.with_data_root(&root)).collect(),
            None => envs,
        })
    }

    fn manifest(
        &self,
        path: &Path,
        subcommand: &str,
        config: Value,
        inputs: Vec<PathBuf>,
        outputs: Vec<PathBuf>,
    ) -> anyhow::Result<()> {
        let m = RunManifest {
            subcommand,
            config,
            seed: self.seed,
            inputs,
            outputs,
            tool_version: env!("CARGO_PKG_VERSION"),
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        write_json(path, &m)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Manifest for a single output file: `<out>.manifest.json`.
fn manifest_for(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

/// Fails with an input error when a database file is missing, rather than
/// letting the sampler discard every draw.
fn require_stores(envs: &[DatabaseEnv]) -> anyhow::Result<()> {
    for e in envs {
        if !e.store_path.is_file() {
            return Err(Error::Io {
                path: e.store_path.clone(),
                source: std::io::Error::from(std::io::ErrorKind::NotFound),
            }
            .into());
        }
    }
    Ok(())
}

/// Error chain on one line, skipping causes already spelled out by the
/// message above them.
fn describe(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !out.contains(&c) {
            out = format!("{out}: {c}");
        }
    }
    out
}

fn pick(envs: &[DatabaseEnv], ids: &[String]) -> anyhow::Result<Vec<DatabaseEnv>> {
    ids.iter()
        .map(|id| {
            envs.iter()
                .find(|e| &e.db_id == id)
                .cloned()
                .ok_or_else(|| Error::Resolution(format!("database `{id}`")).into())
        })
        .collect()
}

fn run_fit(ctx: &Ctx, a: &FitArgs) -> anyhow::Result<()> {
    let envs = ctx.envs(&a.tables)?;
    let mut corpus: Vec<CorpusExample> = Vec::new();
    for p in &a.corpus {
        corpus.extend(load_corpus(p)?);
    }
    let dist = fit(&corpus, &envs)?;
    dist.save(&a.out)?;
    println!(
        "{} templates from {} examples ({} skipped)",
        dist.len(),
        corpus.len(),
        dist.skipped()
    );
    let mut config = json!(a);
    let mut inputs = vec![a.tables.clone()];
    inputs.extend(a.corpus.iter().cloned());
    if let Some(eval) = &a.eval {
        let report = coverage_report(&dist, &load_corpus(eval)?, &envs)?;
        println!(
            "coverage {:.4} ({} of {}, {} unparseable)",
            report.fraction, report.covered, report.total, report.unparseable
        );
        config["coverage"] = json!(report);
        inputs.push(eval.clone());
    }
    ctx.manifest(&manifest_for(&a.out), "fit", config, inputs, vec![a.out.clone()])
}

fn run_sample(ctx: &Ctx, a: &SampleArgs) -> anyhow::Result<()> {
    let all = ctx.envs(&a.tables)?;
    let dist = TemplateDistribution::load(&a.dist)?;
    let envs = if a.db.is_empty() { all } else { pick(&all, &a.db)? };
    require_stores(&envs)?;
    let cfg = BatchConfig {
        count: a.count,
        turns: a.turns,
        seed: ctx.seed,
        max_attempts: a.max_attempts,
        choice: if envs.len() == 1 {
            EnvChoice::Targeted
        } else {
            EnvChoice::Uniform
        },
    };
    let batch = sample_batch(&envs, &dist, &cfg)?;
    let flat: Vec<_> = batch.into_iter().flatten().collect();
    for q in &flat {
        let env = envs.iter().find(|e| e.db_id == q.env_id).expect("sampled env");
        Sampler::new(env).validate(q)?;
    }
    write_sampled(&a.out, &flat)?;
    println!("{} queries written to {}", flat.len(), a.out.display());
    ctx.manifest(
        &manifest_for(&a.out),
        "sample",
        json!(a),
        vec![a.tables.clone(), a.dist.clone()],
        vec![a.out.clone()],
    )
}

fn run_synth(ctx: &Ctx, a: &SynthArgs) -> anyhow::Result<()> {
    let all = ctx.envs(&a.tables)?;
    let dist = TemplateDistribution::load(&a.dist)?;
    let original = match &a.train_corpus {
        Some(p) => load_corpus(p)?,
        None => Vec::new(),
    };
    let train_ids: BTreeSet<String> = original.iter().map(|e| e.db_id.clone()).collect();
    let infer_ids: BTreeSet<String> = if a.db.is_empty() {
        all.iter()
            .map(|e| e.db_id.clone())
            .filter(|id| !train_ids.contains(id))
            .collect()
    } else {
        pick(&all, &a.db)?.into_iter().map(|e| e.db_id).collect()
    };
    let mode = match a.mode {
        ModeArg::Adapt => SynthMode::Adapt,
        ModeArg::Syntrain => SynthMode::Syntrain,
    };
    if mode == SynthMode::Syntrain && a.train_corpus.is_none() {
        bail!(Error::Domain("syntrain mode needs --train-corpus".into()));
    }
    let envs = select_envs(&all, &train_ids, &infer_ids, mode);
    require_stores(&envs)?;
    let cfg = SynthRunConfig {
        mode,
        consistency: match a.consistency {
            ConsistencyArg::Execution => Consistency::Execution,
            ConsistencyArg::StringMatch => Consistency::StringMatch,
            ConsistencyArg::None => Consistency::None,
        },
        target_count: a.count,
        seed: ctx.seed,
        generator: a.generator.clone(),
        parser: a.parser.clone(),
        turns: a.turns,
        semantics: a.semantics.into(),
        ..SynthRunConfig::default()
    };
    let timeout = Duration::from_secs(a.adapter_timeout_secs);
    let generator = open_adapter(&a.generator, timeout)?;
    let parser = if a.parser == a.generator && a.parser.starts_with("builtin:") {
        generator.clone()
    } else {
        open_adapter(&a.parser, timeout)?
    };
    let out = synthesize(&envs, &dist, parser.as_ref(), generator.as_ref(), &cfg)?;

    create_dir(&a.out_dir)?;
    let synth_path = a.out_dir.join("synth.jsonl");
    let summary_path = a.out_dir.join("summary.json");
    let corpus_path = a.out_dir.join("adaptation.json");
    write_examples(&synth_path, &out.examples)?;
    write_json(&summary_path, &out.summary)?;
    let adaptation = build_adaptation_set(&out.examples, &original, a.dedup);
    write_corpus(&corpus_path, &adaptation)?;
    println!(
        "{} attempts, {} kept (keep rate {:.4}); adaptation set has {} examples",
        out.summary.attempts,
        out.summary.kept,
        out.summary.keep_rate,
        adaptation.len()
    );
    let mut inputs = vec![a.tables.clone(), a.dist.clone()];
    inputs.extend(a.train_corpus.clone());
    ctx.manifest(
        &a.out_dir.join("manifest.json"),
        "synth",
        json!({"args": a, "run": cfg}),
        inputs,
        vec![synth_path, summary_path, corpus_path],
    )
}

fn run_eval(ctx: &Ctx, a: &EvalArgs) -> anyhow::Result<()> {
    let envs = ctx.envs(&a.tables)?;
    let gold = load_corpus(&a.gold)?;
    let preds = read_predictions(&a.pred)?;
    let cfg = EvalConfig {
        fuzz: (a.fuzz_instances > 0).then(|| FuzzConfig {
            instances: a.fuzz_instances,
            seed: ctx.seed,
            ..FuzzConfig::default()
        }),
        semantics: a.semantics.into(),
        keep_fuzz_dbs: a.keep_fuzz_dbs,
        ..EvalConfig::new(&ctx.scratch)
    };
    let out = evaluate(&gold, &preds, &envs, &cfg)?;
    create_dir(&a.out_dir)?;
    let report_path = a.out_dir.join("report.json");
    let text_path = a.out_dir.join("report.txt");
    let verdicts_path = a.out_dir.join("verdicts.jsonl");
    write_json(&report_path, &out.report)?;
    let text = out.report.render_text();
    std::fs::write(&text_path, &text).with_context(|| text_path.display().to_string())?;
    let lines: Vec<String> = out
        .verdicts
        .iter()
        .map(serde_json::to_string)
        .collect::<Result<_, _>>()?;
    std::fs::write(&verdicts_path, lines.join("\n") + "\n")
        .with_context(|| verdicts_path.display().to_string())?;
    print!("{text}");
    ctx.manifest(
        &a.out_dir.join("manifest.json"),
        "eval",
        json!({"args": a, "eval": cfg}),
        vec![a.tables.clone(), a.gold.clone(), a.pred.clone()],
        vec![report_path, text_path, verdicts_path],
    )
}

fn run_fuzz_db(ctx: &Ctx, a: &FuzzDbArgs) -> anyhow::Result<()> {
    let all = ctx.envs(&a.tables)?;
    let env = pick(&all, std::slice::from_ref(&a.db))?.remove(0);
    let cfg = FuzzConfig {
        instances: a.instances,
        rows_min: a.rows_min,
        rows_max: a.rows_max,
        seed: ctx.seed,
        ..FuzzConfig::default()
    };
    cfg.validate()?;
    create_dir(&a.out_dir)?;
    let mut outputs = Vec::new();
    for i in 0..cfg.instances {
        let inst = randomize_db(&env, &cfg, i, &a.out_dir)?;
        println!("{}", inst.store_path.display());
        outputs.push(inst.store_path);
    }
    ctx.manifest(
        &a.out_dir.join("manifest.json"),
        "fuzz-db",
        json!({"args": a, "fuzz": cfg}),
        vec![a.tables.clone()],
        outputs,
    )
}

fn write_fixtures(out: &Path) -> anyhow::Result<()> {
    let data = out.join("data");
    fixtures::write_fixture_dbs(&data)?;
    write_corpus(&out.join("train.json"), &fixtures::school_corpus())?;
    write_corpus(&out.join("dev.json"), &fixtures::school_dev_corpus())?;
    println!("tables: {}", data.join("tables.json").display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return 2;
    };
    match e {
        Error::SamplingExhausted { .. } | Error::Unfillable { .. } | Error::EmptyColumn { .. } => 3,
        Error::Adapter(_) | Error::Protocol(_) | Error::InvalidPrediction { .. } => 4,
        Error::Alignment { .. } => 5,
        Error::Execution(_) | Error::Timeout(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let ctx = Ctx {
        seed: cli.seed,
        data_root: cli.data_root.clone(),
        scratch: cli
            .scratch
            .clone()
            .unwrap_or_else(|| std::env::temp_dir().join(format!("cyclesql-{}", std::process::id()))),
        started: Instant::now(),
    };
    let result = match &cli.cmd {
        Cmd::Fit(a) => run_fit(&ctx, a),
        Cmd::Sample(a) => run_sample(&ctx, a),
        Cmd::Synth(a) => run_synth(&ctx, a),
        Cmd::Eval(a) => run_eval(&ctx, a),
        Cmd::FuzzDb(a) => run_fuzz_db(&ctx, a),
        Cmd::ServeAdapter { spec } => open_adapter(spec, Duration::from_secs(30))
            .and_then(|m| serve(m.as_ref(), std::io::stdin().lock(), std::io::stdout().lock()))
            .map_err(Into::into),
        Cmd::Fixtures { out } => write_fixtures(out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
