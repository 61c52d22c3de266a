//! Cycle-consistent synthesis: sample a query, have G describe it, have F
//! parse the description, keep the pair when the parse agrees with the
//! sample.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{generate_utterance, parse_utterance, ModelAdapter};
use crate::canon::{render, SqlAst};
use crate::dist::TemplateDistribution;
use crate::error::{Error, Result};
use crate::exec::{denotations_equal_with, Executor, Semantics, DEFAULT_TIMEOUT};
use crate::sampler::{choose_env, fillable_envs, EnvChoice, SampledRecord, Sampler, DEFAULT_MAX_ATTEMPTS};
use crate::schema::{CorpusExample, DatabaseEnv, Provenance};
use crate::seed::stream;

/// Attempts inspected before giving up on adapters that never answer.
pub const ABORT_WINDOW: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    /// Sample in the environments we want to adapt to.
    Adapt,
    /// Sample in the training environments (plain data augmentation).
    Syntrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Consistency {
    Execution,
    StringMatch,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureTag {
    AdapterError,
    InvalidPrediction,
    ExecError,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthRunConfig {
    pub mode: SynthMode,
    pub consistency: Consistency,
    /// Attempts, not kept examples. A multi-turn sequence spends one
    /// attempt per turn.
    pub target_count: usize,
    pub seed: u64,
    pub generator: String,
    pub parser: String,
    pub turns: usize,
    pub max_attempts: usize,
    #[serde(with = "millis")]
    pub exec_timeout: Duration,
    pub semantics: Semantics,
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

impl Default for SynthRunConfig {
    fn default() -> Self {
        SynthRunConfig {
            mode: SynthMode::Adapt,
            consistency: Consistency::Execution,
            target_count: 1000,
            seed: 0,
            generator: "builtin:perfect".into(),
            parser: "builtin:perfect".into(),
            turns: 1,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            exec_timeout: DEFAULT_TIMEOUT,
            semantics: Semantics::Bag,
        }
    }
}

impl SynthRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_count == 0 {
            return Err(Error::Domain("target_count must be at least 1".into()));
        }
        if self.turns == 0 {
            return Err(Error::Domain("turns must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizedExample {
    pub attempt: usize,
    pub env_id: String,
    /// 1-based turn within the sampled sequence.
    pub turn_index: u32,
    pub sampled: SampledRecord,
    pub utterance: String,
    pub reparsed_sql: Option<String>,
    pub exec_consistent: Option<bool>,
    pub em_consistent: Option<bool>,
    pub kept: bool,
    pub failure: Option<FailureTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSummary {
    pub attempts: usize,
    pub kept: usize,
    pub keep_rate: f64,
    pub failures: BTreeMap<FailureTag, usize>,
    /// Draws where the sampler itself gave up; they produce no record.
    pub sampling_failures: usize,
    pub skipped_envs: Vec<String>,
    pub config: SynthRunConfig,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub examples: Vec<SynthesizedExample>,
    pub summary: SynthSummary,
}

/// The environments a run may sample from: training ids for syntrain,
/// inference ids for adapt.
pub fn select_envs(
    envs: &[DatabaseEnv],
    train_ids: &BTreeSet<String>,
    infer_ids: &BTreeSet<String>,
    mode: SynthMode,
) -> Vec<DatabaseEnv> {
    let ids = match mode {
        SynthMode::Adapt => infer_ids,
        SynthMode::Syntrain => train_ids,
    };
    envs.iter().filter(|e| ids.contains(&e.db_id)).cloned().collect()
}

/// Does `q_prime` agree with `q` on `env` under `criterion`?
///
/// A `q_prime` that fails to execute disagrees.
pub fn check_consistency(q: &SqlAst, q_prime: &SqlAst, env: &DatabaseEnv, criterion: Consistency) -> bool {
    let mut exec = Executor::new(DEFAULT_TIMEOUT);
    match criterion {
        Consistency::None => true,
        Consistency::StringMatch => render(q) == render(q_prime),
        Consistency::Execution => {
            exec_agree(&mut exec, q, q_prime, env, Semantics::Bag).unwrap_or(false)
        }
    }
}

fn exec_agree(
    exec: &mut Executor,
    q: &SqlAst,
    q_prime: &SqlAst,
    env: &DatabaseEnv,
    semantics: Semantics,
) -> Result<bool> {
    let a = exec.execute(&render(q), env)?;
    let b = exec.execute(&render(q_prime), env)?;
    Ok(denotations_equal_with(&a, &b, semantics))
}

struct Worker<'e> {
    samplers: HashMap<String, Sampler<'e>>,
    exec: Executor,
}

/// One sampled sequence: its records, or the number of turns lost to a
/// sampling failure.
type Drawn = std::result::Result<Vec<SynthesizedExample>, usize>;

#[allow(clippy::too_many_arguments)]
fn attempt_sequence<'e>(
    w: &mut Worker<'e>,
    seq: usize,
    turns: usize,
    usable: &[&'e DatabaseEnv],
    dist: &TemplateDistribution,
    parser: &dyn ModelAdapter,
    generator: &dyn ModelAdapter,
    cfg: &SynthRunConfig,
) -> Drawn {
    let mut rng = stream(cfg.seed, seq as u64);
    let env = choose_env(usable, EnvChoice::Uniform, &mut rng);
    let sampler = w
        .samplers
        .entry(env.db_id.clone())
        .or_insert_with(|| Sampler::new(env));
    let queries = match sampler.sample_turn_sequence(dist, &mut rng, turns, cfg.max_attempts) {
        Ok(q) => q,
        Err(e) => {
            tracing::warn!(db = %env.db_id, error = %e, "sampling failed");
            return Err(turns);
        }
    };
    let mut out = Vec::with_capacity(queries.len());
    for (t, q) in queries.iter().enumerate() {
        let mut ex = SynthesizedExample {
            attempt: seq * cfg.turns + t,
            env_id: env.db_id.clone(),
            turn_index: t as u32 + 1,
            sampled: q.record(),
            utterance: String::new(),
            reparsed_sql: None,
            exec_consistent: None,
            em_consistent: None,
            kept: false,
            failure: None,
            message: None,
        };
        let prev = q.prev_ast.as_ref();
        let u = match generate_utterance(generator, &q.ast, env, prev) {
            Ok(u) => u,
            Err(e) => {
                ex.failure = Some(FailureTag::AdapterError);
                ex.message = Some(e.to_string());
                out.push(ex);
                continue;
            }
        };
        ex.utterance = u;
        let q_prime = match parse_utterance(parser, &ex.utterance, env, prev) {
            Ok(p) => p,
            Err(Error::InvalidPrediction { sql, message }) => {
                ex.reparsed_sql = Some(sql);
                ex.failure = Some(FailureTag::InvalidPrediction);
                ex.message = Some(message);
                out.push(ex);
                continue;
            }
            Err(e) => {
                ex.failure = Some(FailureTag::AdapterError);
                ex.message = Some(e.to_string());
                out.push(ex);
                continue;
            }
        };
        ex.reparsed_sql = Some(render(&q_prime));
        ex.em_consistent = Some(render(&q.ast) == render(&q_prime));
        match exec_agree(&mut w.exec, &q.ast, &q_prime, env, cfg.semantics) {
            Ok(same) => ex.exec_consistent = Some(same),
            Err(e) => {
                ex.exec_consistent = Some(false);
                ex.failure = Some(FailureTag::ExecError);
                ex.message = Some(e.to_string());
            }
        }
        ex.kept = match cfg.consistency {
            Consistency::None => true,
            Consistency::Execution => ex.exec_consistent == Some(true),
            Consistency::StringMatch => ex.em_consistent == Some(true),
        };
        out.push(ex);
    }
    Ok(out)
}

/// Runs `cfg.target_count` attempts over `envs`.
///
/// Attempts run in parallel but come back in attempt order, and each draws
/// from its own seed stream, so the output does not depend on the thread
/// count. Environments where no template fits are skipped and reported.
pub fn synthesize(
    envs: &[DatabaseEnv],
    dist: &TemplateDistribution,
    parser: &dyn ModelAdapter,
    generator: &dyn ModelAdapter,
    cfg: &SynthRunConfig,
) -> Result<SynthOutput> {
    cfg.validate()?;
    let usable = fillable_envs(envs, dist);
    let usable_ids: BTreeSet<&str> = usable.iter().map(|e| e.db_id.as_str()).collect();
    let skipped_envs: Vec<String> = envs
        .iter()
        .filter(|e| !usable_ids.contains(e.db_id.as_str()))
        .map(|e| e.db_id.clone())
        .collect();
    for id in &skipped_envs {
        tracing::warn!(db = %id, "no template fits; skipping environment");
    }
    if usable.is_empty() {
        return Err(Error::Unfillable {
            db_id: skipped_envs.join(","),
        });
    }
    let sequences = cfg.target_count.div_ceil(cfg.turns);
    let run = |range: std::ops::Range<usize>| -> Vec<Drawn> {
        range
            .into_par_iter()
            .map_init(
                || Worker {
                    samplers: HashMap::new(),
                    exec: Executor::new(cfg.exec_timeout),
                },
                |w, seq| {
                    let turns = cfg.turns.min(cfg.target_count - seq * cfg.turns);
                    attempt_sequence(w, seq, turns, &usable, dist, parser, generator, cfg)
                },
            )
            .collect()
    };

    let head_len = sequences.min(ABORT_WINDOW.div_ceil(cfg.turns));
    let mut drawn = run(0..head_len);
    let head: Vec<&SynthesizedExample> = drawn
        .iter()
        .filter_map(|d| d.as_ref().ok())
        .flatten()
        .take(ABORT_WINDOW)
        .collect();
    if !head.is_empty() && head.iter().all(|e| e.failure == Some(FailureTag::AdapterError)) {
        let sample = head[0].message.clone().unwrap_or_default();
        return Err(Error::Adapter(format!(
            "all of the first {} attempts failed in the adapters; first error: {sample}",
            head.len()
        )));
    }
    drawn.extend(run(head_len..sequences));

    let mut examples = Vec::with_capacity(cfg.target_count);
    let mut sampling_failures = 0;
    for d in drawn {
        match d {
            Ok(mut ex) => examples.append(&mut ex),
            Err(lost) => sampling_failures += lost,
        }
    }
    for ex in &examples {
        // sampling never leaves the permitted environments
        assert!(usable_ids.contains(ex.env_id.as_str()), "{}", ex.env_id);
    }
    let summary = summarize(&examples, sampling_failures, skipped_envs, cfg);
    Ok(SynthOutput { examples, summary })
}

pub fn summarize(
    examples: &[SynthesizedExample],
    sampling_failures: usize,
    skipped_envs: Vec<String>,
    cfg: &SynthRunConfig,
) -> SynthSummary {
    let mut failures = BTreeMap::new();
    for ex in examples {
        if let Some(tag) = ex.failure {
            *failures.entry(tag).or_insert(0) += 1;
        }
    }
    let attempts = examples.len() + sampling_failures;
    let kept = examples.iter().filter(|e| e.kept).count();
    SynthSummary {
        attempts,
        kept,
        keep_rate: if attempts == 0 { 0.0 } else { kept as f64 / attempts as f64 },
        failures,
        sampling_failures,
        skipped_envs,
        config: cfg.clone(),
    }
}

/// Original examples first, then every kept synthesized one, each tagged
/// with where it came from. With `dedup`, a synthesized example repeating
/// an earlier (query, utterance) pair is dropped.
pub fn build_adaptation_set(
    synthesized: &[SynthesizedExample],
    original: &[CorpusExample],
    dedup: bool,
) -> Vec<CorpusExample> {
    let mut out: Vec<CorpusExample> = original
        .iter()
        .cloned()
        .map(|mut e| {
            e.provenance = Some(Provenance::Original);
            e
        })
        .collect();
    let mut seen = BTreeSet::new();
    for ex in synthesized.iter().filter(|e| e.kept) {
        if dedup && !seen.insert((ex.env_id.as_str(), ex.sampled.sql.as_str(), ex.utterance.as_str())) {
            continue;
        }
        out.push(CorpusExample {
            db_id: ex.env_id.clone(),
            utterance: ex.utterance.clone(),
            gold_sql: ex.sampled.sql.clone(),
            prev_sql: ex.sampled.prev_sql.clone(),
            turn_index: ex.turn_index,
            provenance: Some(Provenance::Synthesized),
        });
    }
    out
}

pub fn write_examples(path: &Path, examples: &[SynthesizedExample]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for ex in examples {
        let line = serde_json::to_string(ex).map_err(|e| Error::format("synth output", e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_examples(path: &Path) -> Result<Vec<SynthesizedExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::format(format!("{} line {}", path.display(), i + 1), e.to_string()))
        })
        .collect()
}
