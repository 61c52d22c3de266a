//! Scoring predictions against gold: exact match over value-stripped
//! templates (EM), execution on the original database (EX), and execution
//! across fuzzed instances (FX).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canon::{em_key, parse_sql, Cond, Expr, Query, SqlAst};
use crate::error::{Error, Result};
use crate::exec::{denotations_equal_with, Executor, Semantics, DEFAULT_TIMEOUT};
use crate::fuzz::{fuzz_match_with, FuzzBank, FuzzConfig};
use crate::schema::{CorpusExample, DatabaseEnv};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
    Extra,
}

impl Difficulty {
    pub const ALL: [Difficulty; 4] = [
        Difficulty::Easy,
        Difficulty::Medium,
        Difficulty::Hard,
        Difficulty::Extra,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
            Difficulty::Extra => "extra",
        }
    }
}

/// The signals difficulty is scored from, counted over every query level.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RubricCounts {
    /// Distinct kinds present among group by, order by, limit, set
    /// operation, nested subquery and having.
    pub components: usize,
    /// Comparison leaves in where and having clauses.
    pub conditions: usize,
    pub aggregates: usize,
    pub selections: usize,
    pub nested: bool,
}

fn count_aggs<C>(e: &Expr<C>) -> usize {
    match e {
        Expr::Agg { arg, .. } => 1 + count_aggs(arg),
        Expr::Arith { left, right, .. } => count_aggs(left) + count_aggs(right),
        _ => 0,
    }
}

fn subqueries<C>(q: &Query<C>) -> Vec<&Query<C>> {
    fn expr<'a, C>(e: &'a Expr<C>, out: &mut Vec<&'a Query<C>>) {
        match e {
            Expr::Subquery(q) => out.push(q),
            Expr::Agg { arg, .. } => expr(arg, out),
            Expr::Arith { left, right, .. } => {
                expr(left, out);
                expr(right, out);
            }
            Expr::List(items) => items.iter().for_each(|i| expr(i, out)),
            _ => {}
        }
    }
    fn cond<'a, C>(c: &'a Cond<C>, out: &mut Vec<&'a Query<C>>) {
        match c {
            Cond::And(v) | Cond::Or(v) => v.iter().for_each(|c| cond(c, out)),
            Cond::Cmp { left, right, .. } => {
                expr(left, out);
                expr(right, out);
            }
            Cond::Between { expr: e, low, high } => {
                expr(e, out);
                expr(low, out);
                expr(high, out);
            }
        }
    }
    let mut out = Vec::new();
    q.select.iter().for_each(|e| expr(e, &mut out));
    if let Some(c) = &q.where_ {
        cond(c, &mut out);
    }
    if let Some(c) = &q.having {
        cond(c, &mut out);
    }
    out
}

pub fn rubric_counts(ast: &SqlAst) -> RubricCounts {
    let mut kinds = [false; 6];
    let mut counts = RubricCounts::default();
    let mut stack = vec![ast];
    while let Some(q) = stack.pop() {
        kinds[0] |= !q.group_by.is_empty();
        kinds[1] |= !q.order_by.is_empty();
        kinds[2] |= q.limit.is_some();
        kinds[3] |= q.set_op.is_some();
        kinds[4] |= q.has_nested_subquery();
        kinds[5] |= q.having.is_some();
        counts.conditions += q.where_.as_ref().map_or(0, Cond::leaf_count)
            + q.having.as_ref().map_or(0, Cond::leaf_count);
        counts.aggregates += q.select.iter().map(count_aggs).sum::<usize>()
            + q.order_by.iter().map(|o| count_aggs(&o.expr)).sum::<usize>();
        counts.selections += q.select.len();
        if let Some((_, rhs)) = &q.set_op {
            stack.push(rhs);
        }
        stack.extend(subqueries(q));
    }
    counts.nested = kinds[4];
    counts.components = kinds.iter().filter(|k| **k).count();
    counts
}

/// Scores a query into one of four classes. Rules are checked from the
/// hardest class down: extra (3+ components, or 2 with 3+ conditions),
/// hard (2 components or any nesting), easy (at most one component,
/// condition and aggregate), and medium for the rest.
pub fn classify_difficulty(ast: &SqlAst) -> Difficulty {
    let c = rubric_counts(ast);
    if c.components >= 3 || (c.components >= 2 && c.conditions >= 3) {
        Difficulty::Extra
    } else if c.components == 2 || c.nested {
        Difficulty::Hard
    } else if c.components <= 1 && c.conditions <= 1 && c.aggregates <= 1 {
        Difficulty::Easy
    } else {
        Difficulty::Medium
    }
}

/// Exact match over value-stripped canonical templates. An unparseable
/// prediction is simply wrong; an unparseable gold is an error.
pub fn em_match(gold: &str, pred: &str, env: &DatabaseEnv) -> Result<bool> {
    let g = em_key(gold, env).map_err(|e| Error::Gold(format!("{gold}: {e}")))?;
    Ok(em_key(pred, env).is_ok_and(|p| p == g))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// `None` turns FX off.
    pub fuzz: Option<FuzzConfig>,
    pub semantics: Semantics,
    pub scratch: PathBuf,
    pub keep_fuzz_dbs: bool,
    #[serde(skip, default = "default_timeout")]
    pub timeout: Duration,
}

fn default_timeout() -> Duration {
    DEFAULT_TIMEOUT
}

impl EvalConfig {
    pub fn new(scratch: impl Into<PathBuf>) -> Self {
        EvalConfig {
            fuzz: Some(FuzzConfig::default()),
            semantics: Semantics::Bag,
            scratch: scratch.into(),
            keep_fuzz_dbs: false,
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub em_correct: usize,
    pub ex_correct: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fx_correct: Option<usize>,
    pub em: f64,
    pub ex: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fx: Option<f64>,
}

impl Metrics {
    fn add(&mut self, v: &ExampleVerdict) {
        self.count += 1;
        self.em_correct += usize::from(v.em);
        self.ex_correct += usize::from(v.ex);
        if let Some(fx) = v.fx {
            *self.fx_correct.get_or_insert(0) += usize::from(fx);
        }
    }

    fn finish(&mut self) {
        let frac = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        self.em = frac(self.em_correct, self.count);
        self.ex = frac(self.ex_correct, self.count);
        self.fx = self.fx_correct.map(|n| frac(n, self.count));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleVerdict {
    pub index: usize,
    pub db_id: String,
    pub difficulty: Difficulty,
    pub turn_index: u32,
    pub em: bool,
    pub ex: bool,
    /// Only true when the prediction also matches on the original database.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fx: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fuzz_instances: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldFailure {
    pub index: usize,
    pub db_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Metrics,
    pub by_difficulty: BTreeMap<Difficulty, Metrics>,
    pub by_turn: BTreeMap<String, Metrics>,
    /// Examples left out of every metric because the gold query is unusable.
    pub gold_errors: Vec<GoldFailure>,
    pub config: EvalConfig,
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub verdicts: Vec<ExampleVerdict>,
}

pub fn turn_bucket(turn_index: u32) -> String {
    if turn_index >= 4 {
        "4+".to_string()
    } else {
        turn_index.max(1).to_string()
    }
}

/// One prediction per line; blank lines are empty predictions.
pub fn read_predictions(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| l.trim().to_string()).collect())
}

struct Scorer<'a> {
    envs: HashMap<&'a str, &'a DatabaseEnv>,
    bank: Option<FuzzBank>,
    cfg: &'a EvalConfig,
}

impl Scorer<'_> {
    fn score(
        &self,
        exec: &mut Executor,
        index: usize,
        gold: &CorpusExample,
        pred: &str,
    ) -> std::result::Result<ExampleVerdict, GoldFailure> {
        let fail = |message: String| GoldFailure {
            index,
            db_id: gold.db_id.clone(),
            message,
        };
        let env = *self
            .envs
            .get(gold.db_id.as_str())
            .ok_or_else(|| fail(format!("unknown database `{}`", gold.db_id)))?;
        let gold_ast = parse_sql(&gold.gold_sql, env).map_err(|e| fail(e.to_string()))?;
        let em = em_match(&gold.gold_sql, pred, env).map_err(|e| fail(e.to_string()))?;
        let g = exec
            .execute(&gold.gold_sql, env)
            .map_err(|e| fail(format!("gold fails on the original database: {e}")))?;
        let ex = exec
            .execute(pred, env)
            .is_ok_and(|p| denotations_equal_with(&g, &p, self.cfg.semantics));
        let (fx, fuzz_instances) = match &self.bank {
            None => (None, None),
            Some(bank) => {
                let instances = bank.instances(env).map_err(|e| fail(e.to_string()))?;
                let out = fuzz_match_with(&gold.gold_sql, pred, &instances, exec, self.cfg.semantics);
                (Some(ex && out.matched), Some(out.per_instance))
            }
        };
        Ok(ExampleVerdict {
            index,
            db_id: gold.db_id.clone(),
            difficulty: classify_difficulty(&gold_ast),
            turn_index: gold.turn_index,
            em,
            ex,
            fx,
            fuzz_instances,
        })
    }
}

/// Scores `preds[i]` against `gold[i]` for every `i`.
pub fn evaluate(
    gold: &[CorpusExample],
    preds: &[String],
    envs: &[DatabaseEnv],
    cfg: &EvalConfig,
) -> Result<EvalOutput> {
    if gold.len() != preds.len() {
        return Err(Error::Alignment {
            gold: gold.len(),
            pred: preds.len(),
        });
    }
    let bank = match &cfg.fuzz {
        Some(f) => Some(FuzzBank::new(f.clone(), &cfg.scratch, cfg.keep_fuzz_dbs)?),
        None => None,
    };
    let scorer = Scorer {
        envs: envs.iter().map(|e| (e.db_id.as_str(), e)).collect(),
        bank,
        cfg,
    };
    let results: Vec<_> = gold
        .par_iter()
        .zip(preds.par_iter())
        .enumerate()
        .map_init(
            || Executor::new(cfg.timeout),
            |exec, (i, (g, p))| scorer.score(exec, i, g, p),
        )
        .collect();

    let mut verdicts = Vec::new();
    let mut gold_errors = Vec::new();
    for r in results {
        match r {
            Ok(v) => verdicts.push(v),
            Err(f) => {
                tracing::warn!(index = f.index, db = %f.db_id, error = %f.message, "skipping example");
                gold_errors.push(f);
            }
        }
    }
    let mut overall = Metrics::default();
    let mut by_difficulty: BTreeMap<Difficulty, Metrics> =
        Difficulty::ALL.iter().map(|d| (*d, Metrics::default())).collect();
    let mut by_turn: BTreeMap<String, Metrics> = BTreeMap::new();
    for v in &verdicts {
        overall.add(v);
        by_difficulty.entry(v.difficulty).or_default().add(v);
        by_turn.entry(turn_bucket(v.turn_index)).or_default().add(v);
    }
    overall.finish();
    by_difficulty.values_mut().for_each(Metrics::finish);
    by_turn.values_mut().for_each(Metrics::finish);
    if let (Some(fx), Some(fxc)) = (overall.fx, overall.fx_correct) {
        assert!(fxc <= overall.ex_correct && fx <= overall.ex, "fuzz accuracy above execution accuracy");
    }
    Ok(EvalOutput {
        report: EvalReport {
            overall,
            by_difficulty,
            by_turn,
            gold_errors,
            config: cfg.clone(),
        },
        verdicts,
    })
}

fn table(out: &mut String, title: &str, columns: &[(String, &Metrics)], overall: &Metrics) {
    let mut cols: Vec<(String, &Metrics)> = columns.to_vec();
    cols.push(("all".into(), overall));
    let _ = write!(out, "{title:<8}");
    for (name, _) in &cols {
        let _ = write!(out, "{name:>10}");
    }
    out.push('\n');
    let _ = write!(out, "{:<8}", "count");
    for (_, m) in &cols {
        let _ = write!(out, "{:>10}", m.count);
    }
    out.push('\n');
    type Getter = fn(&Metrics) -> Option<f64>;
    let rows: [(&str, Getter); 3] =
        [("EM", |m| Some(m.em)), ("EX", |m| Some(m.ex)), ("FX", |m| m.fx)];
    for (name, get) in rows {
        if overall.fx.is_none() && name == "FX" {
            continue;
        }
        let _ = write!(out, "{name:<8}");
        for (_, m) in &cols {
            match get(m) {
                Some(v) if m.count > 0 => {
                    let _ = write!(out, "{:>10.3}", v);
                }
                _ => {
                    let _ = write!(out, "{:>10}", "-");
                }
            }
        }
        out.push('\n');
    }
}

impl EvalReport {
    /// Two plain-text tables: by difficulty, then by turn.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let diff: Vec<(String, &Metrics)> = self
            .by_difficulty
            .iter()
            .map(|(d, m)| (d.as_str().to_string(), m))
            .collect();
        table(&mut out, "", &diff, &self.overall);
        out.push('\n');
        let turns: Vec<(String, &Metrics)> = self.by_turn.iter().map(|(t, m)| (format!("turn {t}"), m)).collect();
        table(&mut out, "", &turns, &self.overall);
        if !self.gold_errors.is_empty() {
            let _ = writeln!(out, "\n{} examples skipped for unusable gold", self.gold_errors.len());
        }
        out
    }
}
