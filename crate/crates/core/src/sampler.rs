//! Query sampling by template filling.
//!
//! A draw picks a template the database can fill, assigns distinct columns
//! of the right kind to its slots, draws literal values from the stored
//! contents of the bound columns, rebuilds joins, and keeps the query only
//! if it runs and returns rows.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use rusqlite::types::ValueRef;
use serde::{Deserialize, Serialize};

use crate::canon::{
    from_coarse, render, to_coarse, Assignment, CmpOp, CoarseTemplate, Literal, SlotKind, SqlAst,
};
use crate::dist::{sample_template, sample_template_conditional, TemplateDistribution};
use crate::error::{Error, Result};
use crate::exec::{format_number, Cell, Executor, DEFAULT_TIMEOUT};
use crate::schema::{fk_join_path, ColumnRef, DatabaseEnv, LogicalType};
use crate::seed::{stream, StreamRng};

pub const DEFAULT_MAX_ATTEMPTS: usize = 500;
pub const CONNECT_RETRIES: usize = 50;

/// Record of the random choices behind one sampled query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedTrace {
    pub template: String,
    /// Slot name to `table.column`.
    pub assignment: BTreeMap<String, String>,
    /// Table chosen for query levels without columns, by level index.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub level_tables: BTreeMap<usize, String>,
    pub values: Vec<String>,
    /// Draws made before this one succeeded, including the successful one.
    pub attempts: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledQuery {
    pub env_id: String,
    pub ast: SqlAst,
    pub sql: String,
    pub template: CoarseTemplate,
    pub prev_ast: Option<SqlAst>,
    pub prev_sql: Option<String>,
    pub seed_trace: SeedTrace,
}

/// One line of a sampled-set file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledRecord {
    pub db_id: String,
    pub sql: String,
    pub template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prev_sql: Option<String>,
    pub seed_trace: SeedTrace,
}

impl SampledQuery {
    pub fn record(&self) -> SampledRecord {
        SampledRecord {
            db_id: self.env_id.clone(),
            sql: self.sql.clone(),
            template: self.template.text().to_string(),
            prev_sql: self.prev_sql.clone(),
            seed_trace: self.seed_trace.clone(),
        }
    }
}

fn kind_counts(env: &DatabaseEnv) -> BTreeMap<SlotKind, usize> {
    let mut m = BTreeMap::new();
    for c in env.columns() {
        *m.entry(SlotKind::of(c)).or_insert(0) += 1;
    }
    m
}

fn fits(counts: &BTreeMap<SlotKind, usize>, n_tables: usize, tpl: &CoarseTemplate) -> bool {
    n_tables >= tpl.join_arity()
        && tpl
            .slot_counts()
            .iter()
            .all(|(k, n)| counts.get(k).copied().unwrap_or(0) >= *n)
}

/// Whether `env` has enough columns of every slot kind, and enough tables,
/// to fill `tpl`.
pub fn can_fill(env: &DatabaseEnv, tpl: &CoarseTemplate) -> bool {
    fits(&kind_counts(env), env.tables.len(), tpl)
}

fn level_tables(tpl: &CoarseTemplate, a: &Assignment, level: usize) -> BTreeSet<usize> {
    let mut set: BTreeSet<usize> = tpl.levels()[level]
        .iter()
        .map(|s| a.columns[s].table_index)
        .collect();
    if let Some(t) = a.level_tables.get(&level) {
        set.insert(*t);
    }
    set
}

/// Uniform injective assignment of columns to slots, redrawn until every
/// query level's tables are connected by foreign keys.
pub fn assign_columns<R: Rng + ?Sized>(
    env: &DatabaseEnv,
    tpl: &CoarseTemplate,
    rng: &mut R,
) -> Result<Assignment> {
    let mut by_kind: BTreeMap<SlotKind, Vec<&ColumnRef>> = BTreeMap::new();
    for c in env.columns() {
        by_kind.entry(SlotKind::of(c)).or_default().push(c);
    }
    let mut last_tables = Vec::new();
    for _ in 0..CONNECT_RETRIES {
        let mut a = Assignment::default();
        for (kind, n) in tpl.slot_counts() {
            let pool = by_kind.get_mut(&kind).filter(|p| p.len() >= n).ok_or_else(|| {
                Error::Assignment(format!("not enough {} columns", kind.prefix()))
            })?;
            pool.shuffle(rng);
            let slots = tpl.column_slots().iter().filter(|s| s.kind == kind);
            for (slot, col) in slots.zip(pool.iter()) {
                a.columns.insert(*slot, (*col).clone());
            }
        }
        for (level, slots) in tpl.levels().iter().enumerate() {
            if slots.is_empty() {
                a.level_tables
                    .insert(level, rng.random_range(0..env.tables.len()));
            }
        }
        let connected = (0..tpl.levels().len()).all(|level| {
            let tables = level_tables(tpl, &a, level);
            let ok = fk_join_path(env, &tables).is_ok();
            if !ok {
                last_tables = tables.into_iter().collect();
            }
            ok
        });
        if connected {
            return Ok(a);
        }
    }
    Err(Error::NoJoinPath {
        db_id: env.db_id.clone(),
        tables: last_tables
            .into_iter()
            .map(|t| env.tables[t].name.clone())
            .collect(),
    })
}

fn quote_sql_ident(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

fn literal_for(col: &ColumnRef, cell: &Cell, op: Option<CmpOp>) -> Option<Literal> {
    let numeric = matches!(col.logical_type, LogicalType::Number | LogicalType::Boolean);
    let mut lit = match cell {
        Cell::Number(n) if numeric => Literal::number(format_number(*n)),
        other => Literal::text(other.to_sql_text()?),
    };
    if matches!(op, Some(CmpOp::Like | CmpOp::NotLike)) {
        let raw = match &lit.value {
            crate::canon::LiteralValue::Number(s) | crate::canon::LiteralValue::Text(s) => s.clone(),
            crate::canon::LiteralValue::Placeholder => return None,
        };
        lit = Literal::text(format!("%{raw}%"));
    }
    Some(lit)
}

/// Per-environment sampling state: distinct column values are read once
/// and reused, and queries run on one cached connection.
pub struct Sampler<'a> {
    env: &'a DatabaseEnv,
    counts: BTreeMap<SlotKind, usize>,
    values: HashMap<(usize, usize), Vec<Cell>>,
    exec: Executor,
}

impl<'a> Sampler<'a> {
    pub fn new(env: &'a DatabaseEnv) -> Self {
        Sampler {
            env,
            counts: kind_counts(env),
            values: HashMap::new(),
            exec: Executor::new(DEFAULT_TIMEOUT),
        }
    }

    pub fn env(&self) -> &DatabaseEnv {
        self.env
    }

    pub fn can_fill(&self, tpl: &CoarseTemplate) -> bool {
        fits(&self.counts, self.env.tables.len(), tpl)
    }

    pub fn any_fillable(&self, dist: &TemplateDistribution) -> bool {
        dist.templates().any(|(t, _)| self.can_fill(t))
    }

    /// Distinct non-null values stored in a column, in SQLite order.
    pub fn column_values(&mut self, col: &ColumnRef) -> Result<&[Cell]> {
        let key = col.position();
        if !self.values.contains_key(&key) {
            let table = &self.env.tables[col.table_index].name;
            let c = quote_sql_ident(&col.name);
            let sql = format!(
                "SELECT DISTINCT {c} FROM {} WHERE {c} IS NOT NULL ORDER BY 1",
                quote_sql_ident(table)
            );
            let conn = self.exec.connection(&self.env.store_path)?;
            let mut stmt = conn.prepare(&sql)?;
            let mut rows = stmt.query([])?;
            let mut cells = Vec::new();
            while let Some(row) = rows.next()? {
                match row.get_ref(0)? {
                    ValueRef::Integer(n) => cells.push(Cell::Number(n as f64)),
                    ValueRef::Real(r) => cells.push(Cell::Number(r)),
                    ValueRef::Text(t) => {
                        cells.push(Cell::Text(String::from_utf8_lossy(t).into_owned()))
                    }
                    ValueRef::Null | ValueRef::Blob(_) => {}
                }
            }
            self.values.insert(key, cells);
        }
        let cells = &self.values[&key];
        if cells.is_empty() {
            return Err(Error::EmptyColumn {
                table: self.env.tables[col.table_index].name.clone(),
                column: col.name.clone(),
            });
        }
        Ok(cells)
    }

    /// One literal per value slot, each drawn uniformly from the distinct
    /// values of its bound column. Unbound slots (e.g. `count ( * ) > val`)
    /// get a small integer.
    pub fn fill_values<R: Rng + ?Sized>(
        &mut self,
        tpl: &CoarseTemplate,
        assignment: &Assignment,
        rng: &mut R,
    ) -> Result<Vec<Literal>> {
        let mut out = Vec::with_capacity(tpl.value_slots().len());
        for vs in tpl.value_slots() {
            let lit = match vs.bound.and_then(|s| assignment.columns.get(&s)) {
                Some(col) => {
                    let col = col.clone();
                    let cells = self.column_values(&col)?;
                    let cell = cells[rng.random_range(0..cells.len())].clone();
                    literal_for(&col, &cell, vs.op).ok_or_else(|| Error::EmptyColumn {
                        table: self.env.tables[col.table_index].name.clone(),
                        column: col.name.clone(),
                    })?
                }
                None => Literal::number(rng.random_range(1..=5).to_string()),
            };
            out.push(lit);
        }
        Ok(out)
    }

    fn attempt<R: Rng + ?Sized>(
        &mut self,
        tpl: &CoarseTemplate,
        rng: &mut R,
    ) -> Result<(SqlAst, String, Assignment, Vec<Literal>)> {
        let assignment = assign_columns(self.env, tpl, rng)?;
        let values = self.fill_values(tpl, &assignment, rng)?;
        let ast = from_coarse(tpl, &assignment, &values, self.env)?;
        if &to_coarse(&ast, self.env) != tpl {
            return Err(Error::Assignment(
                "filled query canonicalizes to a different template".into(),
            ));
        }
        let sql = render(&ast);
        let d = self.exec.execute(&sql, self.env)?;
        if d.is_empty() {
            return Err(Error::Execution("empty denotation".into()));
        }
        Ok((ast, sql, assignment, values))
    }

    fn sample_with<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        max_attempts: usize,
        mut choose: impl FnMut(&Self, &mut R) -> Result<CoarseTemplate>,
    ) -> Result<SampledQuery> {
        let mut diagnostics: BTreeMap<&'static str, usize> = BTreeMap::new();
        for attempt in 1..=max_attempts {
            let tpl = choose(self, rng).map_err(|e| match e {
                Error::Unfillable { .. } => Error::Unfillable {
                    db_id: self.env.db_id.clone(),
                },
                other => other,
            })?;
            match self.attempt(&tpl, rng) {
                Ok((ast, sql, assignment, values)) => {
                    let name = |c: &ColumnRef| {
                        format!("{}.{}", self.env.tables[c.table_index].name, c.name)
                    };
                    let trace = SeedTrace {
                        template: tpl.text().to_string(),
                        assignment: assignment
                            .columns
                            .iter()
                            .map(|(s, c)| (s.to_string(), name(c)))
                            .collect(),
                        level_tables: assignment
                            .level_tables
                            .iter()
                            .map(|(l, t)| (*l, self.env.tables[*t].name.clone()))
                            .collect(),
                        values: values
                            .iter()
                            .map(|l| match &l.value {
                                crate::canon::LiteralValue::Number(s)
                                | crate::canon::LiteralValue::Text(s) => s.clone(),
                                crate::canon::LiteralValue::Placeholder => String::new(),
                            })
                            .collect(),
                        attempts: attempt,
                    };
                    return Ok(SampledQuery {
                        env_id: self.env.db_id.clone(),
                        ast,
                        sql,
                        template: tpl,
                        prev_ast: None,
                        prev_sql: None,
                        seed_trace: trace,
                    });
                }
                Err(e) => {
                    let tag = match e {
                        Error::NoJoinPath { .. } => "no_join_path",
                        Error::EmptyColumn { .. } => "empty_column",
                        Error::Assignment(_) => "assignment",
                        Error::Timeout(_) => "timeout",
                        Error::Execution(ref m) if m == "empty denotation" => "empty_result",
                        _ => "execution_error",
                    };
                    *diagnostics.entry(tag).or_insert(0) += 1;
                }
            }
        }
        Err(Error::SamplingExhausted {
            db_id: self.env.db_id.clone(),
            attempts: max_attempts,
            diagnostics: diagnostics
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(", "),
        })
    }

    pub fn sample_query<R: Rng + ?Sized>(
        &mut self,
        dist: &TemplateDistribution,
        rng: &mut R,
        max_attempts: usize,
    ) -> Result<SampledQuery> {
        self.sample_with(rng, max_attempts, |s, rng| {
            sample_template(dist, |t| s.can_fill(t), rng)
        })
    }

    pub fn sample_turn_sequence<R: Rng + ?Sized>(
        &mut self,
        dist: &TemplateDistribution,
        rng: &mut R,
        turns: usize,
        max_attempts: usize,
    ) -> Result<Vec<SampledQuery>> {
        if turns == 0 {
            return Err(Error::Domain("a turn sequence needs at least one turn".into()));
        }
        let mut out: Vec<SampledQuery> = Vec::with_capacity(turns);
        out.push(self.sample_query(dist, rng, max_attempts)?);
        while out.len() < turns {
            let prev = out.last().expect("non-empty").clone();
            let mut q = self.sample_with(rng, max_attempts, |s, rng| {
                sample_template_conditional(dist, &prev.template, |t| s.can_fill(t), rng)
            })?;
            q.prev_ast = Some(prev.ast);
            q.prev_sql = Some(prev.sql);
            out.push(q);
        }
        Ok(out)
    }

    /// Re-check a sample: it canonicalizes to its template, runs, and
    /// returns rows.
    pub fn validate(&mut self, q: &SampledQuery) -> Result<()> {
        if to_coarse(&q.ast, self.env) != q.template {
            return Err(Error::Assignment(format!(
                "`{}` does not canonicalize to `{}`",
                q.sql, q.template
            )));
        }
        let d = self.exec.execute(&q.sql, self.env)?;
        if d.is_empty() {
            return Err(Error::Execution(format!("`{}` returns no rows", q.sql)));
        }
        Ok(())
    }
}

pub fn fill_values<R: Rng + ?Sized>(
    env: &DatabaseEnv,
    tpl: &CoarseTemplate,
    assignment: &Assignment,
    rng: &mut R,
) -> Result<Vec<Literal>> {
    Sampler::new(env).fill_values(tpl, assignment, rng)
}

pub fn sample_query<R: Rng + ?Sized>(
    env: &DatabaseEnv,
    dist: &TemplateDistribution,
    rng: &mut R,
    max_attempts: usize,
) -> Result<SampledQuery> {
    Sampler::new(env).sample_query(dist, rng, max_attempts)
}

pub fn sample_turn_sequence<R: Rng + ?Sized>(
    env: &DatabaseEnv,
    dist: &TemplateDistribution,
    rng: &mut R,
    turns: usize,
) -> Result<Vec<SampledQuery>> {
    Sampler::new(env).sample_turn_sequence(dist, rng, turns, DEFAULT_MAX_ATTEMPTS)
}

/// How a batch picks the database for each draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvChoice {
    /// Every draw in one environment.
    Targeted,
    /// Each draw first picks an environment uniformly.
    Uniform,
}

#[derive(Debug, Clone)]
pub struct BatchConfig {
    pub count: usize,
    pub turns: usize,
    pub seed: u64,
    pub max_attempts: usize,
    pub choice: EnvChoice,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            count: 1,
            turns: 1,
            seed: 0,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            choice: EnvChoice::Targeted,
        }
    }
}

/// Envs of `envs` in which at least one template of `dist` fits.
pub fn fillable_envs<'e>(envs: &'e [DatabaseEnv], dist: &TemplateDistribution) -> Vec<&'e DatabaseEnv> {
    envs.iter()
        .filter(|e| {
            let counts = kind_counts(e);
            dist.templates()
                .any(|(t, _)| fits(&counts, e.tables.len(), t))
        })
        .collect()
}

/// Pick the environment for draw `rng` under `choice`. Targeted mode uses
/// the first environment.
pub fn choose_env<'e, R: Rng + ?Sized>(
    envs: &[&'e DatabaseEnv],
    choice: EnvChoice,
    rng: &mut R,
) -> &'e DatabaseEnv {
    match choice {
        EnvChoice::Targeted => envs[0],
        EnvChoice::Uniform => envs[rng.random_range(0..envs.len())],
    }
}

/// Draw `cfg.count` sequences in parallel. Draw `i` uses its own stream
/// derived from `(cfg.seed, i)`, so output is independent of thread count.
pub fn sample_batch(
    envs: &[DatabaseEnv],
    dist: &TemplateDistribution,
    cfg: &BatchConfig,
) -> Result<Vec<Vec<SampledQuery>>> {
    let usable = fillable_envs(envs, dist);
    if usable.is_empty() {
        return Err(Error::Unfillable {
            db_id: envs
                .iter()
                .map(|e| e.db_id.as_str())
                .collect::<Vec<_>>()
                .join(","),
        });
    }
    (0..cfg.count)
        .into_par_iter()
        .map_init(HashMap::<String, Sampler>::new, |samplers, i| {
            let mut rng: StreamRng = stream(cfg.seed, i as u64);
            let env = choose_env(&usable, cfg.choice, &mut rng);
            let sampler = samplers
                .entry(env.db_id.clone())
                .or_insert_with(|| Sampler::new(env));
            sampler.sample_turn_sequence(dist, &mut rng, cfg.turns, cfg.max_attempts)
        })
        .collect()
}

pub fn write_sampled(path: &Path, samples: &[SampledQuery]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for s in samples {
        let line = serde_json::to_string(&s.record()).expect("serializable");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sampled(path: &Path) -> Result<Vec<SampledRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::format(format!("{}:{}", path.display(), i + 1), e.to_string()))
        })
        .collect()
}
