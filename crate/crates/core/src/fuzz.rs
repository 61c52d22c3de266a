//! Randomized database instances for fuzz-testing query equivalence.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use rusqlite::types::Value;
use rusqlite::Connection;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{denotations_equal_with, Executor, Semantics};
use crate::schema::{ColumnRef, DatabaseEnv, LogicalType};
use crate::seed::{derive_seed_str, stream, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValuePools {
    /// Integers are drawn from `0..=int_max`.
    pub int_max: i64,
    /// Share of numeric cells that get a two-digit fractional part.
    pub decimal_share: f64,
    /// Distinct strings in the per-instance text pool.
    pub text_pool: usize,
    pub first_year: i32,
    pub last_year: i32,
}

impl Default for ValuePools {
    fn default() -> Self {
        ValuePools {
            int_max: 100,
            decimal_share: 0.1,
            text_pool: 10,
            first_year: 2000,
            last_year: 2020,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzConfig {
    pub instances: usize,
    pub rows_min: usize,
    pub rows_max: usize,
    pub seed: u64,
    pub value_pools: ValuePools,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        FuzzConfig {
            instances: 10,
            rows_min: 5,
            rows_max: 50,
            seed: 0,
            value_pools: ValuePools::default(),
        }
    }
}

impl FuzzConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(Error::Domain("fuzz instances must be at least 1".into()));
        }
        if self.rows_min > self.rows_max {
            return Err(Error::Domain(format!(
                "row range {}..={} is empty",
                self.rows_min, self.rows_max
            )));
        }
        if self.value_pools.first_year > self.value_pools.last_year {
            return Err(Error::Domain("year range is empty".into()));
        }
        Ok(())
    }
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

pub fn instance_path(scratch: &Path, db_id: &str, seed: u64, index: usize) -> PathBuf {
    scratch
        .join(db_id)
        .join(format!("fuzz_{seed}_{index}.sqlite"))
}

fn sql_type(t: LogicalType) -> &'static str {
    match t {
        LogicalType::Text | LogicalType::Time => "TEXT",
        LogicalType::Number | LogicalType::Boolean | LogicalType::Other => "NUMERIC",
    }
}

/// CREATE statements of the original database when it exists, else DDL
/// derived from the schema description.
fn table_ddl(env: &DatabaseEnv) -> Result<Vec<String>> {
    if env.store_path.exists() {
        let conn = crate::exec::open_read_only(&env.store_path)?;
        let mut stmt = conn.prepare(
            "SELECT name, sql FROM sqlite_master WHERE type = 'table' AND sql IS NOT NULL AND name NOT LIKE 'sqlite_%'",
        )?;
        let found: HashMap<String, String> = stmt
            .query_map([], |r| Ok((r.get::<_, String>(0)?.to_ascii_lowercase(), r.get(1)?)))?
            .collect::<std::result::Result<_, _>>()?;
        let all = env
            .tables
            .iter()
            .all(|t| found.contains_key(&t.name.to_ascii_lowercase()));
        if all {
            return Ok(env
                .tables
                .iter()
                .map(|t| found[&t.name.to_ascii_lowercase()].clone())
                .collect());
        }
    }
    Ok(env
        .tables
        .iter()
        .enumerate()
        .map(|(ti, t)| {
            let pk: Vec<_> = env
                .primary_keys
                .iter()
                .filter(|c| c.table_index == ti)
                .collect();
            let cols: Vec<String> = t
                .columns
                .iter()
                .map(|c| {
                    let mut s = format!("{} {}", quote(&c.name), sql_type(c.logical_type));
                    if pk.len() == 1 && pk[0].column_index == c.column_index {
                        s.push_str(" PRIMARY KEY");
                    }
                    s
                })
                .collect();
            format!("CREATE TABLE {} ({})", quote(&t.name), cols.join(", "))
        })
        .collect())
}

/// Parent-first table order. Tables on a foreign-key cycle come last, in
/// schema order.
fn generation_order(env: &DatabaseEnv) -> Vec<usize> {
    let n = env.tables.len();
    let mut parents: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for (src, dst) in &env.foreign_keys {
        if src.table_index != dst.table_index {
            parents[src.table_index].insert(dst.table_index);
        }
    }
    let mut done = vec![false; n];
    let mut order = Vec::with_capacity(n);
    loop {
        let next = (0..n).find(|&t| !done[t] && parents[t].iter().all(|p| done[*p]));
        match next {
            Some(t) => {
                done[t] = true;
                order.push(t);
            }
            None => break,
        }
    }
    order.extend((0..n).filter(|t| !done[*t]));
    order
}

fn days_to_date(days: i64) -> (i64, u32, u32) {
    // civil-from-days over the proleptic Gregorian calendar
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    let y = yoe + era * 400 + i64::from(m <= 2);
    (y, m, d)
}

fn days_from_civil(y: i64, m: i64, d: i64) -> i64 {
    let y = if m <= 2 { y - 1 } else { y };
    let era = y.div_euclid(400);
    let yoe = y.rem_euclid(400);
    let mp = (m + 9) % 12;
    let doy = (153 * mp + 2) / 5 + d - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146_097 + doe - 719_468
}

struct Pools {
    text: Vec<String>,
    cfg: ValuePools,
}

impl Pools {
    fn new(env: &DatabaseEnv, cfg: &ValuePools, rng: &mut StreamRng) -> Self {
        let mut tokens: Vec<String> = env
            .tables
            .iter()
            .flat_map(|t| std::iter::once(t.name.clone()).chain(t.columns.iter().map(|c| c.name.clone())))
            .collect();
        tokens.sort();
        tokens.dedup();
        tokens.shuffle(rng);
        let from_schema = (cfg.text_pool / 2).min(tokens.len());
        let mut text: Vec<String> = tokens.into_iter().take(from_schema).collect();
        while text.len() < cfg.text_pool.max(1) {
            let len = rng.random_range(3..=6);
            let s: String = (0..len)
                .map(|_| char::from(b'a' + rng.random_range(0..26u8)))
                .collect();
            if !text.contains(&s) {
                text.push(s);
            }
        }
        Pools {
            text,
            cfg: cfg.clone(),
        }
    }

    fn number(&self, rng: &mut StreamRng) -> Value {
        let n = rng.random_range(0..=self.cfg.int_max);
        if rng.random_bool(self.cfg.decimal_share.clamp(0.0, 1.0)) {
            let cents = rng.random_range(1..100);
            Value::Real(n as f64 + f64::from(cents) / 100.0)
        } else {
            Value::Integer(n)
        }
    }

    fn date(&self, rng: &mut StreamRng) -> Value {
        let lo = days_from_civil(i64::from(self.cfg.first_year), 1, 1);
        let hi = days_from_civil(i64::from(self.cfg.last_year), 12, 31);
        let (y, m, d) = days_to_date(rng.random_range(lo..=hi));
        Value::Text(format!("{y:04}-{m:02}-{d:02}"))
    }

    fn value(&self, t: LogicalType, rng: &mut StreamRng) -> Value {
        match t {
            LogicalType::Text => Value::Text(self.text[rng.random_range(0..self.text.len())].clone()),
            LogicalType::Time => self.date(rng),
            LogicalType::Boolean => Value::Integer(rng.random_range(0..=1)),
            LogicalType::Number | LogicalType::Other => self.number(rng),
        }
    }

    /// `n` distinct key values of the column's type.
    fn unique(&self, t: LogicalType, n: usize, rng: &mut StreamRng) -> Vec<Value> {
        match t {
            LogicalType::Text | LogicalType::Time => {
                let mut out: Vec<Value> = (0..n)
                    .map(|i| Value::Text(format!("{}{}", self.text[i % self.text.len()], i)))
                    .collect();
                out.shuffle(rng);
                out
            }
            _ => {
                let hi = (self.cfg.int_max.max(0) as usize + 1).max(2 * n) as i64;
                let mut all: Vec<i64> = (1..=hi).collect();
                all.shuffle(rng);
                all.truncate(n);
                all.into_iter().map(Value::Integer).collect()
            }
        }
    }
}

fn distinct_values(conn: &Connection, table: &str, col: &str) -> Result<Vec<Value>> {
    let sql = format!(
        "SELECT DISTINCT {c} FROM {t} WHERE {c} IS NOT NULL ORDER BY 1",
        c = quote(col),
        t = quote(table)
    );
    let mut stmt = conn.prepare(&sql)?;
    let rows = stmt
        .query_map([], |r| r.get::<_, Value>(0))?
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(rows)
}

/// Write instance `index` of `env` with fresh random rows and return an
/// environment pointing at it. Content depends only on the schema,
/// `cfg.seed` and `index`.
pub fn randomize_db(
    env: &DatabaseEnv,
    cfg: &FuzzConfig,
    index: usize,
    scratch: &Path,
) -> Result<DatabaseEnv> {
    cfg.validate()?;
    let path = instance_path(scratch, &env.db_id, cfg.seed, index);
    let dir = path.parent().expect("instance path has a parent");
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if path.exists() {
        std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
    }
    let mut rng = stream(derive_seed_str(cfg.seed, &env.db_id), index as u64);
    let pools = Pools::new(env, &cfg.value_pools, &mut rng);

    let mut conn = Connection::open(&path)?;
    let tx = conn.transaction()?;
    for ddl in table_ddl(env)? {
        tx.execute_batch(&ddl)?;
    }

    let mut fk_of: BTreeMap<(usize, usize), &ColumnRef> = BTreeMap::new();
    for (src, dst) in &env.foreign_keys {
        fk_of.entry(src.position()).or_insert(dst);
    }
    let mut generated = vec![false; env.tables.len()];
    for t in generation_order(env) {
        let table = &env.tables[t];
        if table.columns.is_empty() {
            generated[t] = true;
            continue;
        }
        let mut n = rng.random_range(cfg.rows_min..=cfg.rows_max);
        let pk: Vec<&ColumnRef> = env.primary_keys.iter().filter(|c| c.table_index == t).collect();
        let single_pk = |c: &ColumnRef| pk.len() == 1 && pk[0].column_index == c.column_index;
        // a key that is also a foreign key can take each parent value once
        let mut key_parent = None;
        for col in table.columns.iter().filter(|c| single_pk(c)) {
            if let Some(parent) = fk_of.get(&col.position()) {
                if parent.table_index != t && generated[parent.table_index] {
                    let mut vals =
                        distinct_values(&tx, &env.tables[parent.table_index].name, &parent.name)?;
                    vals.shuffle(&mut rng);
                    n = n.min(vals.len());
                    vals.truncate(n);
                    key_parent = Some((col.column_index, vals));
                }
            }
        }
        let mut columns: Vec<Vec<Value>> = Vec::with_capacity(table.columns.len());
        for col in &table.columns {
            if let Some((ci, vals)) = &key_parent {
                if *ci == col.column_index {
                    columns.push(vals.clone());
                    continue;
                }
            }
            let values = match fk_of.get(&col.position()) {
                Some(parent) if parent.table_index != t && generated[parent.table_index] => {
                    let parent_vals = distinct_values(
                        &tx,
                        &env.tables[parent.table_index].name,
                        &parent.name,
                    )?;
                    if parent_vals.is_empty() {
                        return Err(Error::Generation(format!(
                            "{}.{} references {}.{}, which has no rows",
                            table.name,
                            col.name,
                            env.tables[parent.table_index].name,
                            parent.name
                        )));
                    }
                    (0..n)
                        .map(|_| parent_vals[rng.random_range(0..parent_vals.len())].clone())
                        .collect()
                }
                // self-references and cycle back-edges stay empty
                Some(_) => vec![Value::Null; n],
                None if single_pk(col) => {
                    pools.unique(col.logical_type, n, &mut rng)
                }
                None => (0..n).map(|_| pools.value(col.logical_type, &mut rng)).collect(),
            };
            columns.push(values);
        }
        let names: Vec<String> = table.columns.iter().map(|c| quote(&c.name)).collect();
        let marks = vec!["?"; names.len()].join(", ");
        let sql = format!(
            "INSERT OR IGNORE INTO {} ({}) VALUES ({marks})",
            quote(&table.name),
            names.join(", ")
        );
        {
            let mut stmt = tx.prepare(&sql)?;
            for r in 0..n {
                let row: Vec<&Value> = columns.iter().map(|c| &c[r]).collect();
                stmt.execute(rusqlite::params_from_iter(row))?;
            }
        }
        generated[t] = true;
    }
    tx.commit()?;
    check_constraints(&conn, env)?;
    drop(conn);

    let mut out = env.clone();
    out.store_path = path;
    Ok(out)
}

/// Primary keys unique and every non-null foreign key value present in
/// the referenced column.
pub fn check_constraints(conn: &Connection, env: &DatabaseEnv) -> Result<()> {
    for pk in &env.primary_keys {
        let t = quote(&env.tables[pk.table_index].name);
        let c = quote(&pk.name);
        let dup: i64 = conn.query_row(
            &format!("SELECT count({c}) - count(DISTINCT {c}) FROM {t}"),
            [],
            |r| r.get(0),
        )?;
        if dup != 0 && env.primary_keys.iter().filter(|k| k.table_index == pk.table_index).count() == 1 {
            return Err(Error::Generation(format!("duplicate key values in {t}.{c}")));
        }
    }
    for (src, dst) in &env.foreign_keys {
        let sql = format!(
            "SELECT count(*) FROM {st} WHERE {sc} IS NOT NULL AND {sc} NOT IN (SELECT {dc} FROM {dt})",
            st = quote(&env.tables[src.table_index].name),
            sc = quote(&src.name),
            dt = quote(&env.tables[dst.table_index].name),
            dc = quote(&dst.name),
        );
        let dangling: i64 = conn.query_row(&sql, [], |r| r.get(0))?;
        if dangling != 0 {
            return Err(Error::Generation(format!(
                "{dangling} dangling values in {}.{}",
                env.tables[src.table_index].name, src.name
            )));
        }
    }
    Ok(())
}

/// Randomized instances of every database touched so far, generated on
/// first use and removed on drop unless kept.
pub struct FuzzBank {
    cfg: FuzzConfig,
    scratch: PathBuf,
    keep: bool,
    instances: Mutex<HashMap<String, Arc<Vec<DatabaseEnv>>>>,
}

impl FuzzBank {
    pub fn new(cfg: FuzzConfig, scratch: impl Into<PathBuf>, keep: bool) -> Result<Self> {
        cfg.validate()?;
        Ok(FuzzBank {
            cfg,
            scratch: scratch.into(),
            keep,
            instances: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &FuzzConfig {
        &self.cfg
    }

    pub fn instances(&self, env: &DatabaseEnv) -> Result<Arc<Vec<DatabaseEnv>>> {
        let mut map = self.instances.lock().expect("fuzz bank lock");
        if let Some(v) = map.get(&env.db_id) {
            return Ok(v.clone());
        }
        let made: Vec<DatabaseEnv> = (0..self.cfg.instances)
            .into_par_iter()
            .map(|i| randomize_db(env, &self.cfg, i, &self.scratch))
            .collect::<Result<_>>()?;
        let made = Arc::new(made);
        map.insert(env.db_id.clone(), made.clone());
        Ok(made)
    }
}

impl Drop for FuzzBank {
    fn drop(&mut self) {
        if self.keep {
            return;
        }
        let map = self.instances.get_mut().map(std::mem::take).unwrap_or_default();
        for envs in map.values() {
            for e in envs.iter() {
                let _ = std::fs::remove_file(&e.store_path);
            }
            if let Some(dir) = envs.first().and_then(|e| e.store_path.parent()) {
                let _ = std::fs::remove_dir(dir);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuzzOutcome {
    /// True iff at least one instance was usable and the prediction matched
    /// gold on all usable instances.
    #[serde(rename = "match")]
    pub matched: bool,
    /// Per instance; instances where gold itself failed are `false` here
    /// and listed in `fragile`.
    pub per_instance: Vec<bool>,
    pub fragile: Vec<usize>,
}

/// Compare gold and prediction on every randomized instance.
pub fn fuzz_match_with(
    gold: &str,
    pred: &str,
    instances: &[DatabaseEnv],
    exec: &mut Executor,
    semantics: Semantics,
) -> FuzzOutcome {
    let mut per_instance = Vec::with_capacity(instances.len());
    let mut fragile = Vec::new();
    for (i, inst) in instances.iter().enumerate() {
        let g = match exec.execute(gold, inst) {
            Ok(d) => d,
            Err(e) => {
                tracing::warn!(instance = i, db_id = %inst.db_id, error = %e, "gold fails on fuzz instance");
                fragile.push(i);
                per_instance.push(false);
                continue;
            }
        };
        let ok = exec
            .execute(pred, inst)
            .map(|p| denotations_equal_with(&g, &p, semantics))
            .unwrap_or(false);
        per_instance.push(ok);
    }
    let usable = per_instance.len() - fragile.len();
    let matched = usable > 0
        && per_instance
            .iter()
            .enumerate()
            .all(|(i, ok)| *ok || fragile.contains(&i));
    FuzzOutcome {
        matched,
        per_instance,
        fragile,
    }
}

/// One-shot fuzz comparison; instances are generated under `scratch` and
/// removed afterwards.
pub fn fuzz_match(
    gold: &str,
    pred: &str,
    env: &DatabaseEnv,
    cfg: &FuzzConfig,
    scratch: &Path,
) -> Result<FuzzOutcome> {
    let bank = FuzzBank::new(cfg.clone(), scratch, false)?;
    let instances = bank.instances(env)?;
    let mut exec = Executor::default();
    let out = fuzz_match_with(gold, pred, &instances, &mut exec, Semantics::Bag);
    drop(exec);
    Ok(out)
}
