//! Read-only query execution and denotation comparison.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};

use crate::canon::has_top_level_order_by;
use crate::error::{Error, Result};
use crate::schema::DatabaseEnv;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);
pub const NUMERIC_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Null,
    Number(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl Cell {
    fn rank(&self) -> u8 {
        match self {
            Cell::Null => 0,
            Cell::Number(_) => 1,
            Cell::Text(_) => 2,
            Cell::Blob(_) => 3,
        }
    }

    fn total_cmp(&self, other: &Cell) -> Ordering {
        match (self, other) {
            (Cell::Number(a), Cell::Number(b)) => a.total_cmp(b),
            (Cell::Text(a), Cell::Text(b)) => a.as_bytes().cmp(b.as_bytes()),
            (Cell::Blob(a), Cell::Blob(b)) => a.cmp(b),
            _ => self.rank().cmp(&other.rank()),
        }
    }

    /// Cell equality: reals within [`NUMERIC_TOLERANCE`], text byte-exact,
    /// NULL only equal to NULL.
    pub fn matches(&self, other: &Cell) -> bool {
        match (self, other) {
            (Cell::Null, Cell::Null) => true,
            (Cell::Number(a), Cell::Number(b)) => (a - b).abs() <= NUMERIC_TOLERANCE,
            (Cell::Text(a), Cell::Text(b)) => a == b,
            (Cell::Blob(a), Cell::Blob(b)) => a == b,
            _ => false,
        }
    }

    /// Literal rendering used when a stored value is put back into SQL.
    pub fn to_sql_text(&self) -> Option<String> {
        match self {
            Cell::Number(n) => Some(format_number(*n)),
            Cell::Text(t) => Some(t.clone()),
            Cell::Null | Cell::Blob(_) => None,
        }
    }
}

pub(crate) fn format_number(n: f64) -> String {
    if n.fract() == 0.0 && n.abs() < 1e15 {
        format!("{}", n as i64)
    } else {
        format!("{n}")
    }
}

type Row = Vec<Cell>;

fn row_cmp(a: &Row, b: &Row) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

fn row_matches(a: &Row, b: &Row) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.matches(y))
}

/// Result of running a query: its rows, arity, and whether row order is
/// meaningful (top-level ORDER BY).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Denotation {
    pub rows: Vec<Row>,
    pub column_count: usize,
    pub ordered: bool,
}

impl Denotation {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Row-collection semantics for unordered comparison.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Semantics {
    #[default]
    Bag,
    Set,
}

/// Bag-semantics denotation equality.
pub fn denotations_equal(a: &Denotation, b: &Denotation) -> bool {
    denotations_equal_with(a, b, Semantics::Bag)
}

pub fn denotations_equal_with(a: &Denotation, b: &Denotation, semantics: Semantics) -> bool {
    if a.column_count != b.column_count {
        return false;
    }
    if a.ordered || b.ordered {
        return a.rows.len() == b.rows.len()
            && a.rows.iter().zip(&b.rows).all(|(x, y)| row_matches(x, y));
    }
    let prepare = |d: &Denotation| {
        let mut rows = d.rows.clone();
        rows.sort_by(row_cmp);
        if semantics == Semantics::Set {
            rows.dedup_by(|x, y| row_matches(x, y));
        }
        rows
    };
    let (x, y) = (prepare(a), prepare(b));
    x.len() == y.len() && x.iter().zip(&y).all(|(r, s)| row_matches(r, s))
}

pub fn open_read_only(path: &Path) -> Result<Connection> {
    if !path.exists() {
        return Err(Error::Execution(format!(
            "database file {} does not exist",
            path.display()
        )));
    }
    let conn = Connection::open_with_flags(
        path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )?;
    Ok(conn)
}

/// Run one statement on an open connection under a wall-clock budget.
pub fn execute_on(conn: &Connection, sql: &str, timeout: Duration) -> Result<Denotation> {
    let deadline = Instant::now() + timeout;
    conn.progress_handler(1000, Some(move || Instant::now() > deadline));
    let result = run(conn, sql);
    conn.progress_handler(0, None::<fn() -> bool>);
    match result {
        Err(_) if Instant::now() > deadline => Err(Error::Timeout(timeout)),
        other => other,
    }
}

fn run(conn: &Connection, sql: &str) -> Result<Denotation> {
    let mut stmt = conn
        .prepare(sql)
        .map_err(|e| Error::Execution(e.to_string()))?;
    if !stmt.readonly() {
        return Err(Error::RejectedStatement);
    }
    let column_count = stmt.column_count();
    let mut rows = stmt
        .query([])
        .map_err(|e| Error::Execution(e.to_string()))?;
    let mut out = Vec::new();
    while let Some(row) = rows.next().map_err(|e| Error::Execution(e.to_string()))? {
        let mut cells = Vec::with_capacity(column_count);
        for i in 0..column_count {
            let v = row
                .get_ref(i)
                .map_err(|e| Error::Execution(e.to_string()))?;
            cells.push(match v {
                ValueRef::Null => Cell::Null,
                ValueRef::Integer(n) => Cell::Number(n as f64),
                ValueRef::Real(r) => Cell::Number(r),
                ValueRef::Text(t) => Cell::Text(String::from_utf8_lossy(t).into_owned()),
                ValueRef::Blob(b) => Cell::Blob(b.to_vec()),
            });
        }
        out.push(cells);
    }
    Ok(Denotation {
        rows: out,
        column_count,
        ordered: has_top_level_order_by(sql),
    })
}

/// Execute against an environment's database with a fresh read-only
/// connection.
pub fn execute(sql: &str, env: &DatabaseEnv, timeout: Duration) -> Result<Denotation> {
    let conn = open_read_only(&env.store_path)?;
    execute_on(&conn, sql, timeout)
}

/// Per-worker executor holding one read-only connection per database file.
pub struct Executor {
    timeout: Duration,
    conns: HashMap<PathBuf, Connection>,
}

impl Executor {
    pub fn new(timeout: Duration) -> Self {
        Executor {
            timeout,
            conns: HashMap::new(),
        }
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn connection(&mut self, path: &Path) -> Result<&Connection> {
        if !self.conns.contains_key(path) {
            let conn = open_read_only(path)?;
            self.conns.insert(path.to_path_buf(), conn);
        }
        Ok(&self.conns[path])
    }

    pub fn execute_path(&mut self, sql: &str, path: &Path) -> Result<Denotation> {
        let timeout = self.timeout;
        let conn = self.connection(path)?;
        execute_on(conn, sql, timeout)
    }

    pub fn execute(&mut self, sql: &str, env: &DatabaseEnv) -> Result<Denotation> {
        self.execute_path(sql, &env.store_path)
    }

    /// Drop the cached connection for a file about to be removed.
    pub fn forget(&mut self, path: &Path) {
        self.conns.remove(path);
    }
}

impl Default for Executor {
    fn default() -> Self {
        Executor::new(DEFAULT_TIMEOUT)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn num_rows(v: &[f64], ordered: bool) -> Denotation {
        Denotation {
            rows: v.iter().map(|n| vec![Cell::Number(*n)]).collect(),
            column_count: 1,
            ordered,
        }
    }

    #[test]
    fn order_matters_only_when_flagged() {
        assert!(denotations_equal(&num_rows(&[1.0, 2.0], false), &num_rows(&[2.0, 1.0], false)));
        assert!(!denotations_equal(&num_rows(&[1.0, 2.0], true), &num_rows(&[2.0, 1.0], true)));
    }

    #[test]
    fn bag_and_set_semantics() {
        let a = num_rows(&[1.0, 1.0, 2.0], false);
        let b = num_rows(&[1.0, 2.0], false);
        assert!(!denotations_equal_with(&a, &b, Semantics::Bag));
        assert!(denotations_equal_with(&a, &b, Semantics::Set));
    }

    #[test]
    fn null_only_matches_null() {
        assert!(Cell::Null.matches(&Cell::Null));
        assert!(!Cell::Null.matches(&Cell::Number(0.0)));
        assert!(!Cell::Text("1".into()).matches(&Cell::Number(1.0)));
    }

    #[test]
    fn arity_mismatch_is_unequal() {
        let a = num_rows(&[], false);
        let mut b = a.clone();
        b.column_count = 2;
        assert!(!denotations_equal(&a, &b));
    }

    #[test]
    fn number_formatting() {
        assert_eq!(format_number(3.0), "3");
        assert_eq!(format_number(3.5), "3.5");
        assert_eq!(format_number(-2.0), "-2");
    }
}
