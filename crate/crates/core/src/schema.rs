//! Database environments and task corpora.
//!
//! Schemas are read from the tables-file layout used by the public
//! cross-database text-to-SQL benchmarks: one JSON object per database with
//! flat, globally indexed column lists. Column ordinal 0 is the `*` pseudo
//! column and does not belong to any table.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogicalType {
    Text,
    Number,
    Time,
    Boolean,
    Other,
}

impl LogicalType {
    /// Closed mapping from tables-file type strings.
    pub fn from_schema_str(s: &str) -> Self {
        match s.trim().to_ascii_lowercase().as_str() {
            "text" => LogicalType::Text,
            "number" | "int" | "real" => LogicalType::Number,
            "time" | "date" | "datetime" => LogicalType::Time,
            "boolean" => LogicalType::Boolean,
            _ => LogicalType::Other,
        }
    }

    pub fn as_schema_str(self) -> &'static str {
        match self {
            LogicalType::Text => "text",
            LogicalType::Number => "number",
            LogicalType::Time => "time",
            LogicalType::Boolean => "boolean",
            LogicalType::Other => "others",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ColumnRef {
    pub table_index: usize,
    pub column_index: usize,
    pub name: String,
    pub logical_type: LogicalType,
    pub is_key: bool,
}

impl ColumnRef {
    pub fn position(&self) -> (usize, usize) {
        (self.table_index, self.column_index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<ColumnRef>,
}

/// Equality between two columns, oriented from the referencing column to
/// the referenced one.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JoinCondition {
    pub left: ColumnRef,
    pub right: ColumnRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatabaseEnv {
    pub db_id: String,
    pub tables: Vec<Table>,
    pub foreign_keys: Vec<(ColumnRef, ColumnRef)>,
    pub primary_keys: Vec<ColumnRef>,
    pub store_path: PathBuf,
}

impl DatabaseEnv {
    pub fn table(&self, index: usize) -> &Table {
        &self.tables[index]
    }

    pub fn column(&self, table_index: usize, column_index: usize) -> &ColumnRef {
        &self.tables[table_index].columns[column_index]
    }

    pub fn columns(&self) -> impl Iterator<Item = &ColumnRef> {
        self.tables.iter().flat_map(|t| t.columns.iter())
    }

    pub fn find_table(&self, name: &str) -> Option<usize> {
        self.tables
            .iter()
            .position(|t| t.name.eq_ignore_ascii_case(name))
    }

    pub fn find_column(&self, table_index: usize, name: &str) -> Option<&ColumnRef> {
        self.tables[table_index]
            .columns
            .iter()
            .find(|c| c.name.eq_ignore_ascii_case(name))
    }

    /// Point the environment at `<data_root>/<db_id>/<db_id>.sqlite`.
    pub fn with_data_root(mut self, data_root: &Path) -> Self {
        self.store_path = data_root
            .join(&self.db_id)
            .join(format!("{}.sqlite", self.db_id));
        self
    }

    /// Serialize back to a single tables-file entry.
    pub fn to_schema_entry(&self) -> SchemaEntry {
        let mut column_names = vec![(-1i64, "*".to_string())];
        let mut column_types = vec!["text".to_string()];
        let mut global = Vec::with_capacity(self.tables.len());
        for (ti, table) in self.tables.iter().enumerate() {
            let mut offsets = Vec::with_capacity(table.columns.len());
            for col in &table.columns {
                offsets.push(column_names.len());
                column_names.push((ti as i64, col.name.clone()));
                column_types.push(col.logical_type.as_schema_str().to_string());
            }
            global.push(offsets);
        }
        let ordinal = |c: &ColumnRef| global[c.table_index][c.column_index];
        let table_names: Vec<String> = self.tables.iter().map(|t| t.name.clone()).collect();
        SchemaEntry {
            db_id: self.db_id.clone(),
            table_names_original: table_names.clone(),
            table_names: Some(table_names),
            column_names: Some(column_names.clone()),
            column_names_original: column_names,
            column_types,
            primary_keys: self
                .primary_keys
                .iter()
                .map(|c| KeyRef::Single(ordinal(c)))
                .collect(),
            foreign_keys: self
                .foreign_keys
                .iter()
                .map(|(a, b)| (ordinal(a), ordinal(b)))
                .collect(),
        }
    }

    pub fn from_schema_entry(entry: SchemaEntry) -> Result<Self> {
        build_env(entry)
    }
}

/// One database object in a tables file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaEntry {
    pub db_id: String,
    pub table_names_original: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table_names: Option<Vec<String>>,
    pub column_names_original: Vec<(i64, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column_names: Option<Vec<(i64, String)>>,
    pub column_types: Vec<String>,
    pub primary_keys: Vec<KeyRef>,
    pub foreign_keys: Vec<(usize, usize)>,
}

/// Primary keys are plain ordinals; some releases nest composite keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KeyRef {
    Single(usize),
    Composite(Vec<usize>),
}

fn build_env(entry: SchemaEntry) -> Result<DatabaseEnv> {
    let db_id = entry.db_id.clone();
    let ctx = |field: &str| format!("database `{db_id}` field `{field}`");
    if entry.column_types.len() != entry.column_names_original.len() {
        return Err(Error::format(
            ctx("column_types"),
            format!(
                "{} types for {} columns",
                entry.column_types.len(),
                entry.column_names_original.len()
            ),
        ));
    }

    let n_cols = entry.column_names_original.len();
    let mut pk_ordinals = BTreeSet::new();
    for key in &entry.primary_keys {
        match key {
            KeyRef::Single(i) => {
                pk_ordinals.insert(*i);
            }
            KeyRef::Composite(v) => pk_ordinals.extend(v.iter().copied()),
        }
    }
    for &i in &pk_ordinals {
        check_ordinal(&db_id, "primary_keys", i, n_cols)?;
    }
    for &(a, b) in &entry.foreign_keys {
        check_ordinal(&db_id, "foreign_keys", a, n_cols)?;
        check_ordinal(&db_id, "foreign_keys", b, n_cols)?;
    }
    let key_ordinals: BTreeSet<usize> = pk_ordinals
        .iter()
        .copied()
        .chain(entry.foreign_keys.iter().flat_map(|&(a, b)| [a, b]))
        .collect();

    let mut seen_tables = HashSet::new();
    let mut tables: Vec<Table> = Vec::with_capacity(entry.table_names_original.len());
    for name in &entry.table_names_original {
        if !seen_tables.insert(name.to_ascii_lowercase()) {
            return Err(Error::Integrity {
                db_id,
                message: format!("duplicate table name `{name}`"),
            });
        }
        tables.push(Table {
            name: name.clone(),
            columns: Vec::new(),
        });
    }

    // global ordinal -> (table, column)
    let mut positions: Vec<Option<(usize, usize)>> = vec![None; n_cols];
    for (ordinal, (table, name)) in entry.column_names_original.iter().enumerate() {
        if *table < 0 {
            continue;
        }
        let ti = *table as usize;
        let Some(t) = tables.get_mut(ti) else {
            return Err(Error::format(
                ctx("column_names_original"),
                format!("column `{name}` names table {ti}, which does not exist"),
            ));
        };
        if t.columns.iter().any(|c| c.name.eq_ignore_ascii_case(name)) {
            return Err(Error::Integrity {
                db_id,
                message: format!("duplicate column `{}.{name}`", t.name),
            });
        }
        let ci = t.columns.len();
        t.columns.push(ColumnRef {
            table_index: ti,
            column_index: ci,
            name: name.clone(),
            logical_type: LogicalType::from_schema_str(&entry.column_types[ordinal]),
            is_key: key_ordinals.contains(&ordinal),
        });
        positions[ordinal] = Some((ti, ci));
    }

    let resolve = |field: &str, ordinal: usize| -> Result<ColumnRef> {
        positions[ordinal]
            .map(|(t, c)| tables[t].columns[c].clone())
            .ok_or_else(|| Error::Integrity {
                db_id: db_id.clone(),
                message: format!("{field} references the `*` pseudo column"),
            })
    };
    let primary_keys = pk_ordinals
        .iter()
        .map(|&i| resolve("primary_keys", i))
        .collect::<Result<Vec<_>>>()?;
    let foreign_keys = entry
        .foreign_keys
        .iter()
        .map(|&(a, b)| Ok((resolve("foreign_keys", a)?, resolve("foreign_keys", b)?)))
        .collect::<Result<Vec<_>>>()?;

    Ok(DatabaseEnv {
        db_id,
        tables,
        foreign_keys,
        primary_keys,
        store_path: PathBuf::new(),
    })
}

fn check_ordinal(db_id: &str, field: &str, ordinal: usize, n_cols: usize) -> Result<()> {
    if ordinal >= n_cols {
        return Err(Error::Integrity {
            db_id: db_id.to_string(),
            message: format!("{field} references column {ordinal} but only {n_cols} columns exist"),
        });
    }
    Ok(())
}

/// Parse a tables file already in memory. Store paths are left empty.
pub fn parse_schemas(text: &str) -> Result<Vec<DatabaseEnv>> {
    let raw: Vec<serde_json::Value> = serde_json::from_str(text)
        .map_err(|e| Error::format("schema file", e.to_string()))?;
    raw.into_iter()
        .enumerate()
        .map(|(i, value)| {
            let db_id = value
                .get("db_id")
                .and_then(|v| v.as_str())
                .map(str::to_string)
                .unwrap_or_else(|| format!("<entry {i}>"));
            let entry: SchemaEntry = serde_json::from_value(value)
                .map_err(|e| Error::format(format!("database `{db_id}`"), e.to_string()))?;
            build_env(entry)
        })
        .collect()
}

/// Load a tables file. Databases are expected under `database/` next to it;
/// use [`DatabaseEnv::with_data_root`] to point elsewhere.
pub fn load_schemas(path: &Path) -> Result<Vec<DatabaseEnv>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join("database");
    Ok(parse_schemas(&text)?
        .into_iter()
        .map(|env| env.with_data_root(&root))
        .collect())
}

/// Join conditions connecting `tables` through the foreign-key graph.
///
/// The graph is undirected. Tables are attached one at a time, each by a
/// breadth-first shortest path from the already connected set, starting from
/// the lowest ordinal. Edges are explored in `(table, column)` order of
/// their endpoints so the result is stable.
pub fn fk_join_path(env: &DatabaseEnv, tables: &BTreeSet<usize>) -> Result<Vec<JoinCondition>> {
    let Some(&first) = tables.iter().next() else {
        return Err(Error::Domain("join path over an empty table set".into()));
    };
    if let Some(&bad) = tables.iter().find(|&&t| t >= env.tables.len()) {
        return Err(Error::Domain(format!(
            "table ordinal {bad} out of range for `{}`",
            env.db_id
        )));
    }

    let mut edges: Vec<&(ColumnRef, ColumnRef)> = env
        .foreign_keys
        .iter()
        .filter(|(a, b)| a.table_index != b.table_index)
        .collect();
    edges.sort_by_key(|(a, b)| {
        let (lo, hi) = if a.position() <= b.position() {
            (a.position(), b.position())
        } else {
            (b.position(), a.position())
        };
        (lo, hi)
    });
    let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); env.tables.len()];
    for (ei, (a, b)) in edges.iter().enumerate() {
        adjacency[a.table_index].push((b.table_index, ei));
        adjacency[b.table_index].push((a.table_index, ei));
    }

    let mut connected = BTreeSet::from([first]);
    let mut used_edges: Vec<usize> = Vec::new();
    loop {
        let remaining: BTreeSet<usize> = tables.difference(&connected).copied().collect();
        if remaining.is_empty() {
            break;
        }
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; env.tables.len()];
        let mut visited = vec![false; env.tables.len()];
        let mut queue: VecDeque<usize> = VecDeque::new();
        for &t in &connected {
            visited[t] = true;
            queue.push_back(t);
        }
        let mut reached = None;
        while let Some(t) = queue.pop_front() {
            if remaining.contains(&t) {
                reached = Some(t);
                break;
            }
            for &(next, ei) in &adjacency[t] {
                if !visited[next] {
                    visited[next] = true;
                    parent[next] = Some((t, ei));
                    queue.push_back(next);
                }
            }
        }
        let Some(target) = reached else {
            return Err(Error::NoJoinPath {
                db_id: env.db_id.clone(),
                tables: tables.iter().map(|&t| env.tables[t].name.clone()).collect(),
            });
        };
        let mut path = Vec::new();
        let mut cur = target;
        while let Some((prev, ei)) = parent[cur] {
            path.push(ei);
            connected.insert(cur);
            cur = prev;
        }
        path.reverse();
        used_edges.extend(path);
    }

    Ok(used_edges
        .into_iter()
        .map(|ei| JoinCondition {
            left: edges[ei].0.clone(),
            right: edges[ei].1.clone(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Synthesized,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Original => "original",
            Provenance::Synthesized => "synthesized",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusExample {
    pub db_id: String,
    pub utterance: String,
    pub gold_sql: String,
    pub prev_sql: Option<String>,
    /// 1-based position within an interaction.
    pub turn_index: u32,
    pub provenance: Option<Provenance>,
}

impl CorpusExample {
    pub fn single_turn(db_id: &str, utterance: &str, gold_sql: &str) -> Self {
        CorpusExample {
            db_id: db_id.to_string(),
            utterance: utterance.to_string(),
            gold_sql: gold_sql.to_string(),
            prev_sql: None,
            turn_index: 1,
            provenance: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorpusRecord {
    db_id: String,
    question: String,
    query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prev_query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    turn_index: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

pub fn parse_corpus(text: &str) -> Result<Vec<CorpusExample>> {
    let records: Vec<CorpusRecord> =
        serde_json::from_str(text).map_err(|e| Error::format("corpus file", e.to_string()))?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let turn_index = r.turn_index.unwrap_or(1);
            if turn_index == 0 {
                return Err(Error::format(
                    format!("corpus entry {i}"),
                    "turn_index is 1-based",
                ));
            }
            if r.prev_query.is_some() != (turn_index > 1) {
                return Err(Error::format(
                    format!("corpus entry {i}"),
                    "prev_query must be present exactly when turn_index > 1",
                ));
            }
            Ok(CorpusExample {
                db_id: r.db_id,
                utterance: r.question,
                gold_sql: r.query,
                prev_sql: r.prev_query,
                turn_index,
                provenance: r.provenance,
            })
        })
        .collect()
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text)
}

pub fn corpus_to_json(examples: &[CorpusExample]) -> String {
    let records: Vec<CorpusRecord> = examples
        .iter()
        .map(|e| CorpusRecord {
            db_id: e.db_id.clone(),
            question: e.utterance.clone(),
            query: e.gold_sql.clone(),
            prev_query: e.prev_sql.clone(),
            turn_index: Some(e.turn_index),
            provenance: e.provenance,
        })
        .collect();
    serde_json::to_string_pretty(&records).expect("corpus records serialize")
}

pub fn write_corpus(path: &Path, examples: &[CorpusExample]) -> Result<()> {
    std::fs::write(path, corpus_to_json(examples)).map_err(|e| Error::io(path, e))
}
