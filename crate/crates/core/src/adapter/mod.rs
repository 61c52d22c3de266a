//! The model-adapter boundary: how an utterance generator and a semantic
//! parser plug into the pipeline.
//!
//! Adapters speak newline-delimited JSON over stdio (see [`subprocess`] and
//! [`serve`]). Built-in baselines in [`builtin`] run in-process so the whole
//! pipeline can be exercised without a model.

pub mod builtin;
pub mod conformance;
mod serve;
pub mod subprocess;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::canon::{parse_sql, render, SqlAst};
use crate::error::{Error, Result};
use crate::schema::{DatabaseEnv, SchemaEntry};

pub use serve::serve;
pub use subprocess::SubprocessAdapter;

pub const PROTOCOL: &str = "gazp-adapter/1";
pub const DEFAULT_ADAPTER_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    /// Canonical SQL.
    pub query: String,
    pub db_id: String,
    pub schema: SchemaEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prev_query: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub utterance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseRequest {
    pub utterance: String,
    pub db_id: String,
    pub schema: SchemaEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prev_query: Option<String>,
    /// The utterance with its previous query prepended, ready for a
    /// sequence model. Adapters are free to ignore it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseResponse {
    pub query: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol: String,
    pub concurrent: bool,
}

/// Conditioning input for one turn of an interaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TurnContext {
    pub prev_query: Option<String>,
    pub rendered_input: String,
}

impl TurnContext {
    pub fn new(prev_query: Option<&str>, utterance: &str) -> Self {
        let rendered_input = match prev_query {
            Some(p) => format!("[PREV] {p} [UTT] {utterance}"),
            None => utterance.to_string(),
        };
        TurnContext {
            prev_query: prev_query.map(str::to_string),
            rendered_input,
        }
    }
}

/// A generator G, a parser F, or both.
///
/// Implementations must be callable from many threads at once; ones that
/// cannot serve requests concurrently serialize internally.
pub trait ModelAdapter: Send + Sync {
    fn name(&self) -> &str;
    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse>;
    fn parse(&self, req: &ParseRequest) -> Result<ParseResponse>;
}

/// Asks `model` for an utterance describing `q`.
pub fn generate_utterance(
    model: &dyn ModelAdapter,
    q: &SqlAst,
    env: &DatabaseEnv,
    prev: Option<&SqlAst>,
) -> Result<String> {
    let req = GenerateRequest {
        query: render(q),
        db_id: env.db_id.clone(),
        schema: env.to_schema_entry(),
        prev_query: prev.map(render),
    };
    let resp = model.generate(&req)?;
    if resp.utterance.trim().is_empty() {
        return Err(Error::Protocol(format!(
            "{} returned an empty utterance",
            model.name()
        )));
    }
    Ok(resp.utterance)
}

/// Asks `model` to parse `u`; the answer must be SQL that `env` resolves.
pub fn parse_utterance(
    model: &dyn ModelAdapter,
    u: &str,
    env: &DatabaseEnv,
    prev: Option<&SqlAst>,
) -> Result<SqlAst> {
    let prev_query = prev.map(render);
    let ctx = TurnContext::new(prev_query.as_deref(), u);
    let req = ParseRequest {
        utterance: u.to_string(),
        db_id: env.db_id.clone(),
        schema: env.to_schema_entry(),
        prev_query,
        input: Some(ctx.rendered_input),
    };
    let resp = model.parse(&req)?;
    parse_sql(&resp.query, env).map_err(|e| Error::InvalidPrediction {
        sql: resp.query,
        message: e.to_string(),
    })
}

/// Opens an adapter from `builtin:<name>` or `cmd:<shell command>`.
pub fn open_adapter(spec: &str, timeout: Duration) -> Result<Arc<dyn ModelAdapter>> {
    if let Some(name) = spec.strip_prefix("builtin:") {
        return builtin::builtin(name)
            .ok_or_else(|| Error::Adapter(format!("unknown builtin adapter `{name}`")));
    }
    if let Some(cmd) = spec.strip_prefix("cmd:") {
        let cmd = cmd.trim();
        let cmd = cmd
            .strip_prefix('"')
            .and_then(|c| c.strip_suffix('"'))
            .unwrap_or(cmd);
        return Ok(Arc::new(SubprocessAdapter::spawn(cmd, timeout)?));
    }
    Err(Error::Adapter(format!(
        "adapter spec `{spec}` must start with builtin: or cmd:"
    )))
}
