//! Wire-level checks for an adapter program.
//!
//! Talks to the process directly rather than through
//! [`SubprocessAdapter`](super::SubprocessAdapter) so duplicate, stray or
//! malformed lines are seen instead of filtered.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};
use std::sync::mpsc::{self, Receiver};
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::{json, Value};

use super::{TurnContext, PROTOCOL};
use crate::error::{Error, Result};
use crate::schema::DatabaseEnv;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ConformanceReport {
    pub checks: Vec<Check>,
    /// Utterance and parsed SQL per input query, when the adapter answered.
    pub round_trips: Vec<(String, Option<String>, Option<String>)>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        });
    }
}

fn collect(rx: &Receiver<String>, want: usize, deadline: Instant) -> Vec<String> {
    let mut out = Vec::new();
    while out.len() < want {
        let left = deadline.saturating_duration_since(Instant::now());
        match rx.recv_timeout(left) {
            Ok(line) if line.trim().is_empty() => {}
            Ok(line) => out.push(line),
            Err(_) => break,
        }
    }
    out
}

/// Responses grouped by id; lines without an integer id go under `None`.
fn by_id(lines: &[String]) -> BTreeMap<Option<u64>, Vec<Value>> {
    let mut map: BTreeMap<Option<u64>, Vec<Value>> = BTreeMap::new();
    for l in lines {
        let v: Value = serde_json::from_str(l).unwrap_or(Value::String(l.clone()));
        map.entry(v.get("id").and_then(Value::as_u64)).or_default().push(v);
    }
    map
}

/// Runs the suite against `command`, using `queries` (canonical SQL over
/// `env`) as generate inputs and the answers as parse inputs.
pub fn check_conformance(
    command: &str,
    env: &DatabaseEnv,
    queries: &[String],
    timeout: Duration,
) -> Result<ConformanceReport> {
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(command)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| Error::Adapter(format!("cannot start `{command}`: {e}")))?;
    let mut stdin = child.stdin.take().expect("piped stdin");
    let stdout = child.stdout.take().expect("piped stdout");
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(stdout).lines() {
            let Ok(line) = line else { break };
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    let mut report = ConformanceReport::default();
    let schema = serde_json::to_value(env.to_schema_entry()).expect("schema serializes");
    let mut send = |v: Value| -> Result<()> {
        writeln!(stdin, "{v}")
            .and_then(|_| stdin.flush())
            .map_err(|e| Error::Adapter(format!("cannot write to `{command}`: {e}")))
    };

    let hello = collect(&rx, 1, Instant::now() + timeout);
    let hello_ok = hello.first().and_then(|l| serde_json::from_str::<Value>(l).ok()).is_some_and(|v| {
        v.as_object().is_some_and(|o| {
            o.len() == 2
                && o.get("protocol") == Some(&json!(PROTOCOL))
                && o.get("concurrent").is_some_and(Value::is_boolean)
        })
    });
    report.check(
        "handshake",
        hello_ok,
        hello.first().cloned().unwrap_or_else(|| "<none>".into()),
    );
    if !hello_ok {
        let _ = child.kill();
        let _ = child.wait();
        return Ok(report);
    }

    let n = queries.len() as u64;
    for (i, q) in queries.iter().enumerate() {
        send(json!({"id": i as u64 + 1, "method": "generate", "params": {
            "query": q, "db_id": env.db_id, "schema": schema,
        }}))?;
    }
    let gen = by_id(&collect(&rx, queries.len(), Instant::now() + timeout * 2));
    let mut utterances = Vec::new();
    let mut gen_ok = true;
    let mut detail = String::new();
    for id in 1..=n {
        let u = match gen.get(&Some(id)).map(Vec::as_slice) {
            Some([v]) => v["result"]["utterance"].as_str().filter(|u| !u.trim().is_empty()),
            _ => None,
        };
        if u.is_none() {
            gen_ok = false;
            detail = format!("generate {id}: {:?}", gen.get(&Some(id)));
        }
        utterances.push(u.map(str::to_string));
    }
    report.check("generate answers", gen_ok, detail);

    let mut parsed = Vec::new();
    let mut parse_ok = true;
    let mut detail = String::new();
    let base = n + 1;
    let mut sent = 0u64;
    for (i, u) in utterances.iter().enumerate() {
        if let Some(u) = u {
            send(json!({"id": base + i as u64, "method": "parse", "params": {
                "utterance": u, "db_id": env.db_id, "schema": schema,
                "input": TurnContext::new(None, u).rendered_input,
            }}))?;
            sent += 1;
        }
    }
    let got = by_id(&collect(&rx, sent as usize, Instant::now() + timeout * 2));
    for (i, u) in utterances.iter().enumerate() {
        let id = base + i as u64;
        let q = match (u, got.get(&Some(id)).map(Vec::as_slice)) {
            (None, _) => None,
            (Some(_), Some([v])) => v["result"]["query"].as_str().map(str::to_string),
            (Some(_), other) => {
                parse_ok = false;
                detail = format!("parse {id}: {other:?}");
                None
            }
        };
        parsed.push(q);
    }
    report.check("parse answers", parse_ok, detail);

    let odd = base + n;
    send(json!({"id": odd, "method": "translate", "params": {}}))?;
    let unknown = by_id(&collect(&rx, 1, Instant::now() + timeout));
    let unknown_ok = matches!(unknown.get(&Some(odd)).map(Vec::as_slice),
        Some([v]) if v.get("error").is_some_and(Value::is_string) && v.get("result").is_none());
    report.check("unknown method", unknown_ok, format!("{unknown:?}"));

    drop(stdin);
    let stray = collect(&rx, usize::MAX, Instant::now() + timeout.min(Duration::from_secs(2)));
    report.check("no extra responses", stray.is_empty(), stray.join("\n"));
    let _ = child.kill();
    let _ = child.wait();

    report.round_trips = queries
        .iter()
        .cloned()
        .zip(utterances)
        .zip(parsed)
        .map(|((q, u), p)| (q, u, p))
        .collect();
    Ok(report)
}
