//! Client side of the JSON-lines protocol.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use super::{
    GenerateRequest, GenerateResponse, Handshake, ModelAdapter, ParseRequest, ParseResponse,
    PROTOCOL,
};
use crate::error::{Error, Result};

enum Reply {
    Result(Value),
    Error(String),
    Malformed(String),
}

#[derive(Default)]
struct Shared {
    pending: Mutex<HashMap<u64, Sender<Reply>>>,
    closed: AtomicBool,
}

/// An adapter running as a child process.
///
/// Requests carry increasing ids and are matched to responses by a reader
/// thread. Unless the handshake says `"concurrent": true`, only one request
/// is in flight at a time.
pub struct SubprocessAdapter {
    name: String,
    child: Mutex<Child>,
    stdin: Mutex<ChildStdin>,
    shared: Arc<Shared>,
    next_id: AtomicU64,
    concurrent: bool,
    serial: Mutex<()>,
    timeout: Duration,
}

impl SubprocessAdapter {
    /// Starts `command` under `sh -c` and waits for its handshake.
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Adapter(format!("cannot start `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let shared = Arc::new(Shared::default());
        let (hello_tx, hello_rx) = mpsc::channel::<String>();
        let reader_shared = Arc::clone(&shared);
        thread::spawn(move || read_loop(BufReader::new(stdout), hello_tx, &reader_shared));

        let kill = |mut child: Child| {
            let _ = child.kill();
            let _ = child.wait();
        };
        let line = match hello_rx.recv_timeout(timeout) {
            Ok(line) => line,
            Err(RecvTimeoutError::Timeout) => {
                kill(child);
                return Err(Error::Adapter(format!("`{command}` sent no handshake within {timeout:?}")));
            }
            Err(RecvTimeoutError::Disconnected) => {
                kill(child);
                return Err(Error::Adapter(format!("`{command}` exited before its handshake")));
            }
        };
        let hello: Handshake = match serde_json::from_str(&line) {
            Ok(h) => h,
            Err(e) => {
                kill(child);
                return Err(Error::Protocol(format!("bad handshake `{line}`: {e}")));
            }
        };
        if hello.protocol != PROTOCOL {
            kill(child);
            return Err(Error::Protocol(format!(
                "adapter speaks `{}`, expected `{PROTOCOL}`",
                hello.protocol
            )));
        }
        Ok(SubprocessAdapter {
            name: command.to_string(),
            child: Mutex::new(child),
            stdin: Mutex::new(stdin),
            shared,
            next_id: AtomicU64::new(1),
            concurrent: hello.concurrent,
            serial: Mutex::new(()),
            timeout,
        })
    }

    pub fn is_concurrent(&self) -> bool {
        self.concurrent
    }

    fn call<P: Serialize, R: DeserializeOwned>(&self, method: &str, params: &P) -> Result<R> {
        let _turn = if self.concurrent {
            None
        } else {
            Some(self.serial.lock().unwrap_or_else(|p| p.into_inner()))
        };
        if self.shared.closed.load(Ordering::SeqCst) {
            return Err(Error::Adapter(format!("{} has exited", self.name)));
        }
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let (tx, rx) = mpsc::channel();
        self.pending().insert(id, tx);
        if self.shared.closed.load(Ordering::SeqCst) {
            self.pending().remove(&id);
            return Err(Error::Adapter(format!("{} has exited", self.name)));
        }
        let line = json!({"id": id, "method": method, "params": params}).to_string();
        tracing::debug!(adapter = %self.name, id, method, "request");
        let written = {
            let mut stdin = self.stdin.lock().unwrap_or_else(|p| p.into_inner());
            writeln!(stdin, "{line}").and_then(|_| stdin.flush())
        };
        if let Err(e) = written {
            self.pending().remove(&id);
            return Err(Error::Adapter(format!("{}: cannot send request: {e}", self.name)));
        }
        let reply = rx.recv_timeout(self.timeout);
        tracing::debug!(adapter = %self.name, id, ok = reply.is_ok(), "response");
        match reply {
            Ok(Reply::Result(v)) => serde_json::from_value(v)
                .map_err(|e| Error::Protocol(format!("response {id}: {e}"))),
            Ok(Reply::Error(msg)) => Err(Error::Adapter(format!("{}: {msg}", self.name))),
            Ok(Reply::Malformed(msg)) => Err(Error::Protocol(format!("response {id}: {msg}"))),
            Err(RecvTimeoutError::Timeout) => {
                self.pending().remove(&id);
                Err(Error::Adapter(format!(
                    "{}: no response to request {id} within {:?}",
                    self.name, self.timeout
                )))
            }
            Err(RecvTimeoutError::Disconnected) => {
                Err(Error::Adapter(format!("{} exited during request {id}", self.name)))
            }
        }
    }

    fn pending(&self) -> std::sync::MutexGuard<'_, HashMap<u64, Sender<Reply>>> {
        self.shared.pending.lock().unwrap_or_else(|p| p.into_inner())
    }
}

fn read_loop<R: BufRead>(reader: R, hello: Sender<String>, shared: &Shared) {
    let mut lines = reader.lines();
    if let Some(Ok(first)) = lines.next() {
        let _ = hello.send(first);
    }
    drop(hello);
    for line in lines {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let Ok(v) = serde_json::from_str::<Value>(&line) else {
            tracing::warn!(line = %line, "adapter wrote a non-JSON line");
            continue;
        };
        let Some(id) = v.get("id").and_then(Value::as_u64) else {
            tracing::warn!(line = %line, "adapter response without an id");
            continue;
        };
        let reply = match (v.get("result"), v.get("error")) {
            (Some(r), None) => Reply::Result(r.clone()),
            (None, Some(Value::String(e))) => Reply::Error(e.clone()),
            _ => Reply::Malformed("expected exactly one of result or error(string)".into()),
        };
        let tx = shared
            .pending
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .remove(&id);
        match tx {
            Some(tx) => {
                let _ = tx.send(reply);
            }
            None => tracing::warn!(id, "response to an unknown or expired request"),
        }
    }
    shared.closed.store(true, Ordering::SeqCst);
    shared
        .pending
        .lock()
        .unwrap_or_else(|p| p.into_inner())
        .clear();
}

impl ModelAdapter for SubprocessAdapter {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse> {
        self.call("generate", req)
    }

    fn parse(&self, req: &ParseRequest) -> Result<ParseResponse> {
        self.call("parse", req)
    }
}

impl Drop for SubprocessAdapter {
    fn drop(&mut self) {
        let child = self.child.get_mut().unwrap_or_else(|p| p.into_inner());
        let _ = child.kill();
        let _ = child.wait();
    }
}
