use std::io::{BufRead, Write};

use serde_json::{json, Value};

use super::{GenerateRequest, Handshake, ModelAdapter, ParseRequest, PROTOCOL};
use crate::error::{Error, Result};

/// Serves `model` over a JSON-lines stream until `input` ends.
///
/// Requests are answered one at a time, so the handshake advertises
/// `"concurrent": false`. Lines that are not JSON objects with an integer
/// id are logged and skipped.
pub fn serve<R: BufRead, W: Write>(model: &dyn ModelAdapter, input: R, mut output: W) -> Result<()> {
    let io = |e| Error::io("<adapter stdout>", e);
    let hello = Handshake {
        protocol: PROTOCOL.to_string(),
        concurrent: false,
    };
    writeln!(output, "{}", serde_json::to_string(&hello).expect("handshake serializes")).map_err(io)?;
    output.flush().map_err(io)?;
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<adapter stdin>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let Some(reply) = answer(model, &line) else {
            tracing::warn!(line = %line, "skipping malformed request");
            continue;
        };
        writeln!(output, "{reply}").map_err(io)?;
        output.flush().map_err(io)?;
    }
    Ok(())
}

fn answer(model: &dyn ModelAdapter, line: &str) -> Option<Value> {
    let req: Value = serde_json::from_str(line).ok()?;
    let id = req.get("id")?.as_u64()?;
    let params = req.get("params").cloned().unwrap_or(Value::Null);
    let outcome: std::result::Result<Value, String> = match req.get("method").and_then(Value::as_str) {
        Some("generate") => serde_json::from_value::<GenerateRequest>(params)
            .map_err(|e| format!("bad params: {e}"))
            .and_then(|p| model.generate(&p).map_err(|e| e.to_string()))
            .map(|r| json!(r)),
        Some("parse") => serde_json::from_value::<ParseRequest>(params)
            .map_err(|e| format!("bad params: {e}"))
            .and_then(|p| model.parse(&p).map_err(|e| e.to_string()))
            .map(|r| json!(r)),
        _ => Err("unknown method".to_string()),
    };
    Some(match outcome {
        Ok(result) => json!({"id": id, "result": result}),
        Err(error) => json!({"id": id, "error": error}),
    })
}
