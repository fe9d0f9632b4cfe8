//! Line-delimited JSON control API.
//!
//! Each request is one JSON object on one line:
//! `{"id": 1, "op": "open", "session": 3}`. Each response echoes the id:
//! `{"id": 1, "ok": true, "result": ...}` or
//! `{"id": 1, "ok": false, "error": {"code": "AlreadyOpen", "message": "..."}}`.
//! After `{"op": "subscribe"}` the connection also receives push lines
//! such as `{"push": "session_arrived", "session": {...}}`.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::{json, Map, Value as Json};

use super::{Manager, ManagerError};
use crate::view;
use crate::vm::{ChangeRecord, StepOp, Value};
use crate::wire::{Preview, ResumeStrategy, ValueSummary};

fn scalar(v: &Value) -> Json {
    match v {
        Value::Nil => Json::Null,
        Value::Bool(b) => json!(b),
        Value::Int(i) => json!(i),
        Value::Float(x) => serde_json::Number::from_f64(*x).map_or_else(|| json!(x.to_string()), Json::Number),
        Value::Str(s) => json!(&**s),
        Value::Ref(o) => json!({ "ref": o.0 }),
    }
}

pub fn preview_json(p: &Preview) -> Json {
    match p {
        Preview::Scalar(v) => json!({ "kind": "scalar", "value": scalar(v) }),
        Preview::LongString { prefix, len } => json!({ "kind": "long_string", "prefix": prefix, "length": len }),
        Preview::Handle { oid, class } => json!({ "kind": "handle", "oid": oid, "class": class }),
    }
}

pub fn summary_json(s: &ValueSummary) -> Json {
    match s {
        ValueSummary::Scalar(v) => json!({ "kind": "scalar", "value": scalar(v) }),
        ValueSummary::Object { oid, class, fields } => json!({
            "kind": "object",
            "oid": oid,
            "class": class,
            "fields": fields.iter().map(|(n, p)| json!({ "name": n, "value": preview_json(p) })).collect::<Vec<_>>(),
        }),
        ValueSummary::Proxy { oid, class, path, position } => {
            json!({ "kind": "proxy", "oid": oid, "class": class, "path": path, "position": position })
        }
        ValueSummary::Text(t) => json!({ "kind": "text", "text": t }),
    }
}

#[derive(Debug)]
struct BadRequest {
    code: &'static str,
    message: String,
}

impl From<ManagerError> for BadRequest {
    fn from(e: ManagerError) -> Self {
        BadRequest { code: e.code(), message: e.to_string() }
    }
}

fn bad(msg: impl Into<String>) -> BadRequest {
    BadRequest { code: "BadRequest", message: msg.into() }
}

fn field<'a>(req: &'a Map<String, Json>, name: &str) -> Result<&'a Json, BadRequest> {
    req.get(name).ok_or_else(|| bad(format!("missing field {name:?}")))
}

fn u64_field(req: &Map<String, Json>, name: &str) -> Result<u64, BadRequest> {
    field(req, name)?.as_u64().ok_or_else(|| bad(format!("field {name:?} must be a non-negative integer")))
}

fn opt_u64(req: &Map<String, Json>, name: &str) -> Result<Option<u64>, BadRequest> {
    match req.get(name) {
        None | Some(Json::Null) => Ok(None),
        Some(_) => u64_field(req, name).map(Some),
    }
}

fn str_field<'a>(req: &'a Map<String, Json>, name: &str) -> Result<&'a str, BadRequest> {
    field(req, name)?.as_str().ok_or_else(|| bad(format!("field {name:?} must be a string")))
}

pub fn parse_step(name: &str, frame: Option<u64>) -> Option<StepOp> {
    Some(match name {
        "into" => StepOp::Into,
        "over" => StepOp::Over,
        "through" => StepOp::Through,
        "proceed" => StepOp::Proceed,
        "restart" => StepOp::Restart(frame.unwrap_or(0) as usize),
        _ => return None,
    })
}

fn to_json<T: serde::Serialize>(v: &T) -> Json {
    serde_json::to_value(v).expect("serializable")
}

fn dispatch(mgr: &Manager, req: &Map<String, Json>) -> Result<Json, BadRequest> {
    let op = str_field(req, "op")?;
    Ok(match op {
        "list_sessions" => to_json(&mgr.sessions()),
        "monitors" => to_json(&mgr.monitors()),
        "open" => to_json(&mgr.open(u64_field(req, "session")?)?),
        "replay" => to_json(&mgr.replay(u64_field(req, "session")?)?),
        "close" => {
            mgr.close()?;
            Json::Null
        }
        "view" => to_json(&mgr.view()?),
        "step" => {
            let name = str_field(req, "step")?;
            let op = parse_step(name, opt_u64(req, "frame")?).ok_or_else(|| bad(format!("unknown step {name:?}")))?;
            to_json(&mgr.step(op)?)
        }
        "inspect" => {
            let oid = opt_u64(req, "oid")?.unwrap_or(0);
            let path = req.get("path").and_then(Json::as_str).unwrap_or("");
            summary_json(&mgr.inspect(oid, path)?)
        }
        "eval" => {
            let frame = opt_u64(req, "frame")?.unwrap_or(0) as usize;
            let r = mgr.evaluate(frame, str_field(req, "expr")?)?;
            json!({ "display": r.display, "value": summary_json(&r.summary) })
        }
        "source" => json!(mgr.source(str_field(req, "class")?, str_field(req, "selector")?)),
        "record_change" => {
            let change: ChangeRecord = serde_json::from_value(field(req, "change")?.clone())
                .map_err(|e| bad(format!("bad change: {e}")))?;
            mgr.record_change(change)?;
            Json::Null
        }
        "pending_changes" => to_json(&mgr.pending_changes()),
        "commit" => json!({ "code_hash": mgr.commit(opt_u64(req, "monitor")?)?.to_hex() }),
        "resume" => {
            let name = req.get("strategy").and_then(Json::as_str).unwrap_or("restart-task");
            let strategy = ResumeStrategy::parse(name).ok_or_else(|| bad(format!("unknown strategy {name:?}")))?;
            mgr.resume(u64_field(req, "session")?, strategy)?;
            Json::Null
        }
        "discard" => {
            mgr.discard(u64_field(req, "session")?)?;
            Json::Null
        }
        "counters" => {
            let c = mgr.counters().snapshot();
            json!({
                "sent": c.sent_total(),
                "received": c.received_total(),
                "by_tag": c.by_tag().iter().map(|(t, s, r)| json!({ "tag": t, "sent": s, "received": r })).collect::<Vec<_>>(),
            })
        }
        "timings" => {
            let t = mgr.last_timings();
            json!({ "materialize_ms": t.materialize.as_secs_f64() * 1e3, "replay_ms": t.replay.as_secs_f64() * 1e3 })
        }
        "describe" => {
            let oid = opt_u64(req, "oid")?.unwrap_or(0);
            json!(view::describe(&mgr.inspect(oid, req.get("path").and_then(Json::as_str).unwrap_or(""))?))
        }
        other => return Err(bad(format!("unknown op {other:?}"))),
    })
}

/// Handles one request line and returns the response line (without the
/// trailing newline). `subscribe` is handled by the server loop.
pub fn handle_line(mgr: &Manager, line: &str) -> String {
    let parsed: Result<Json, _> = serde_json::from_str(line);
    let (id, result) = match parsed {
        Err(e) => (Json::Null, Err(bad(format!("malformed JSON: {e}")))),
        Ok(Json::Object(req)) => {
            let id = req.get("id").cloned().unwrap_or(Json::Null);
            (id, dispatch(mgr, &req))
        }
        Ok(_) => (Json::Null, Err(bad("request must be a JSON object"))),
    };
    let resp = match result {
        Ok(result) => json!({ "id": id, "ok": true, "result": result }),
        Err(BadRequest { code, message }) => {
            json!({ "id": id, "ok": false, "error": { "code": code, "message": message } })
        }
    };
    resp.to_string()
}

fn is_subscribe(line: &str) -> Option<Json> {
    let v: Json = serde_json::from_str(line).ok()?;
    (v.get("op")?.as_str()? == "subscribe").then(|| v.get("id").cloned().unwrap_or(Json::Null))
}

fn serve_client(mgr: Arc<Manager>, stream: TcpStream) -> std::io::Result<()> {
    let writer = Arc::new(Mutex::new(stream.try_clone()?));
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match is_subscribe(&line) {
            Some(id) => {
                let rx = mgr.subscribe();
                let w = Arc::clone(&writer);
                thread::spawn(move || {
                    for ev in rx {
                        let mut w = w.lock().expect("writer lock");
                        if writeln!(w, "{}", to_json(&ev)).is_err() {
                            return;
                        }
                    }
                });
                json!({ "id": id, "ok": true, "result": null }).to_string()
            }
            None => handle_line(&mgr, &line),
        };
        let mut w = writer.lock().expect("writer lock");
        writeln!(w, "{resp}")?;
    }
    Ok(())
}

/// Serves the control API in the background.
pub fn serve(mgr: Arc<Manager>, addr: impl ToSocketAddrs) -> std::io::Result<SocketAddr> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    thread::Builder::new().name("control-api".into()).spawn(move || {
        for stream in listener.incoming().flatten() {
            let m = Arc::clone(&mgr);
            thread::spawn(move || {
                if let Err(e) = serve_client(m, stream) {
                    log::debug!("control client gone: {e}");
                }
            });
        }
    })?;
    Ok(local)
}
