//! gdb-style commands over a manager, for the interactive debugger.

use super::api::parse_step;
use super::{DebugView, Manager};
use crate::view;
use crate::vm::parser::{parse_class, parse_method};
use crate::vm::ChangeRecord;
use crate::wire::ResumeStrategy;

pub const HELP: &str = "\
sessions                      list received sessions
open N                        open session N
close                         close the open session
replay [N]                    rebuild session N (default: open one) from its stored blob
bt                            show the stack
frame K                       select frame K (0 = top)
into | over | through         step
restart [K]                   restart frame K (default: selected)
proceed                       run until the next suspension
inspect PATH | @OID [PATH]    inspect a value; PATH like local:x or field:name
eval EXPR                     evaluate in the selected frame
edit CLASS METHOD-SOURCE      add or change a method
edit class CLASS-SOURCE       add a class
changes                       list recorded changes
commit [MONITOR]              send recorded changes as one patch
resume [N] [STRATEGY]         restart-task (default), proceed-in-place or discard
discard [N]                   discard a session
help                          this text";

/// Per-terminal state.
#[derive(Debug, Default)]
pub struct CliState {
    pub frame: usize,
}

fn num(s: Option<&str>, what: &str) -> Result<u64, String> {
    s.ok_or(format!("missing {what}"))?.parse().map_err(|_| format!("bad {what}"))
}

fn show(v: &DebugView, selected: usize) -> String {
    let mut out = v.render();
    if let Some(f) = v.frames.get(selected) {
        for l in &f.locals {
            out.push_str(&format!("\n  {} = {}", l.name, l.value));
        }
    }
    out
}

fn current(mgr: &Manager, id: Option<&str>) -> Result<u64, String> {
    match id {
        Some(s) => num(Some(s), "session"),
        None => mgr.open_session_id().ok_or("no session is open".to_string()),
    }
}

/// Runs one command line, returning its output.
pub fn execute(mgr: &Manager, st: &mut CliState, line: &str) -> Result<String, String> {
    let line = line.trim();
    let (verb, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
    let rest = rest.trim();
    let mut args = rest.split_whitespace();
    let e = |e: super::ManagerError| e.to_string();
    match verb {
        "" => Ok(String::new()),
        "help" => Ok(HELP.to_string()),
        "sessions" => {
            let rows: Vec<String> = mgr
                .sessions()
                .iter()
                .map(|s| {
                    let exc = s.exception.as_ref().map_or(String::new(), |x| format!(" {}: {}", x.class, x.message));
                    format!("{} monitor={} {} {} {}B{}", s.id, s.monitor, s.status.name(), s.mode, s.bytes, exc)
                })
                .collect();
            Ok(if rows.is_empty() { "no sessions".to_string() } else { rows.join("\n") })
        }
        "open" => {
            st.frame = 0;
            mgr.open(num(args.next(), "session")?).map(|v| show(&v, 0)).map_err(e)
        }
        "close" => mgr.close().map(|_| "closed".to_string()).map_err(e),
        "replay" => {
            st.frame = 0;
            let id = current(mgr, args.next())?;
            mgr.replay(id).map(|v| show(&v, 0)).map_err(e)
        }
        "bt" => mgr.view().map(|v| v.render()).map_err(e),
        "frame" => {
            let k = num(args.next(), "frame")? as usize;
            let v = mgr.view().map_err(e)?;
            if k >= v.frames.len() {
                return Err(format!("frame {k} out of range"));
            }
            st.frame = k;
            Ok(show(&v, k))
        }
        "into" | "over" | "through" | "proceed" | "restart" => {
            let k = match args.next() {
                Some(s) => Some(num(Some(s), "frame")?),
                None => Some(st.frame as u64),
            };
            let op = parse_step(verb, k).expect("known step");
            st.frame = 0;
            mgr.step(op).map(|v| show(&v, 0)).map_err(e)
        }
        "inspect" => {
            let (oid, path) = match rest.strip_prefix('@') {
                Some(r) => {
                    let (o, p) = r.split_once(char::is_whitespace).unwrap_or((r, ""));
                    (num(Some(o), "oid")?, p.trim().to_string())
                }
                None if rest.starts_with("frame:") => (0, rest.to_string()),
                None => (0, format!("frame:{}/{rest}", st.frame)),
            };
            mgr.inspect(oid, &path).map(|s| view::describe(&s)).map_err(e)
        }
        "eval" => mgr.evaluate(st.frame, rest).map(|r| r.display).map_err(e),
        "edit" => {
            let (target, src) = rest.split_once(char::is_whitespace).ok_or("usage: edit CLASS SOURCE")?;
            let src = src.trim().to_string();
            let change = if target == "class" {
                parse_class(&src).map_err(|e| e.to_string())?;
                ChangeRecord::AddClass { source: src }
            } else {
                let ast = parse_method(&src).map_err(|e| e.to_string())?;
                if mgr.source(target, &ast.selector).is_some() {
                    ChangeRecord::ChangeMethod { class: target.to_string(), selector: ast.selector, source: src }
                } else {
                    ChangeRecord::AddMethod { class: target.to_string(), source: src }
                }
            };
            mgr.record_change(change).map(|_| "recorded".to_string()).map_err(e)
        }
        "changes" => {
            let c = mgr.pending_changes();
            Ok(if c.is_empty() {
                "no changes".to_string()
            } else {
                c.iter().map(|c| serde_json::to_string(c).expect("serializable")).collect::<Vec<_>>().join("\n")
            })
        }
        "commit" => {
            let m = args.next().map(|s| num(Some(s), "monitor")).transpose()?;
            mgr.commit(m).map(|h| format!("patch applied, code at {h}")).map_err(e)
        }
        "resume" => {
            let mut id = None;
            let mut strategy = ResumeStrategy::RestartTask;
            for a in args {
                match ResumeStrategy::parse(a) {
                    Some(s) => strategy = s,
                    None => id = Some(a),
                }
            }
            let id = current(mgr, id)?;
            mgr.resume(id, strategy).map(|_| format!("session {id}: {}", strategy.name())).map_err(e)
        }
        "discard" => {
            let id = current(mgr, args.next())?;
            mgr.discard(id).map(|_| format!("session {id} discarded")).map_err(e)
        }
        other => Err(format!("unknown command {other:?}; try help")),
    }
}
