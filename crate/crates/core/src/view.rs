//! Summaries of an execution for display: stack listings, value previews and
//! inspection by path.
//!
//! Inspection paths are `/`-separated steps. From an execution they start
//! with `frame:K` (K counted from the top) followed by `receiver`,
//! `local:NAME` or `stack:I`; from an object they use `field:NAME` or
//! `index:I`. `frame:K` alone yields the frame's receiver and locals.

use crate::vm::image::{ProgramImage, ARRAY_CLASS, FILE_STREAM_CLASS};
use crate::vm::interp::render;
use crate::vm::state::{ExecutionState, HeapObject};
use crate::vm::{Oid, Value};
use crate::wire::{FrameSummary, Preview, StackSummary, ValueSummary, PREVIEW_LIMIT};

pub fn preview(st: &ExecutionState, v: &Value) -> Preview {
    match v {
        Value::Str(s) if s.chars().count() > PREVIEW_LIMIT => Preview::LongString {
            prefix: s.chars().take(PREVIEW_LIMIT).collect(),
            len: s.chars().count() as u32,
        },
        Value::Ref(o) => Preview::Handle {
            oid: o.0,
            class: st.object(*o).map_or_else(|| "?".to_string(), |obj| obj.class.to_string()),
        },
        other => Preview::Scalar(other.clone()),
    }
}

/// Field names of an object, falling back to positions for unknown shapes.
pub fn field_names(image: &ProgramImage, obj: &HeapObject) -> Vec<String> {
    let positional = || (0..obj.fields.len()).map(|i| i.to_string()).collect();
    if &*obj.class == ARRAY_CLASS {
        return positional();
    }
    match image.class(&obj.class) {
        Some(c) if c.ivars.len() == obj.fields.len() => c.ivars.clone(),
        _ => positional(),
    }
}

fn frame_index(st: &ExecutionState, k: usize) -> Result<usize, String> {
    if k >= st.depth() {
        return Err(format!("frame {k} out of range (depth {})", st.depth()));
    }
    Ok(st.depth() - 1 - k)
}

/// Summary of frame `k` (top-relative).
pub fn frame_summary(st: &ExecutionState, k: usize, with_locals: bool) -> Result<FrameSummary, String> {
    let f = &st.frames[frame_index(st, k)?];
    let locals = if with_locals {
        f.local_names().iter().zip(&f.locals).map(|(n, v)| (n.clone(), preview(st, v))).collect()
    } else {
        Vec::new()
    };
    Ok(FrameSummary {
        method: f.method.display_name(),
        pc: f.pc as u32,
        line: f.line(),
        receiver: preview(st, &f.receiver),
        locals,
    })
}

/// The stack, top first. Locals are included for the top `locals_depth`
/// frames.
pub fn stack_summary(st: &ExecutionState, locals_depth: usize) -> StackSummary {
    StackSummary {
        status: st.status.name().to_string(),
        exception: st.exception.as_ref().map(|e| (e.class_name.clone(), e.message.clone())),
        frames: (0..st.depth())
            .map(|k| frame_summary(st, k, k < locals_depth).expect("index in range"))
            .collect(),
    }
}

/// One level of a value: scalars in full, objects with previews of their
/// fields.
pub fn summarize(st: &ExecutionState, image: &ProgramImage, v: &Value) -> ValueSummary {
    let Value::Ref(oid) = v else {
        return ValueSummary::Scalar(v.clone());
    };
    let Some(obj) = st.object(*oid) else {
        return ValueSummary::Text(render(st, v));
    };
    if &*obj.class == FILE_STREAM_CLASS {
        return ValueSummary::Proxy {
            oid: oid.0,
            class: obj.class.to_string(),
            path: obj.fields.first().and_then(|p| p.as_str()).unwrap_or("").to_string(),
            position: obj.fields.get(1).and_then(Value::as_int).unwrap_or(0).max(0) as u64,
        };
    }
    let fields = field_names(image, obj).into_iter().zip(&obj.fields).map(|(n, f)| (n, preview(st, f))).collect();
    ValueSummary::Object { oid: oid.0, class: obj.class.to_string(), fields }
}

enum Cursor {
    Start,
    Frame(usize),
    Value(Value),
}

fn parse_index(s: &str) -> Result<usize, String> {
    s.parse().map_err(|_| format!("bad index {s:?}"))
}

/// Follows an inspection path from `oid` (0 = from the execution).
pub fn inspect(st: &ExecutionState, image: &ProgramImage, oid: u64, path: &str) -> Result<ValueSummary, String> {
    let mut cur = if oid == 0 { Cursor::Start } else { Cursor::Value(Value::Ref(Oid(oid))) };
    if let Cursor::Value(Value::Ref(o)) = &cur {
        if st.object(*o).is_none() {
            return Err(format!("no object {o}"));
        }
    }
    for step in path.split('/').filter(|s| !s.is_empty()) {
        let (kind, arg) = step.split_once(':').unwrap_or((step, ""));
        cur = match (cur, kind) {
            (Cursor::Start, "frame") => Cursor::Frame(frame_index(st, parse_index(arg)?)?),
            (Cursor::Frame(i), "receiver") => Cursor::Value(st.frames[i].receiver.clone()),
            (Cursor::Frame(i), "local") => {
                let v = st.frames[i].local(arg).ok_or_else(|| format!("no local {arg:?}"))?;
                Cursor::Value(v.clone())
            }
            (Cursor::Frame(i), "stack") => {
                let v = st.frames[i].stack.get(parse_index(arg)?).ok_or_else(|| format!("no stack slot {arg}"))?;
                Cursor::Value(v.clone())
            }
            (Cursor::Value(Value::Ref(o)), "field" | "index") => {
                let obj = st.object(o).ok_or_else(|| format!("no object {o}"))?;
                let i = if kind == "index" {
                    parse_index(arg)?
                } else {
                    field_names(image, obj).iter().position(|n| n == arg).ok_or_else(|| format!("no field {arg:?}"))?
                };
                Cursor::Value(obj.fields.get(i).cloned().ok_or_else(|| format!("no field {i}"))?)
            }
            (_, _) => return Err(format!("cannot follow {step:?}")),
        };
    }
    match cur {
        Cursor::Start => Err("empty inspection path".to_string()),
        Cursor::Frame(i) => {
            let f = &st.frames[i];
            let mut fields = vec![("self".to_string(), preview(st, &f.receiver))];
            fields.extend(f.local_names().iter().zip(&f.locals).map(|(n, v)| (n.clone(), preview(st, v))));
            Ok(ValueSummary::Object { oid: 0, class: f.method.display_name(), fields })
        }
        Cursor::Value(v) => Ok(summarize(st, image, &v)),
    }
}

/// Text of a value summary for terminal display.
pub fn describe(s: &ValueSummary) -> String {
    match s {
        ValueSummary::Scalar(Value::Str(t)) => format!("{t:?}"),
        ValueSummary::Scalar(v) => v.to_string(),
        ValueSummary::Object { oid, class, fields } => {
            let body: Vec<String> = fields.iter().map(|(n, p)| format!("{n}: {}", describe_preview(p))).collect();
            if *oid == 0 {
                format!("{class} {{ {} }}", body.join(", "))
            } else {
                format!("{class}@{oid} {{ {} }}", body.join(", "))
            }
        }
        ValueSummary::Proxy { oid, class, path, position } => format!("{class}@{oid} (remote {path} at {position})"),
        ValueSummary::Text(t) => t.clone(),
    }
}

pub fn describe_preview(p: &Preview) -> String {
    match p {
        Preview::Scalar(Value::Str(t)) => format!("{t:?}"),
        Preview::Scalar(v) => v.to_string(),
        Preview::LongString { prefix, len } => format!("{prefix:?}... ({len} chars)"),
        Preview::Handle { oid, class } => format!("{class}@{oid}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::host::NoFiles;
    use crate::vm::{spawn, TaskArgs, Vm};

    #[test]
    fn paths_reach_locals_and_fields() {
        let src = "class T { method go(s) { var p; p := new P(); p.setX(s); halt; return p; } }
                   class P { var x, y; method setX(v) { x := v; } }";
        let img = ProgramImage::load(src).unwrap();
        let long = "z".repeat(100);
        let mut st = spawn(&img, "T", "go", &TaskArgs::scalars([Value::from(long.as_str())])).unwrap();
        Vm::new(&img, &mut NoFiles::default()).run(&mut st).unwrap();
        let top = stack_summary(&st, 1);
        assert_eq!(top.frames[0].method, "T>>go");
        assert!(matches!(top.frames[0].locals[0].1, Preview::LongString { len: 100, .. }));
        let p = inspect(&st, &img, 0, "frame:0/local:p").unwrap();
        let ValueSummary::Object { oid, class, fields } = p else { panic!() };
        assert_eq!(class, "P");
        assert_eq!(fields[1], ("y".to_string(), Preview::Scalar(Value::Nil)));
        assert_eq!(inspect(&st, &img, oid, "field:x").unwrap(), ValueSummary::Scalar(Value::from(long.as_str())));
        assert!(inspect(&st, &img, 0, "frame:3").is_err());
        assert!(inspect(&st, &img, oid, "field:q").is_err());
    }
}
