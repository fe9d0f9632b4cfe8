use std::sync::Arc;

use crate::codec::{DecodeError, Reader, Writer};
use crate::vm::image::CodeHash;
use crate::vm::Value;

use super::WireError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResumeStrategy {
    /// Re-run the task from its descriptor under the current code.
    RestartTask,
    /// Continue the retained suspended state.
    ProceedInPlace,
    Discard,
}

impl ResumeStrategy {
    pub fn code(self) -> u8 {
        match self {
            ResumeStrategy::RestartTask => 0,
            ResumeStrategy::ProceedInPlace => 1,
            ResumeStrategy::Discard => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => ResumeStrategy::RestartTask,
            1 => ResumeStrategy::ProceedInPlace,
            2 => ResumeStrategy::Discard,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ResumeStrategy::RestartTask => "restart-task",
            ResumeStrategy::ProceedInPlace => "proceed-in-place",
            ResumeStrategy::Discard => "discard",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [ResumeStrategy::RestartTask, ResumeStrategy::ProceedInPlace, ResumeStrategy::Discard]
            .into_iter()
            .find(|r| r.name() == s)
    }
}

/// Remote stepping operations; `Query` only reports the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WireStepOp {
    Into,
    Over,
    Through,
    Restart,
    Proceed,
    Query,
}

impl WireStepOp {
    fn code(self) -> u8 {
        match self {
            WireStepOp::Into => 0,
            WireStepOp::Over => 1,
            WireStepOp::Through => 2,
            WireStepOp::Restart => 3,
            WireStepOp::Proceed => 4,
            WireStepOp::Query => 5,
        }
    }

    fn from_code(c: u8) -> Result<Self, DecodeError> {
        Ok(match c {
            0 => WireStepOp::Into,
            1 => WireStepOp::Over,
            2 => WireStepOp::Through,
            3 => WireStepOp::Restart,
            4 => WireStepOp::Proceed,
            5 => WireStepOp::Query,
            tag => return Err(DecodeError::BadTag { what: "step op", tag }),
        })
    }
}

/// One-line rendering of a value held remotely.
#[derive(Debug, Clone, PartialEq)]
pub enum Preview {
    /// A scalar. Long strings are cut and flagged with their full length.
    Scalar(Value),
    LongString { prefix: String, len: u32 },
    Handle { oid: u64, class: String },
}

/// Strings longer than this are previewed, not sent.
pub const PREVIEW_LIMIT: usize = 48;

#[derive(Debug, Clone, PartialEq)]
pub enum ValueSummary {
    Scalar(Value),
    Object { oid: u64, class: String, fields: Vec<(String, Preview)> },
    Proxy { oid: u64, class: String, path: String, position: u64 },
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSummary {
    pub method: String,
    pub pc: u32,
    pub line: u32,
    pub receiver: Preview,
    pub locals: Vec<(String, Preview)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackSummary {
    pub status: String,
    pub exception: Option<(String, String)>,
    /// Top frame first.
    pub frames: Vec<FrameSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Register { req: u32, monitor_id: u64, code_hash: CodeHash },
    SessionTransfer { req: u32, session_id: u64, blob: Vec<u8> },
    ProxyReadRequest { req: u32, resource_id: u64, offset: u64, length: u32 },
    ProxyReadResponse { ref_id: u32, bytes: Vec<u8>, eof: bool },
    CommitPatch { req: u32, patch_id: u64, changes: Vec<u8> },
    PatchApplied { ref_id: u32, patch_id: u64, code_hash: CodeHash },
    ResumeSession { req: u32, session_id: u64, strategy: ResumeStrategy },
    DiscardSession { req: u32, session_id: u64 },
    StepRequest { req: u32, session_id: u64, op: WireStepOp, frame_index: Option<u32> },
    StepResponse { ref_id: u32, summary: StackSummary },
    InspectRequest { req: u32, session_id: u64, oid: u64, path: String },
    InspectResponse { ref_id: u32, summary: ValueSummary },
    Ack { ref_id: u32 },
    Error { ref_id: u32, reason: String },
    /// Opens a file at the origin on behalf of a debugged session.
    ProxyOpenRequest { req: u32, session_id: u64, path: String },
    ProxyOpenResponse { ref_id: u32, resource_id: u64, size: u64 },
    /// Remote evaluation against a retained state (baseline mode).
    EvalRequest { req: u32, session_id: u64, frame_index: u32, expr: String },
    /// Remote code browser: fetch a listing (`classes`, `class:<Name>`).
    BrowseRequest { req: u32, path: String },
    BrowseResponse { ref_id: u32, text: String },
    /// Remote code browser: push the whole edit buffer; `accept` applies it.
    RemoteEdit { req: u32, target: String, buffer: String, accept: bool },
}

pub const TAG_NAMES: [&str; 20] = [
    "Register",
    "SessionTransfer",
    "ProxyReadRequest",
    "ProxyReadResponse",
    "CommitPatch",
    "PatchApplied",
    "ResumeSession",
    "DiscardSession",
    "StepRequest",
    "StepResponse",
    "InspectRequest",
    "InspectResponse",
    "Ack",
    "Error",
    "ProxyOpenRequest",
    "ProxyOpenResponse",
    "EvalRequest",
    "BrowseRequest",
    "BrowseResponse",
    "RemoteEdit",
];

pub fn tag_name(tag: u8) -> &'static str {
    TAG_NAMES.get((tag as usize).wrapping_sub(1)).copied().unwrap_or("Unknown")
}

/// Frame header: u32 length of tag + payload, then the tag byte.
pub const HEADER_LEN: usize = 5;
/// Frames larger than this are rejected.
pub const MAX_FRAME: usize = 256 << 20;

fn write_value(w: &mut Writer, v: &Value) {
    match v {
        Value::Nil => w.u8(0),
        Value::Bool(true) => w.u8(1),
        Value::Bool(false) => w.u8(2),
        Value::Int(i) => {
            w.u8(3);
            w.i64(*i);
        }
        Value::Float(x) => {
            w.u8(4);
            w.f64(*x);
        }
        Value::Str(s) => {
            w.u8(5);
            w.str(s);
        }
        Value::Ref(o) => {
            w.u8(6);
            w.u64(o.0);
        }
    }
}

fn read_value(r: &mut Reader<'_>) -> Result<Value, DecodeError> {
    Ok(match r.u8()? {
        0 => Value::Nil,
        1 => Value::Bool(true),
        2 => Value::Bool(false),
        3 => Value::Int(r.i64()?),
        4 => Value::Float(r.f64()?),
        5 => Value::Str(Arc::from(r.str()?)),
        6 => Value::Ref(crate::vm::Oid(r.u64()?)),
        tag => return Err(DecodeError::BadTag { what: "value", tag }),
    })
}

fn write_preview(w: &mut Writer, p: &Preview) {
    match p {
        Preview::Scalar(v) => {
            w.u8(0);
            write_value(w, v);
        }
        Preview::LongString { prefix, len } => {
            w.u8(1);
            w.str(prefix);
            w.u32(*len);
        }
        Preview::Handle { oid, class } => {
            w.u8(2);
            w.u64(*oid);
            w.str(class);
        }
    }
}

fn read_preview(r: &mut Reader<'_>) -> Result<Preview, DecodeError> {
    Ok(match r.u8()? {
        0 => Preview::Scalar(read_value(r)?),
        1 => Preview::LongString { prefix: r.str()?.to_string(), len: r.u32()? },
        2 => Preview::Handle { oid: r.u64()?, class: r.str()?.to_string() },
        tag => return Err(DecodeError::BadTag { what: "preview", tag }),
    })
}

fn write_named(w: &mut Writer, xs: &[(String, Preview)]) {
    w.u32(xs.len() as u32);
    for (n, p) in xs {
        w.str(n);
        write_preview(w, p);
    }
}

fn read_named(r: &mut Reader<'_>) -> Result<Vec<(String, Preview)>, DecodeError> {
    let n = r.count(6)?;
    (0..n).map(|_| Ok((r.str()?.to_string(), read_preview(r)?))).collect()
}

fn write_summary(w: &mut Writer, s: &ValueSummary) {
    match s {
        ValueSummary::Scalar(v) => {
            w.u8(0);
            write_value(w, v);
        }
        ValueSummary::Object { oid, class, fields } => {
            w.u8(1);
            w.u64(*oid);
            w.str(class);
            write_named(w, fields);
        }
        ValueSummary::Proxy { oid, class, path, position } => {
            w.u8(2);
            w.u64(*oid);
            w.str(class);
            w.str(path);
            w.u64(*position);
        }
        ValueSummary::Text(t) => {
            w.u8(3);
            w.str(t);
        }
    }
}

fn read_summary(r: &mut Reader<'_>) -> Result<ValueSummary, DecodeError> {
    Ok(match r.u8()? {
        0 => ValueSummary::Scalar(read_value(r)?),
        1 => ValueSummary::Object { oid: r.u64()?, class: r.str()?.to_string(), fields: read_named(r)? },
        2 => ValueSummary::Proxy {
            oid: r.u64()?,
            class: r.str()?.to_string(),
            path: r.str()?.to_string(),
            position: r.u64()?,
        },
        3 => ValueSummary::Text(r.str()?.to_string()),
        tag => return Err(DecodeError::BadTag { what: "value summary", tag }),
    })
}

fn write_stack(w: &mut Writer, s: &StackSummary) {
    w.str(&s.status);
    match &s.exception {
        None => w.u8(0),
        Some((c, m)) => {
            w.u8(1);
            w.str(c);
            w.str(m);
        }
    }
    w.u32(s.frames.len() as u32);
    for f in &s.frames {
        w.str(&f.method);
        w.u32(f.pc);
        w.u32(f.line);
        write_preview(w, &f.receiver);
        write_named(w, &f.locals);
    }
}

fn read_stack(r: &mut Reader<'_>) -> Result<StackSummary, DecodeError> {
    let status = r.str()?.to_string();
    let exception = match r.u8()? {
        0 => None,
        1 => Some((r.str()?.to_string(), r.str()?.to_string())),
        tag => return Err(DecodeError::BadTag { what: "exception flag", tag }),
    };
    let n = r.count(16)?;
    let frames = (0..n)
        .map(|_| {
            Ok(FrameSummary {
                method: r.str()?.to_string(),
                pc: r.u32()?,
                line: r.u32()?,
                receiver: read_preview(r)?,
                locals: read_named(r)?,
            })
        })
        .collect::<Result<_, DecodeError>>()?;
    Ok(StackSummary { status, exception, frames })
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::Register { .. } => 1,
            Message::SessionTransfer { .. } => 2,
            Message::ProxyReadRequest { .. } => 3,
            Message::ProxyReadResponse { .. } => 4,
            Message::CommitPatch { .. } => 5,
            Message::PatchApplied { .. } => 6,
            Message::ResumeSession { .. } => 7,
            Message::DiscardSession { .. } => 8,
            Message::StepRequest { .. } => 9,
            Message::StepResponse { .. } => 10,
            Message::InspectRequest { .. } => 11,
            Message::InspectResponse { .. } => 12,
            Message::Ack { .. } => 13,
            Message::Error { .. } => 14,
            Message::ProxyOpenRequest { .. } => 15,
            Message::ProxyOpenResponse { .. } => 16,
            Message::EvalRequest { .. } => 17,
            Message::BrowseRequest { .. } => 18,
            Message::BrowseResponse { .. } => 19,
            Message::RemoteEdit { .. } => 20,
        }
    }

    pub fn tag_name(&self) -> &'static str {
        tag_name(self.tag())
    }

    /// Responses carry the id of the request they answer.
    pub fn is_response(&self) -> bool {
        matches!(
            self,
            Message::ProxyReadResponse { .. }
                | Message::PatchApplied { .. }
                | Message::StepResponse { .. }
                | Message::InspectResponse { .. }
                | Message::Ack { .. }
                | Message::Error { .. }
                | Message::ProxyOpenResponse { .. }
                | Message::BrowseResponse { .. }
        )
    }

    /// The request id, or for responses the id being answered.
    pub fn correlation_id(&self) -> u32 {
        match self {
            Message::Register { req, .. }
            | Message::SessionTransfer { req, .. }
            | Message::ProxyReadRequest { req, .. }
            | Message::CommitPatch { req, .. }
            | Message::ResumeSession { req, .. }
            | Message::DiscardSession { req, .. }
            | Message::StepRequest { req, .. }
            | Message::InspectRequest { req, .. }
            | Message::ProxyOpenRequest { req, .. }
            | Message::EvalRequest { req, .. }
            | Message::BrowseRequest { req, .. }
            | Message::RemoteEdit { req, .. } => *req,
            Message::ProxyReadResponse { ref_id, .. }
            | Message::PatchApplied { ref_id, .. }
            | Message::StepResponse { ref_id, .. }
            | Message::InspectResponse { ref_id, .. }
            | Message::Ack { ref_id }
            | Message::Error { ref_id, .. }
            | Message::ProxyOpenResponse { ref_id, .. }
            | Message::BrowseResponse { ref_id, .. } => *ref_id,
        }
    }

    pub(crate) fn set_request_id(&mut self, id: u32) {
        match self {
            Message::Register { req, .. }
            | Message::SessionTransfer { req, .. }
            | Message::ProxyReadRequest { req, .. }
            | Message::CommitPatch { req, .. }
            | Message::ResumeSession { req, .. }
            | Message::DiscardSession { req, .. }
            | Message::StepRequest { req, .. }
            | Message::InspectRequest { req, .. }
            | Message::ProxyOpenRequest { req, .. }
            | Message::EvalRequest { req, .. }
            | Message::BrowseRequest { req, .. }
            | Message::RemoteEdit { req, .. } => *req = id,
            _ => {}
        }
    }

    fn payload(&self, w: &mut Writer) {
        w.u32(self.correlation_id());
        match self {
            Message::Register { monitor_id, code_hash, .. } => {
                w.u64(*monitor_id);
                w.raw(&code_hash.0);
            }
            Message::SessionTransfer { session_id, blob, .. } => {
                w.u64(*session_id);
                w.bytes(blob);
            }
            Message::ProxyReadRequest { resource_id, offset, length, .. } => {
                w.u64(*resource_id);
                w.u64(*offset);
                w.u32(*length);
            }
            Message::ProxyReadResponse { bytes, eof, .. } => {
                w.bytes(bytes);
                w.u8(*eof as u8);
            }
            Message::CommitPatch { patch_id, changes, .. } => {
                w.u64(*patch_id);
                w.bytes(changes);
            }
            Message::PatchApplied { patch_id, code_hash, .. } => {
                w.u64(*patch_id);
                w.raw(&code_hash.0);
            }
            Message::ResumeSession { session_id, strategy, .. } => {
                w.u64(*session_id);
                w.u8(strategy.code());
            }
            Message::DiscardSession { session_id, .. } => w.u64(*session_id),
            Message::StepRequest { session_id, op, frame_index, .. } => {
                w.u64(*session_id);
                w.u8(op.code());
                match frame_index {
                    None => w.u8(0),
                    Some(k) => {
                        w.u8(1);
                        w.u32(*k);
                    }
                }
            }
            Message::StepResponse { summary, .. } => write_stack(w, summary),
            Message::InspectRequest { session_id, oid, path, .. } => {
                w.u64(*session_id);
                w.u64(*oid);
                w.str(path);
            }
            Message::InspectResponse { summary, .. } => write_summary(w, summary),
            Message::Ack { .. } => {}
            Message::Error { reason, .. } => w.str(reason),
            Message::ProxyOpenRequest { session_id, path, .. } => {
                w.u64(*session_id);
                w.str(path);
            }
            Message::ProxyOpenResponse { resource_id, size, .. } => {
                w.u64(*resource_id);
                w.u64(*size);
            }
            Message::EvalRequest { session_id, frame_index, expr, .. } => {
                w.u64(*session_id);
                w.u32(*frame_index);
                w.str(expr);
            }
            Message::BrowseRequest { path, .. } => w.str(path),
            Message::BrowseResponse { text, .. } => w.str(text),
            Message::RemoteEdit { target, buffer, accept, .. } => {
                w.str(target);
                w.str(buffer);
                w.u8(*accept as u8);
            }
        }
    }

    /// Encodes a complete frame: length, tag, payload.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(0);
        w.u8(self.tag());
        self.payload(&mut w);
        let mut bytes = w.finish();
        let len = (bytes.len() - 4) as u32;
        bytes[..4].copy_from_slice(&len.to_le_bytes());
        bytes
    }

    /// Decodes the tag and payload of one frame (without its length prefix).
    pub fn decode_body(body: &[u8]) -> Result<Message, WireError> {
        let mut r = Reader::new(body);
        let tag = r.u8().map_err(|_| WireError::TruncatedFrame)?;
        if !(1..=TAG_NAMES.len() as u8).contains(&tag) {
            return Err(WireError::UnknownTag(tag));
        }
        let msg = decode_payload(tag, &mut r).map_err(|e| match e {
            DecodeError::Truncated { .. } => WireError::TruncatedFrame,
            other => WireError::Malformed(other.to_string()),
        })?;
        r.expect_end().map_err(|e| WireError::Malformed(e.to_string()))?;
        Ok(msg)
    }

    /// Decodes one frame from the front of `buf`, returning the message and
    /// the number of bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<(Message, usize), WireError> {
        if buf.len() < 4 {
            return Err(WireError::TruncatedFrame);
        }
        let len = u32::from_le_bytes(buf[..4].try_into().expect("4 bytes")) as usize;
        if len > MAX_FRAME {
            return Err(WireError::Malformed(format!("frame of {len} bytes exceeds limit")));
        }
        if buf.len() < 4 + len {
            return Err(WireError::TruncatedFrame);
        }
        Ok((Message::decode_body(&buf[4..4 + len])?, 4 + len))
    }
}

fn hash(r: &mut Reader<'_>) -> Result<CodeHash, DecodeError> {
    Ok(CodeHash(r.take(32)?.try_into().expect("32 bytes")))
}

fn flag(r: &mut Reader<'_>) -> Result<bool, DecodeError> {
    r.bool()
}

fn decode_payload(tag: u8, r: &mut Reader<'_>) -> Result<Message, DecodeError> {
    let id = r.u32()?;
    Ok(match tag {
        1 => Message::Register { req: id, monitor_id: r.u64()?, code_hash: hash(r)? },
        2 => Message::SessionTransfer { req: id, session_id: r.u64()?, blob: r.bytes()?.to_vec() },
        3 => Message::ProxyReadRequest { req: id, resource_id: r.u64()?, offset: r.u64()?, length: r.u32()? },
        4 => Message::ProxyReadResponse { ref_id: id, bytes: r.bytes()?.to_vec(), eof: flag(r)? },
        5 => Message::CommitPatch { req: id, patch_id: r.u64()?, changes: r.bytes()?.to_vec() },
        6 => Message::PatchApplied { ref_id: id, patch_id: r.u64()?, code_hash: hash(r)? },
        7 => {
            let session_id = r.u64()?;
            let code = r.u8()?;
            let strategy = ResumeStrategy::from_code(code).ok_or(DecodeError::BadTag { what: "strategy", tag: code })?;
            Message::ResumeSession { req: id, session_id, strategy }
        }
        8 => Message::DiscardSession { req: id, session_id: r.u64()? },
        9 => {
            let session_id = r.u64()?;
            let op = WireStepOp::from_code(r.u8()?)?;
            let frame_index = if flag(r)? { Some(r.u32()?) } else { None };
            Message::StepRequest { req: id, session_id, op, frame_index }
        }
        10 => Message::StepResponse { ref_id: id, summary: read_stack(r)? },
        11 => Message::InspectRequest { req: id, session_id: r.u64()?, oid: r.u64()?, path: r.str()?.to_string() },
        12 => Message::InspectResponse { ref_id: id, summary: read_summary(r)? },
        13 => Message::Ack { ref_id: id },
        14 => Message::Error { ref_id: id, reason: r.str()?.to_string() },
        15 => Message::ProxyOpenRequest { req: id, session_id: r.u64()?, path: r.str()?.to_string() },
        16 => Message::ProxyOpenResponse { ref_id: id, resource_id: r.u64()?, size: r.u64()? },
        17 => Message::EvalRequest {
            req: id,
            session_id: r.u64()?,
            frame_index: r.u32()?,
            expr: r.str()?.to_string(),
        },
        18 => Message::BrowseRequest { req: id, path: r.str()?.to_string() },
        19 => Message::BrowseResponse { ref_id: id, text: r.str()?.to_string() },
        20 => Message::RemoteEdit {
            req: id,
            target: r.str()?.to_string(),
            buffer: r.str()?.to_string(),
            accept: flag(r)?,
        },
        tag => return Err(DecodeError::BadTag { what: "message", tag }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ack_frame_layout() {
        let bytes = Message::Ack { ref_id: 0 }.encode();
        assert_eq!(bytes, vec![5, 0, 0, 0, 13, 0, 0, 0, 0]);
        assert_eq!(Message::decode(&bytes).unwrap(), (Message::Ack { ref_id: 0 }, 9));
    }

    #[test]
    fn unknown_tag_and_truncation() {
        assert_eq!(Message::decode(&[1, 0, 0, 0, 99]), Err(WireError::UnknownTag(99)));
        assert_eq!(Message::decode(&[9, 0, 0, 0, 13]), Err(WireError::TruncatedFrame));
        assert_eq!(Message::decode(&[1, 0, 0, 0, 13]), Err(WireError::TruncatedFrame));
    }
}
