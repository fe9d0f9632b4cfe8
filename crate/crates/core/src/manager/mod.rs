//! The debugger side: accepts monitors, queues the sessions they ship,
//! materializes and debugs them locally, records code changes and commits
//! them back as one patch.
//!
//! Sessions shipped with an empty blob come from baseline monitors; those
//! are debugged remotely, every operation being a request to the monitor.

pub mod api;
pub mod cli;

use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::remote::{ProxyHost, DEFAULT_BUFFER};
use crate::serial::{blob_header, blob_stats, materialize, BlobHeader, MaterializeError};
use crate::view;
use crate::vm::{ChangeRecord, CodeHash, ExecutionState, Patch, ProgramImage, StepOp};
use crate::wire::{
    ByteCounter, Connection, Message, Options, ResumeStrategy, StackSummary, ValueSummary, WireError, WireStepOp,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ManagerError {
    #[error("no session {0}")]
    NoSuchSession(u64),
    #[error("session {0} is already open")]
    AlreadyOpen(u64),
    #[error("no session is open")]
    NothingOpen,
    #[error("session {0} cannot be opened in state {1}")]
    NotOpenable(u64, &'static str),
    #[error("session {0} has not been opened before")]
    NotReplayable(u64),
    #[error("code version mismatch: manager at {expected}, session at {found}")]
    CodeVersionMismatch { expected: String, found: String },
    #[error("malformed session: {0}")]
    MalformedBlob(String),
    #[error("{0}")]
    Step(String),
    #[error("{0}")]
    Eval(String),
    #[error("{0}")]
    Inspect(String),
    #[error("change rejected: {0}")]
    ConflictingChange(String),
    #[error("patch rejected: {0}")]
    PatchRejected(String),
    #[error("monitor {0} is not connected")]
    OriginDisconnected(u64),
    #[error("no monitor to commit to")]
    NoMonitor,
    #[error("wire error: {0}")]
    Wire(String),
}

impl ManagerError {
    /// Stable name used by the control API.
    pub fn code(&self) -> &'static str {
        match self {
            ManagerError::NoSuchSession(_) => "NoSuchSession",
            ManagerError::AlreadyOpen(_) => "AlreadyOpen",
            ManagerError::NothingOpen => "NothingOpen",
            ManagerError::NotOpenable(..) => "NotOpenable",
            ManagerError::NotReplayable(_) => "NotReplayable",
            ManagerError::CodeVersionMismatch { .. } => "CodeVersionMismatch",
            ManagerError::MalformedBlob(_) => "MalformedBlob",
            ManagerError::Step(_) => "StepError",
            ManagerError::Eval(_) => "EvalError",
            ManagerError::Inspect(_) => "InspectError",
            ManagerError::ConflictingChange(_) => "ConflictingChange",
            ManagerError::PatchRejected(_) => "PatchRejected",
            ManagerError::OriginDisconnected(_) => "OriginDisconnected",
            ManagerError::NoMonitor => "NoMonitor",
            ManagerError::Wire(_) => "WireError",
        }
    }
}

fn wire_err(monitor: u64) -> impl Fn(WireError) -> ManagerError {
    move |e| match e {
        WireError::ConnectionClosed => ManagerError::OriginDisconnected(monitor),
        WireError::Remote(r) => ManagerError::Wire(r),
        other => ManagerError::Wire(other.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Queued,
    Open,
    Committed,
    Resumed,
    Discarded,
}

impl SessionStatus {
    pub fn name(self) -> &'static str {
        match self {
            SessionStatus::Queued => "queued",
            SessionStatus::Open => "open",
            SessionStatus::Committed => "committed",
            SessionStatus::Resumed => "resumed",
            SessionStatus::Discarded => "discarded",
        }
    }
}

#[derive(Debug, Clone)]
struct ManagedSession {
    id: u64,
    monitor: u64,
    origin_session: u64,
    blob: Arc<Vec<u8>>,
    blob_digest: [u8; 32],
    header: Option<BlobHeader>,
    status: SessionStatus,
    opened_before: bool,
}

impl ManagedSession {
    fn remote(&self) -> bool {
        self.blob.is_empty()
    }
}

/// A row of the session inbox.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SessionInfo {
    pub id: u64,
    pub monitor: u64,
    pub origin_session: u64,
    pub status: SessionStatus,
    pub mode: &'static str,
    pub bytes: usize,
    pub frames: u32,
    pub objects: u32,
    pub exception: Option<ExceptionView>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExceptionView {
    pub class: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VarView {
    pub name: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FrameView {
    /// Counted from the top of the stack.
    pub index: usize,
    pub method: String,
    pub pc: u32,
    pub line: u32,
    pub receiver: String,
    pub locals: Vec<VarView>,
}

/// What a debugger shows for an open session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DebugView {
    pub session: u64,
    pub status: String,
    pub exception: Option<ExceptionView>,
    pub frames: Vec<FrameView>,
    /// Source of the top frame's method.
    pub source: Option<String>,
}

impl DebugView {
    fn from_summary(session: u64, s: &StackSummary, source: Option<String>) -> DebugView {
        DebugView {
            session,
            status: s.status.clone(),
            exception: s.exception.as_ref().map(|(c, m)| ExceptionView { class: c.clone(), message: m.clone() }),
            frames: s
                .frames
                .iter()
                .enumerate()
                .map(|(index, f)| FrameView {
                    index,
                    method: f.method.clone(),
                    pc: f.pc,
                    line: f.line,
                    receiver: view::describe_preview(&f.receiver),
                    locals: f
                        .locals
                        .iter()
                        .map(|(n, p)| VarView { name: n.clone(), value: view::describe_preview(p) })
                        .collect(),
                })
                .collect(),
            source,
        }
    }

    /// A multi-line rendering for terminals.
    pub fn render(&self) -> String {
        let mut out = format!("session {} [{}]", self.session, self.status);
        if let Some(e) = &self.exception {
            out.push_str(&format!(" {}: {}", e.class, e.message));
        }
        for f in &self.frames {
            out.push_str(&format!("\n#{} {} pc={} line={}", f.index, f.method, f.pc, f.line));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub display: String,
    pub summary: ValueSummary,
}

/// Durations measured when a session was last opened or replayed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct OpenTimings {
    pub materialize: Duration,
    pub replay: Duration,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "push", rename_all = "snake_case")]
pub enum PushEvent {
    MonitorRegistered { monitor: u64 },
    SessionArrived { session: SessionInfo },
    SessionRejected { monitor: u64, reason: String },
    SessionPoisoned { monitor: u64, reason: String },
    PatchApplied { monitor: u64, code_hash: String },
    SessionClosed { session: u64, status: SessionStatus },
}

enum Live {
    Local { state: ExecutionState, host: ProxyHost },
    Remote { conn: Arc<Connection>, origin: u64, monitor: u64, sources: BTreeMap<String, String> },
}

struct OpenSession {
    id: u64,
    live: Live,
    view: DebugView,
}

#[derive(Clone)]
struct MonitorLink {
    conn: Arc<Connection>,
}

#[derive(Debug, Clone)]
pub struct ManagerConfig {
    pub latency: Duration,
    pub counters: Option<Arc<ByteCounter>>,
    pub proxy_buffer: usize,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        ManagerConfig { latency: Duration::ZERO, counters: None, proxy_buffer: DEFAULT_BUFFER }
    }
}

struct Shared {
    config: ManagerConfig,
    counters: Arc<ByteCounter>,
    image: Mutex<ProgramImage>,
    sessions: Mutex<Vec<ManagedSession>>,
    monitors: Mutex<BTreeMap<u64, MonitorLink>>,
    /// Every accepted connection, kept alive until it closes.
    accepted: Mutex<Vec<Arc<Connection>>>,
    open: Mutex<Option<OpenSession>>,
    /// Recorded changes and the code version they started from.
    pending: Mutex<(Vec<ChangeRecord>, CodeHash)>,
    subscribers: Mutex<Vec<mpsc::Sender<PushEvent>>>,
    timings: Mutex<OpenTimings>,
    next_session: AtomicU64,
    next_patch: AtomicU64,
    shutdown: AtomicBool,
}

pub struct Manager {
    shared: Arc<Shared>,
    listening: Mutex<Vec<SocketAddr>>,
}

impl Manager {
    /// `image` is the program the monitors run; file opens in it are
    /// redirected to the session's origin.
    pub fn new(image: ProgramImage, config: ManagerConfig) -> Manager {
        let image = image.instrument_file_opens();
        let hash = image.hash();
        Manager {
            shared: Arc::new(Shared {
                counters: config.counters.clone().unwrap_or_default(),
                config,
                image: Mutex::new(image),
                sessions: Mutex::new(Vec::new()),
                monitors: Mutex::new(BTreeMap::new()),
                accepted: Mutex::new(Vec::new()),
                open: Mutex::new(None),
                pending: Mutex::new((Vec::new(), hash)),
                subscribers: Mutex::new(Vec::new()),
                timings: Mutex::new(OpenTimings::default()),
                next_session: AtomicU64::new(1),
                next_patch: AtomicU64::new(1),
                shutdown: AtomicBool::new(false),
            }),
            listening: Mutex::new(Vec::new()),
        }
    }

    /// Accepts monitor connections in the background.
    pub fn listen(&self, addr: impl ToSocketAddrs) -> std::io::Result<SocketAddr> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        self.listening.lock().expect("listen lock").push(local);
        let s = Arc::clone(&self.shared);
        thread::Builder::new().name("manager-accept".into()).spawn(move || {
            for stream in listener.incoming() {
                if s.shutdown.load(Ordering::SeqCst) {
                    return;
                }
                match stream {
                    Ok(stream) => s.accept(stream),
                    Err(e) => log::warn!("accept failed: {e}"),
                }
            }
        })?;
        Ok(local)
    }

    pub fn counters(&self) -> &Arc<ByteCounter> {
        &self.shared.counters
    }

    pub fn code_hash(&self) -> CodeHash {
        self.shared.image.lock().expect("image lock").hash()
    }

    pub fn image(&self) -> ProgramImage {
        self.shared.image.lock().expect("image lock").clone()
    }

    pub fn monitors(&self) -> Vec<u64> {
        self.shared.monitors.lock().expect("monitor lock").keys().copied().collect()
    }

    pub fn subscribe(&self) -> mpsc::Receiver<PushEvent> {
        let (tx, rx) = mpsc::channel();
        self.shared.subscribers.lock().expect("subscriber lock").push(tx);
        rx
    }

    /// Sessions in arrival order.
    pub fn sessions(&self) -> Vec<SessionInfo> {
        self.shared.sessions.lock().expect("session lock").iter().map(info).collect()
    }

    pub fn session(&self, id: u64) -> Option<SessionInfo> {
        self.shared.find(id).ok().map(|s| info(&s))
    }

    /// The stored blob, byte for byte as received.
    pub fn stored_blob(&self, id: u64) -> Option<Arc<Vec<u8>>> {
        self.shared.find(id).ok().map(|s| Arc::clone(&s.blob))
    }

    pub fn stored_blob_digest(&self, id: u64) -> Option<[u8; 32]> {
        self.shared.find(id).ok().map(|s| s.blob_digest)
    }

    /// Waits until at least `n` sessions have arrived.
    pub fn wait_sessions(&self, n: usize, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if self.shared.sessions.lock().expect("session lock").len() >= n {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_millis(1));
        }
    }

    pub fn open_session_id(&self) -> Option<u64> {
        self.shared.open.lock().expect("open lock").as_ref().map(|o| o.id)
    }

    pub fn last_timings(&self) -> OpenTimings {
        *self.shared.timings.lock().expect("timings lock")
    }

    pub fn open(&self, id: u64) -> Result<DebugView, ManagerError> {
        let mut open = self.shared.open.lock().expect("open lock");
        if let Some(o) = open.as_ref() {
            return Err(ManagerError::AlreadyOpen(o.id));
        }
        let s = self.shared.find(id)?;
        if matches!(s.status, SessionStatus::Resumed | SessionStatus::Discarded) {
            return Err(ManagerError::NotOpenable(id, s.status.name()));
        }
        let o = self.shared.materialize(&s)?;
        let view = o.view.clone();
        *open = Some(o);
        self.shared.set_status(id, SessionStatus::Open, true);
        Ok(view)
    }

    /// Drops the live state and rebuilds it from the stored blob.
    pub fn replay(&self, id: u64) -> Result<DebugView, ManagerError> {
        let mut open = self.shared.open.lock().expect("open lock");
        if let Some(o) = open.as_ref() {
            if o.id != id {
                return Err(ManagerError::AlreadyOpen(o.id));
            }
        }
        let s = self.shared.find(id)?;
        if !s.opened_before || s.remote() {
            return Err(ManagerError::NotReplayable(id));
        }
        if s.status == SessionStatus::Discarded {
            return Err(ManagerError::NotOpenable(id, s.status.name()));
        }
        *open = None;
        let o = self.shared.materialize(&s)?;
        let view = o.view.clone();
        *open = Some(o);
        if matches!(s.status, SessionStatus::Queued) {
            self.shared.set_status(id, SessionStatus::Open, true);
        }
        Ok(view)
    }

    pub fn close(&self) -> Result<(), ManagerError> {
        let o = self.shared.open.lock().expect("open lock").take().ok_or(ManagerError::NothingOpen)?;
        let s = self.shared.find(o.id)?;
        if s.status == SessionStatus::Open {
            self.shared.set_status(o.id, SessionStatus::Queued, true);
        }
        Ok(())
    }

    pub fn view(&self) -> Result<DebugView, ManagerError> {
        self.shared.open.lock().expect("open lock").as_ref().map(|o| o.view.clone()).ok_or(ManagerError::NothingOpen)
    }

    /// A copy of the open session's local state (out-of-place sessions only).
    pub fn live_state(&self) -> Option<ExecutionState> {
        match &self.shared.open.lock().expect("open lock").as_ref()?.live {
            Live::Local { state, .. } => Some(state.clone()),
            Live::Remote { .. } => None,
        }
    }

    /// Remote round trips made by the open session's file proxies.
    pub fn proxy_round_trips(&self) -> u64 {
        match self.shared.open.lock().expect("open lock").as_ref().map(|o| &o.live) {
            Some(Live::Local { host, .. }) => host.round_trips(),
            _ => 0,
        }
    }

    pub fn step(&self, op: StepOp) -> Result<DebugView, ManagerError> {
        let image = self.image();
        let mut guard = self.shared.open.lock().expect("open lock");
        let o = guard.as_mut().ok_or(ManagerError::NothingOpen)?;
        match &mut o.live {
            Live::Local { state, host } => {
                let mut h = host.clone();
                crate::vm::Vm::new(&image, &mut h).step(state, op).map_err(|e| ManagerError::Step(e.to_string()))?;
                o.view = local_view(o.id, state, &image);
            }
            Live::Remote { conn, origin, monitor, sources } => {
                let (wop, frame) = match op {
                    StepOp::Into => (WireStepOp::Into, None),
                    StepOp::Over => (WireStepOp::Over, None),
                    StepOp::Through => (WireStepOp::Through, None),
                    StepOp::Proceed => (WireStepOp::Proceed, None),
                    StepOp::Restart(k) => (WireStepOp::Restart, Some(k as u32)),
                };
                let summary = remote_step(conn, *origin, *monitor, wop, frame)?;
                o.view = remote_view(o.id, conn, *monitor, &summary, sources)?;
            }
        }
        Ok(o.view.clone())
    }

    pub fn inspect(&self, oid: u64, path: &str) -> Result<ValueSummary, ManagerError> {
        let image = self.image();
        let guard = self.shared.open.lock().expect("open lock");
        let o = guard.as_ref().ok_or(ManagerError::NothingOpen)?;
        match &o.live {
            Live::Local { state, .. } => view::inspect(state, &image, oid, path).map_err(ManagerError::Inspect),
            Live::Remote { conn, origin, monitor, .. } => {
                let r = conn
                    .request(Message::InspectRequest { req: 0, session_id: *origin, oid, path: path.to_string() })
                    .map_err(wire_err(*monitor))?;
                match r {
                    Message::InspectResponse { summary, .. } => Ok(summary),
                    other => Err(ManagerError::Wire(format!("unexpected {}", other.tag_name()))),
                }
            }
        }
    }

    /// Evaluates in frame `k`. Side effects stay in the open session.
    pub fn evaluate(&self, k: usize, expr: &str) -> Result<EvalResult, ManagerError> {
        let image = self.image();
        let mut guard = self.shared.open.lock().expect("open lock");
        let o = guard.as_mut().ok_or(ManagerError::NothingOpen)?;
        let result = match &mut o.live {
            Live::Local { state, host } => {
                let mut h = host.clone();
                let out = crate::vm::Vm::new(&image, &mut h)
                    .evaluate(state, k, expr)
                    .map_err(|e| ManagerError::Eval(e.to_string()))?;
                *state = out.state;
                o.view = local_view(o.id, state, &image);
                EvalResult { display: out.display, summary: view::summarize(state, &image, &out.value) }
            }
            Live::Remote { conn, origin, monitor, sources } => {
                let r = conn
                    .request(Message::EvalRequest {
                        req: 0,
                        session_id: *origin,
                        frame_index: k as u32,
                        expr: expr.to_string(),
                    })
                    .map_err(|e| match e {
                        WireError::Remote(r) => ManagerError::Eval(r),
                        other => wire_err(*monitor)(other),
                    })?;
                let summary = match r {
                    Message::InspectResponse { summary, .. } => summary,
                    other => return Err(ManagerError::Wire(format!("unexpected {}", other.tag_name()))),
                };
                let stack = remote_step(conn, *origin, *monitor, WireStepOp::Query, None)?;
                o.view = remote_view(o.id, conn, *monitor, &stack, sources)?;
                EvalResult { display: view::describe(&summary), summary }
            }
        };
        Ok(result)
    }

    /// Source of a method in the manager's image.
    pub fn source(&self, class: &str, selector: &str) -> Option<String> {
        self.shared.image.lock().expect("image lock").method(class, selector).map(|m| m.source.clone())
    }

    /// Applies a change to the local image at once and records it for the
    /// next commit.
    pub fn record_change(&self, change: ChangeRecord) -> Result<(), ManagerError> {
        let mut open = self.shared.open.lock().expect("open lock");
        let mut image = self.shared.image.lock().expect("image lock");
        let mut pending = self.shared.pending.lock().expect("pending lock");
        let patch = Patch::new(0, image.hash(), vec![change.clone()]);
        let mut states: Vec<&mut ExecutionState> = match open.as_mut().map(|o| &mut o.live) {
            Some(Live::Local { state, .. }) => vec![state],
            _ => vec![],
        };
        image.apply_patch_to(&patch, &mut states).map_err(|e| ManagerError::ConflictingChange(e.to_string()))?;
        pending.0.push(change);
        if let Some(o) = open.as_mut() {
            if let Live::Local { state, .. } = &o.live {
                o.view = local_view(o.id, state, &image);
            }
        }
        Ok(())
    }

    pub fn pending_changes(&self) -> Vec<ChangeRecord> {
        self.shared.pending.lock().expect("pending lock").0.clone()
    }

    /// Sends all recorded changes as one patch. With no monitor given, the
    /// open session's origin is used, or the only connected monitor.
    pub fn commit(&self, monitor: Option<u64>) -> Result<CodeHash, ManagerError> {
        let monitor = match monitor {
            Some(m) => m,
            None => self.default_monitor()?,
        };
        let conn = self.shared.link(monitor)?;
        let (changes, base) = self.shared.pending.lock().expect("pending lock").clone();
        let patch_id = self.shared.next_patch.fetch_add(1, Ordering::Relaxed);
        let patch = Patch::new(patch_id, base, changes).with_target(self.code_hash());
        let reply = conn
            .request(Message::CommitPatch { req: 0, patch_id, changes: patch.encode_changes() })
            .map_err(|e| match e {
                WireError::Remote(r) => ManagerError::PatchRejected(r),
                other => wire_err(monitor)(other),
            })?;
        let Message::PatchApplied { code_hash, .. } = reply else {
            return Err(ManagerError::Wire(format!("unexpected {}", reply.tag_name())));
        };
        let local = self.code_hash();
        if code_hash != local {
            return Err(ManagerError::PatchRejected(format!("monitor at {code_hash} after patch, manager at {local}")));
        }
        *self.shared.pending.lock().expect("pending lock") = (Vec::new(), local);
        if let Some(id) = self.open_session_id() {
            if self.shared.find(id)?.monitor == monitor {
                self.shared.set_status(id, SessionStatus::Committed, false);
            }
        }
        self.shared.push(PushEvent::PatchApplied { monitor, code_hash: code_hash.to_hex() });
        Ok(code_hash)
    }

    fn default_monitor(&self) -> Result<u64, ManagerError> {
        if let Some(id) = self.open_session_id() {
            return Ok(self.shared.find(id)?.monitor);
        }
        let monitors = self.monitors();
        match monitors.as_slice() {
            [only] => Ok(*only),
            _ => Err(ManagerError::NoMonitor),
        }
    }

    /// Asks the origin monitor to resume the session's task.
    pub fn resume(&self, id: u64, strategy: ResumeStrategy) -> Result<(), ManagerError> {
        let s = self.shared.find(id)?;
        if matches!(s.status, SessionStatus::Resumed | SessionStatus::Discarded) {
            return Err(ManagerError::NotOpenable(id, s.status.name()));
        }
        let conn = self.shared.link(s.monitor)?;
        let msg = match strategy {
            ResumeStrategy::Discard => Message::DiscardSession { req: 0, session_id: s.origin_session },
            _ => Message::ResumeSession { req: 0, session_id: s.origin_session, strategy },
        };
        conn.request(msg).map_err(wire_err(s.monitor))?;
        let status = if strategy == ResumeStrategy::Discard { SessionStatus::Discarded } else { SessionStatus::Resumed };
        {
            let mut open = self.shared.open.lock().expect("open lock");
            if open.as_ref().is_some_and(|o| o.id == id) {
                *open = None;
            }
        }
        self.shared.set_status(id, status, false);
        self.shared.push(PushEvent::SessionClosed { session: id, status });
        Ok(())
    }

    pub fn discard(&self, id: u64) -> Result<(), ManagerError> {
        self.resume(id, ResumeStrategy::Discard)
    }

    /// The link to a registered monitor.
    pub fn connection(&self, monitor: u64) -> Option<Arc<Connection>> {
        self.shared.link(monitor).ok()
    }

    /// Fetches a listing from a monitor's code browser (baseline editing).
    pub fn remote_browse(&self, monitor: u64, path: &str) -> Result<String, ManagerError> {
        let conn = self.shared.link(monitor)?;
        match conn.request(Message::BrowseRequest { req: 0, path: path.to_string() }).map_err(wire_err(monitor))? {
            Message::BrowseResponse { text, .. } => Ok(text),
            other => Err(ManagerError::Wire(format!("unexpected {}", other.tag_name()))),
        }
    }

    /// Sends an edit buffer to a monitor's code browser (baseline editing).
    pub fn remote_edit(&self, monitor: u64, target: &str, buffer: &str, accept: bool) -> Result<(), ManagerError> {
        let conn = self.shared.link(monitor)?;
        conn.request(Message::RemoteEdit {
            req: 0,
            target: target.to_string(),
            buffer: buffer.to_string(),
            accept,
        })
        .map_err(|e| match e {
            WireError::Remote(r) => ManagerError::PatchRejected(r),
            other => wire_err(monitor)(other),
        })?;
        Ok(())
    }
}

impl Drop for Manager {
    fn drop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        for addr in self.listening.lock().expect("listen lock").iter() {
            let _ = TcpStream::connect_timeout(addr, Duration::from_millis(200));
        }
        for conn in self.shared.accepted.lock().expect("accepted lock").drain(..) {
            conn.close();
        }
    }
}

fn info(s: &ManagedSession) -> SessionInfo {
    let h = s.header.as_ref();
    SessionInfo {
        id: s.id,
        monitor: s.monitor,
        origin_session: s.origin_session,
        status: s.status,
        mode: if s.remote() { "baseline" } else { "oop" },
        bytes: s.blob.len(),
        frames: h.map_or(0, |h| h.frame_count),
        objects: h.map_or(0, |h| h.object_count),
        exception: h
            .and_then(|h| h.exception.as_ref())
            .map(|e| ExceptionView { class: e.class_name.clone(), message: e.message.clone() }),
    }
}

fn local_view(id: u64, st: &ExecutionState, image: &ProgramImage) -> DebugView {
    let summary = view::stack_summary(st, usize::MAX);
    let source = st.top().and_then(|f| {
        if f.method.selector.as_ref() == crate::vm::state::EVAL_SELECTOR {
            return None;
        }
        image.method(&f.method.class, &f.method.selector).map(|m| m.source.clone())
    });
    DebugView::from_summary(id, &summary, source)
}

fn remote_step(
    conn: &Connection,
    origin: u64,
    monitor: u64,
    op: WireStepOp,
    frame_index: Option<u32>,
) -> Result<StackSummary, ManagerError> {
    let r = conn
        .request(Message::StepRequest { req: 0, session_id: origin, op, frame_index })
        .map_err(|e| match e {
            WireError::Remote(r) => ManagerError::Step(r),
            other => wire_err(monitor)(other),
        })?;
    match r {
        Message::StepResponse { summary, .. } => Ok(summary),
        other => Err(ManagerError::Wire(format!("unexpected {}", other.tag_name()))),
    }
}

/// Builds a view from a remote stack listing, fetching the top method's
/// source the first time it is shown.
fn remote_view(
    id: u64,
    conn: &Connection,
    monitor: u64,
    s: &StackSummary,
    sources: &mut BTreeMap<String, String>,
) -> Result<DebugView, ManagerError> {
    let source = match s.frames.first() {
        Some(f) => {
            let method = f.method.split("[]").next().unwrap_or(&f.method).to_string();
            if !sources.contains_key(&method) && !method.contains(crate::vm::state::EVAL_SELECTOR) {
                let r = conn
                    .request(Message::BrowseRequest { req: 0, path: format!("method:{method}") })
                    .map_err(wire_err(monitor))?;
                if let Message::BrowseResponse { text, .. } = r {
                    sources.insert(method.clone(), text);
                }
            }
            sources.get(&method).cloned()
        }
        None => None,
    };
    Ok(DebugView::from_summary(id, s, source))
}

impl Shared {
    fn push(&self, e: PushEvent) {
        self.subscribers.lock().expect("subscriber lock").retain(|tx| tx.send(e.clone()).is_ok());
    }

    fn find(&self, id: u64) -> Result<ManagedSession, ManagerError> {
        self.sessions
            .lock()
            .expect("session lock")
            .iter()
            .find(|s| s.id == id)
            .cloned()
            .ok_or(ManagerError::NoSuchSession(id))
    }

    fn set_status(&self, id: u64, status: SessionStatus, opened: bool) {
        if let Some(s) = self.sessions.lock().expect("session lock").iter_mut().find(|s| s.id == id) {
            s.status = status;
            s.opened_before |= opened;
        }
    }

    fn link(&self, monitor: u64) -> Result<Arc<Connection>, ManagerError> {
        match self.monitors.lock().expect("monitor lock").get(&monitor) {
            Some(l) if !l.conn.is_closed() => Ok(Arc::clone(&l.conn)),
            _ => Err(ManagerError::OriginDisconnected(monitor)),
        }
    }

    fn materialize(&self, s: &ManagedSession) -> Result<OpenSession, ManagerError> {
        let conn = self.link(s.monitor).ok();
        if s.remote() {
            let conn = conn.ok_or(ManagerError::OriginDisconnected(s.monitor))?;
            let t = Instant::now();
            let summary = remote_step(&conn, s.origin_session, s.monitor, WireStepOp::Query, None)?;
            let mut sources = BTreeMap::new();
            let view = remote_view(s.id, &conn, s.monitor, &summary, &mut sources)?;
            *self.timings.lock().expect("timings lock") = OpenTimings { materialize: Duration::ZERO, replay: t.elapsed() };
            let live = Live::Remote { conn, origin: s.origin_session, monitor: s.monitor, sources };
            return Ok(OpenSession { id: s.id, live, view });
        }
        let image = self.image.lock().expect("image lock").clone();
        let t0 = Instant::now();
        let mut host = ProxyHost::with_buffer(conn, s.origin_session, self.config.proxy_buffer);
        let m = materialize(&s.blob, &image, &mut host).map_err(|e| match e {
            MaterializeError::CodeVersionMismatch { expected, found } => {
                ManagerError::CodeVersionMismatch { expected: expected.to_hex(), found: found.to_hex() }
            }
            other => ManagerError::MalformedBlob(other.to_string()),
        })?;
        let t1 = Instant::now();
        let view = local_view(s.id, &m.state, &image);
        *self.timings.lock().expect("timings lock") = OpenTimings { materialize: t1 - t0, replay: t1.elapsed() };
        Ok(OpenSession { id: s.id, live: Live::Local { state: m.state, host }, view })
    }

    fn accept(self: &Arc<Self>, stream: TcpStream) {
        let s = Arc::clone(self);
        let registered = Arc::new(Mutex::new(None::<u64>));
        let opts =
            Options { latency: self.config.latency, counters: Some(Arc::clone(&self.counters)), ..Options::default() };
        let handler = Box::new(move |conn: &Arc<Connection>, msg| s.handle(conn, &registered, msg));
        match Connection::start(stream, opts, handler) {
            Ok(conn) => {
                let mut accepted = self.accepted.lock().expect("accepted lock");
                accepted.retain(|c| !c.is_closed());
                accepted.push(conn);
            }
            Err(e) => log::warn!("cannot start monitor connection: {e}"),
        }
    }

    fn handle(&self, conn: &Arc<Connection>, registered: &Mutex<Option<u64>>, msg: Message) -> Option<Message> {
        let id = msg.correlation_id();
        let monitor = *registered.lock().expect("registration lock");
        let reply = match msg {
            Message::Register { monitor_id, code_hash, .. } => {
                let ours = self.image.lock().expect("image lock").hash();
                if code_hash != ours {
                    Message::Error { ref_id: id, reason: format!("code version {code_hash} does not match {ours}") }
                } else {
                    *registered.lock().expect("registration lock") = Some(monitor_id);
                    self.monitors
                        .lock()
                        .expect("monitor lock")
                        .insert(monitor_id, MonitorLink { conn: Arc::clone(conn) });
                    self.push(PushEvent::MonitorRegistered { monitor: monitor_id });
                    Message::Ack { ref_id: id }
                }
            }
            Message::SessionTransfer { session_id, blob, .. } => match monitor {
                None => Message::Error { ref_id: id, reason: "monitor not registered".to_string() },
                Some(m) => match self.receive(m, session_id, blob) {
                    Ok(()) => Message::Ack { ref_id: id },
                    Err(reason) => {
                        self.push(PushEvent::SessionRejected { monitor: m, reason: reason.clone() });
                        Message::Error { ref_id: id, reason }
                    }
                },
            },
            Message::Error { reason, .. } => {
                self.push(PushEvent::SessionPoisoned { monitor: monitor.unwrap_or(0), reason });
                return None;
            }
            other => Message::Error { ref_id: id, reason: format!("manager does not handle {}", other.tag_name()) },
        };
        Some(reply)
    }

    fn receive(&self, monitor: u64, origin_session: u64, blob: Vec<u8>) -> Result<(), String> {
        let header = if blob.is_empty() {
            None
        } else {
            let h = blob_header(&blob).map_err(|e| e.to_string())?;
            blob_stats(&blob).map_err(|e| e.to_string())?;
            let ours = self.image.lock().expect("image lock").hash();
            if h.code_hash != ours {
                return Err(format!("code version mismatch: session at {}, manager at {ours}", h.code_hash));
            }
            Some(h)
        };
        let s = ManagedSession {
            id: self.next_session.fetch_add(1, Ordering::Relaxed),
            monitor,
            origin_session,
            blob_digest: Sha256::digest(&blob).into(),
            blob: Arc::new(blob),
            header,
            status: SessionStatus::Queued,
            opened_before: false,
        };
        let row = info(&s);
        self.sessions.lock().expect("session lock").push(s);
        self.push(PushEvent::SessionArrived { session: row });
        Ok(())
    }
}
