//! The application side: runs guest tasks, turns suspensions into debugging
//! sessions, ships them to a manager and serves what comes back (proxy reads,
//! patches, resume requests and, in baseline mode, remote debugging
//! operations on the retained state).

use std::collections::{BTreeMap, VecDeque};
use std::net::ToSocketAddrs;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::remote::{FileStreamRule, ResourceTable};
use crate::serial::{materialize_args, snapshot, snapshot_args};
use crate::view;
use crate::vm::host::ResourceHost;
use crate::vm::interp::render;
use crate::vm::image::ClassDef;
use crate::vm::parser::{parse_class, parse_method, ClassAst};
use crate::vm::{
    spawn, ChangeRecord, CodeHash, ExecutionState, LocalFiles, Patch, ProgramImage, Status, StepOp, TaskArgs, Value,
    Vm,
};
use crate::wire::{ByteCounter, Connection, Message, Options, ResumeStrategy, WireError, WireStepOp};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MonitorError {
    #[error("manager rejected code version: {0}")]
    CodeVersionRejected(String),
    #[error("cannot reach manager: {0}")]
    Unreachable(String),
    #[error("cannot start task: {0}")]
    Spawn(String),
}

#[derive(Debug, Clone)]
pub struct MonitorConfig {
    pub monitor_id: u64,
    /// Serve remote debugging operations on retained states instead of
    /// shipping them.
    pub baseline: bool,
    pub latency: Duration,
    pub counters: Option<Arc<ByteCounter>>,
    /// Echo guest prints to stdout.
    pub echo_output: bool,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig { monitor_id: 1, baseline: false, latency: Duration::ZERO, counters: None, echo_output: false }
    }
}

/// Everything needed to run a task again from the start.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDescriptor {
    pub class: String,
    pub selector: String,
    /// Arguments as captured at spawn time.
    pub args_blob: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskOutcome {
    Completed { value: Value, rendered: String, instructions: u64 },
    Suspended { session: u64 },
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MonitorEvent {
    Registered { manager: String, code_hash: String },
    TaskStarted { task: u64, class: String, selector: String },
    TaskCompleted { task: u64, result: String, instructions: u64 },
    TaskFailed { task: u64, reason: String },
    TaskSuspended { task: u64, session: u64, status: String, exception: Option<String> },
    SessionShipped { session: u64, bytes: usize },
    SessionRejected { session: u64, reason: String },
    SessionPoisoned { session: u64, reason: String },
    PatchApplied { patch: u64, code_hash: String },
    PatchRejected { patch: u64, reason: String },
    SessionResumed { session: u64, strategy: String },
    Disconnected,
}

struct Retained {
    task: u64,
    descriptor: TaskDescriptor,
    state: ExecutionState,
}

enum Outgoing {
    Session { session: u64, blob: Vec<u8> },
    Poisoned { session: u64, reason: String },
}

type Sink = Box<dyn Fn(&MonitorEvent) + Send>;

struct Shared {
    id: u64,
    baseline: bool,
    latency: Duration,
    counters: Arc<ByteCounter>,
    image: Mutex<Arc<ProgramImage>>,
    files: LocalFiles,
    resources: Arc<ResourceTable>,
    restart: Mutex<BTreeMap<u64, Retained>>,
    outbox: Mutex<VecDeque<Outgoing>>,
    outbox_cv: Condvar,
    conn: Mutex<Option<Arc<Connection>>>,
    next_session: AtomicU64,
    next_task: AtomicU64,
    events: Mutex<Vec<MonitorEvent>>,
    events_cv: Condvar,
    sink: Mutex<Option<Sink>>,
    shutdown: AtomicBool,
}

/// A monitor attached to one guest image.
pub struct Monitor {
    shared: Arc<Shared>,
}

impl Monitor {
    pub fn new(image: ProgramImage, config: MonitorConfig) -> Monitor {
        let files = if config.echo_output { LocalFiles::echoing() } else { LocalFiles::new() };
        let shared = Arc::new(Shared {
            id: config.monitor_id,
            baseline: config.baseline,
            latency: config.latency,
            counters: config.counters.unwrap_or_default(),
            image: Mutex::new(Arc::new(image)),
            files,
            resources: ResourceTable::new(),
            restart: Mutex::new(BTreeMap::new()),
            outbox: Mutex::new(VecDeque::new()),
            outbox_cv: Condvar::new(),
            conn: Mutex::new(None),
            next_session: AtomicU64::new(1),
            next_task: AtomicU64::new(1),
            events: Mutex::new(Vec::new()),
            events_cv: Condvar::new(),
            sink: Mutex::new(None),
            shutdown: AtomicBool::new(false),
        });
        let s = Arc::clone(&shared);
        thread::Builder::new().name("monitor-sender".into()).spawn(move || sender_loop(s)).expect("spawn sender");
        Monitor { shared }
    }

    pub fn id(&self) -> u64 {
        self.shared.id
    }

    pub fn is_baseline(&self) -> bool {
        self.shared.baseline
    }

    /// Calls `sink` for every event from now on, in addition to recording it.
    pub fn set_event_sink(&self, sink: impl Fn(&MonitorEvent) + Send + 'static) {
        *self.shared.sink.lock().expect("sink lock") = Some(Box::new(sink));
    }

    /// Connects to a manager and registers this monitor's code version.
    /// Sessions queued while detached are shipped afterwards.
    pub fn attach(&self, addr: impl ToSocketAddrs) -> Result<(), MonitorError> {
        let s = Arc::clone(&self.shared);
        let opts = Options { latency: s.latency, counters: Some(Arc::clone(&s.counters)), ..Options::default() };
        let handler = Box::new(move |conn: &Arc<Connection>, msg| s.handle(conn, msg));
        let conn = Connection::connect(addr, opts, handler).map_err(|e| MonitorError::Unreachable(e.to_string()))?;
        let hash = self.code_hash();
        match conn.request(Message::Register { req: 0, monitor_id: self.shared.id, code_hash: hash }) {
            Ok(Message::Ack { .. }) => {}
            Ok(other) => {
                conn.close();
                return Err(MonitorError::Unreachable(format!("unexpected {} to Register", other.tag_name())));
            }
            Err(WireError::Remote(reason)) => {
                conn.close();
                return Err(MonitorError::CodeVersionRejected(reason));
            }
            Err(e) => {
                conn.close();
                return Err(MonitorError::Unreachable(e.to_string()));
            }
        }
        self.shared.emit(MonitorEvent::Registered { manager: conn.peer().to_string(), code_hash: hash.to_hex() });
        *self.shared.conn.lock().expect("conn lock") = Some(conn);
        self.shared.outbox_cv.notify_all();
        Ok(())
    }

    pub fn detach(&self) {
        if let Some(c) = self.shared.conn.lock().expect("conn lock").take() {
            c.close();
        }
    }

    pub fn is_attached(&self) -> bool {
        self.shared.conn.lock().expect("conn lock").as_ref().is_some_and(|c| !c.is_closed())
    }

    pub fn counters(&self) -> &Arc<ByteCounter> {
        &self.shared.counters
    }

    pub fn code_hash(&self) -> CodeHash {
        self.shared.image.lock().expect("image lock").hash()
    }

    pub fn image(&self) -> Arc<ProgramImage> {
        Arc::clone(&self.shared.image.lock().expect("image lock"))
    }

    pub fn files(&self) -> &LocalFiles {
        &self.shared.files
    }

    pub fn resources(&self) -> &Arc<ResourceTable> {
        &self.shared.resources
    }

    /// Runs a task to completion or suspension on the calling thread.
    pub fn run_task(&self, class: &str, selector: &str, args: &TaskArgs) -> Result<TaskOutcome, MonitorError> {
        let hash = self.code_hash();
        let args_blob = snapshot_args(args, hash).map_err(|e| MonitorError::Spawn(e.to_string()))?;
        let descriptor = TaskDescriptor { class: class.to_string(), selector: selector.to_string(), args_blob };
        self.shared.start(descriptor).map_err(MonitorError::Spawn)
    }

    /// Sessions retained until resumed or discarded.
    pub fn retained_sessions(&self) -> Vec<u64> {
        self.shared.restart.lock().expect("restart lock").keys().copied().collect()
    }

    pub fn retained_fingerprint(&self, session: u64) -> Option<[u8; 32]> {
        self.shared.restart.lock().expect("restart lock").get(&session).map(|r| r.state.fingerprint())
    }

    pub fn retained_state(&self, session: u64) -> Option<ExecutionState> {
        self.shared.restart.lock().expect("restart lock").get(&session).map(|r| r.state.clone())
    }

    pub fn task_descriptor(&self, session: u64) -> Option<TaskDescriptor> {
        self.shared.restart.lock().expect("restart lock").get(&session).map(|r| r.descriptor.clone())
    }

    /// Sessions waiting to be shipped.
    pub fn queued(&self) -> usize {
        self.shared.outbox.lock().expect("outbox lock").len()
    }

    /// Blocks until the ship queue is empty.
    pub fn wait_shipped(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut q = self.shared.outbox.lock().expect("outbox lock");
        while !q.is_empty() {
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            q = self.shared.outbox_cv.wait_timeout(q, deadline - now).expect("outbox lock").0;
        }
        true
    }

    pub fn events(&self) -> Vec<MonitorEvent> {
        self.shared.events.lock().expect("events lock").clone()
    }

    /// Waits for an event matching `pred` recorded at or after index `from`.
    pub fn wait_event(
        &self,
        from: usize,
        timeout: Duration,
        pred: impl Fn(&MonitorEvent) -> bool,
    ) -> Option<MonitorEvent> {
        let deadline = Instant::now() + timeout;
        let mut ev = self.shared.events.lock().expect("events lock");
        loop {
            if let Some(e) = ev.iter().skip(from).find(|e| pred(e)) {
                return Some(e.clone());
            }
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            ev = self.shared.events_cv.wait_timeout(ev, deadline - now).expect("events lock").0;
        }
    }

    /// Applies a resume strategy locally, as if the manager had asked.
    pub fn resume(&self, session: u64, strategy: ResumeStrategy) -> Result<(), String> {
        self.shared.resume(session, strategy)
    }
}

impl Drop for Monitor {
    fn drop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        self.shared.outbox_cv.notify_all();
        self.detach();
    }
}

fn remote_op(op: WireStepOp, frame: Option<u32>) -> Result<Option<StepOp>, String> {
    Ok(Some(match op {
        WireStepOp::Into => StepOp::Into,
        WireStepOp::Over => StepOp::Over,
        WireStepOp::Through => StepOp::Through,
        WireStepOp::Proceed => StepOp::Proceed,
        WireStepOp::Restart => StepOp::Restart(frame.ok_or("restart needs a frame index")? as usize),
        WireStepOp::Query => return Ok(None),
    }))
}

impl Shared {
    fn emit(&self, e: MonitorEvent) {
        if let Some(sink) = self.sink.lock().expect("sink lock").as_ref() {
            sink(&e);
        }
        self.events.lock().expect("events lock").push(e);
        self.events_cv.notify_all();
    }

    fn image(&self) -> Arc<ProgramImage> {
        Arc::clone(&self.image.lock().expect("image lock"))
    }

    fn start(self: &Arc<Self>, descriptor: TaskDescriptor) -> Result<TaskOutcome, String> {
        let args = materialize_args(&descriptor.args_blob).map_err(|e| e.to_string())?;
        let image = self.image();
        let st = spawn(&image, &descriptor.class, &descriptor.selector, &args).map_err(|e| e.to_string())?;
        let task = self.next_task.fetch_add(1, Ordering::Relaxed);
        self.emit(MonitorEvent::TaskStarted {
            task,
            class: descriptor.class.clone(),
            selector: descriptor.selector.clone(),
        });
        Ok(self.execute(task, descriptor, st))
    }

    fn execute(self: &Arc<Self>, task: u64, descriptor: TaskDescriptor, mut st: ExecutionState) -> TaskOutcome {
        let image = self.image();
        let mut host = self.files.clone();
        let result = Vm::new(&image, &mut host).run(&mut st);
        match result {
            Ok(Status::Completed) => {
                let value = st.result.clone().unwrap_or(Value::Nil);
                let rendered = render(&st, &value);
                self.emit(MonitorEvent::TaskCompleted { task, result: rendered.clone(), instructions: st.instructions });
                TaskOutcome::Completed { value, rendered, instructions: st.instructions }
            }
            Ok(s) if s.is_suspended() => TaskOutcome::Suspended { session: self.on_suspend(task, descriptor, st) },
            Ok(s) => {
                let reason = format!("task ended {}", s.name());
                self.emit(MonitorEvent::TaskFailed { task, reason: reason.clone() });
                TaskOutcome::Failed(reason)
            }
            Err(e) => {
                self.emit(MonitorEvent::TaskFailed { task, reason: e.to_string() });
                TaskOutcome::Failed(e.to_string())
            }
        }
    }

    /// Captures a suspended task: retains it for resumption and queues its
    /// session for shipping.
    fn on_suspend(&self, task: u64, descriptor: TaskDescriptor, st: ExecutionState) -> u64 {
        let session = self.next_session.fetch_add(1, Ordering::Relaxed);
        let exception = st.exception.as_ref().map(|e| format!("{}: {}", e.class_name, e.message));
        self.emit(MonitorEvent::TaskSuspended { task, session, status: st.status.name().to_string(), exception });
        let out = if self.baseline {
            Outgoing::Session { session, blob: Vec::new() }
        } else {
            let hash = self.image().hash();
            let mut rule = FileStreamRule::new(&self.files, &self.resources, session);
            match snapshot(&st, hash, session, self.id, &mut [&mut rule]) {
                Ok(blob) => Outgoing::Session { session, blob },
                Err(e) => {
                    self.resources.release_session(session);
                    let reason = format!("session {session} could not be serialized: {e}");
                    self.emit(MonitorEvent::SessionPoisoned { session, reason: reason.clone() });
                    Outgoing::Poisoned { session, reason }
                }
            }
        };
        self.restart.lock().expect("restart lock").insert(session, Retained { task, descriptor, state: st });
        self.outbox.lock().expect("outbox lock").push_back(out);
        self.outbox_cv.notify_all();
        session
    }

    fn close_files(&self, st: &ExecutionState) {
        let mut host = self.files.clone();
        for obj in st.heap.values() {
            if let Some(tag) = obj.external {
                host.close(tag);
            }
        }
    }

    fn resume(self: &Arc<Self>, session: u64, strategy: ResumeStrategy) -> Result<(), String> {
        let retained =
            self.restart.lock().expect("restart lock").remove(&session).ok_or(format!("unknown session {session}"))?;
        self.resources.release_session(session);
        self.emit(MonitorEvent::SessionResumed { session, strategy: strategy.name().to_string() });
        let me = Arc::clone(self);
        match strategy {
            ResumeStrategy::Discard => self.close_files(&retained.state),
            ResumeStrategy::RestartTask => {
                self.close_files(&retained.state);
                thread::spawn(move || {
                    if let Err(reason) = me.start(retained.descriptor) {
                        me.emit(MonitorEvent::TaskFailed { task: retained.task, reason });
                    }
                });
            }
            ResumeStrategy::ProceedInPlace => {
                thread::spawn(move || {
                    me.execute(retained.task, retained.descriptor, retained.state);
                });
            }
        }
        Ok(())
    }

    fn apply_patch(&self, patch: &Patch) -> Result<CodeHash, String> {
        let mut image = self.image.lock().expect("image lock");
        if patch.base_hash != image.hash() {
            return Err(format!("patch based on {} but code is at {}", patch.base_hash, image.hash()));
        }
        let mut next = (**image).clone();
        let mut restart = self.restart.lock().expect("restart lock");
        let mut states: Vec<&mut ExecutionState> = restart.values_mut().map(|r| &mut r.state).collect();
        next.apply_patch_to(patch, &mut states).map_err(|e| e.to_string())?;
        let hash = next.hash();
        if let Some(target) = patch.target_hash.filter(|t| *t != hash) {
            return Err(format!("patch would leave code at {hash}, sender expects {target}"));
        }
        *image = Arc::new(next);
        Ok(hash)
    }

    fn with_retained<T>(
        &self,
        session: u64,
        f: impl FnOnce(&ProgramImage, &mut Retained) -> Result<T, String>,
    ) -> Result<T, String> {
        if !self.baseline {
            return Err("remote debugging operations are disabled in out-of-place mode".to_string());
        }
        let image = self.image();
        let mut restart = self.restart.lock().expect("restart lock");
        let r = restart.get_mut(&session).ok_or(format!("unknown session {session}"))?;
        f(&image, r)
    }

    fn browse(&self, path: &str) -> Result<String, String> {
        let image = self.image();
        if path == "classes" {
            return Ok(image.user_classes().map(|c| c.name.as_str()).collect::<Vec<_>>().join("\n"));
        }
        if let Some(name) = path.strip_prefix("class:") {
            return image.class(name).map(|c| c.definition()).ok_or(format!("no class {name}"));
        }
        if let Some((class, sel)) = path.strip_prefix("method:").and_then(|m| m.split_once(">>")) {
            return image.method(class, sel).map(|m| m.source.clone()).ok_or(format!("no method {class}>>{sel}"));
        }
        Err(format!("cannot browse {path:?}"))
    }

    fn remote_edit(&self, target: &str, buffer: &str) -> Result<(), String> {
        let changes = if target == "class" {
            let ast = parse_class(buffer).map_err(|e| e.to_string())?;
            match self.image().class(&ast.name) {
                None => vec![ChangeRecord::AddClass { source: buffer.to_string() }],
                Some(old) => shape_changes(old, &ast),
            }
        } else if let Some(class) = target.strip_prefix("method:") {
            let ast = parse_method(buffer).map_err(|e| e.to_string())?;
            let exists = self.image().method(class, &ast.selector).is_some();
            vec![if exists {
                ChangeRecord::ChangeMethod {
                    class: class.to_string(),
                    selector: ast.selector,
                    source: buffer.to_string(),
                }
            } else {
                ChangeRecord::AddMethod { class: class.to_string(), source: buffer.to_string() }
            }]
        } else {
            return Err(format!("cannot edit {target:?}"));
        };
        let base = self.image().hash();
        self.apply_patch(&Patch::new(0, base, changes)).map(|_| ())
    }

    fn handle(self: &Arc<Self>, _conn: &Arc<Connection>, msg: Message) -> Option<Message> {
        let id = msg.correlation_id();
        let err = |reason: String| Message::Error { ref_id: id, reason };
        let reply = match msg {
            Message::ProxyReadRequest { .. } | Message::ProxyOpenRequest { .. } => return self.resources.serve(&msg),
            Message::CommitPatch { patch_id, changes, .. } => {
                match Patch::decode_changes(patch_id, &changes).map_err(|e| e.to_string()).and_then(|p| self.apply_patch(&p))
                {
                    Ok(code_hash) => {
                        self.emit(MonitorEvent::PatchApplied { patch: patch_id, code_hash: code_hash.to_hex() });
                        Message::PatchApplied { ref_id: id, patch_id, code_hash }
                    }
                    Err(reason) => {
                        self.emit(MonitorEvent::PatchRejected { patch: patch_id, reason: reason.clone() });
                        err(reason)
                    }
                }
            }
            Message::ResumeSession { session_id, strategy, .. } => match self.resume(session_id, strategy) {
                Ok(()) => Message::Ack { ref_id: id },
                Err(e) => err(e),
            },
            Message::DiscardSession { session_id, .. } => match self.resume(session_id, ResumeStrategy::Discard) {
                Ok(()) => Message::Ack { ref_id: id },
                Err(e) => err(e),
            },
            Message::StepRequest { session_id, op, frame_index, .. } => {
                let files = self.files.clone();
                let r = self.with_retained(session_id, |image, r| {
                    if let Some(op) = remote_op(op, frame_index)? {
                        let mut host = files;
                        Vm::new(image, &mut host).step(&mut r.state, op).map_err(|e| e.to_string())?;
                    }
                    Ok(view::stack_summary(&r.state, 1))
                });
                match r {
                    Ok(summary) => Message::StepResponse { ref_id: id, summary },
                    Err(e) => err(e),
                }
            }
            Message::InspectRequest { session_id, oid, path, .. } => {
                match self.with_retained(session_id, |image, r| view::inspect(&r.state, image, oid, &path)) {
                    Ok(summary) => Message::InspectResponse { ref_id: id, summary },
                    Err(e) => err(e),
                }
            }
            Message::EvalRequest { session_id, frame_index, expr, .. } => {
                let files = self.files.clone();
                let r = self.with_retained(session_id, |image, r| {
                    let mut host = files;
                    let out = Vm::new(image, &mut host)
                        .evaluate(&r.state, frame_index as usize, &expr)
                        .map_err(|e| e.to_string())?;
                    r.state = out.state;
                    Ok(view::summarize(&r.state, image, &out.value))
                });
                match r {
                    Ok(summary) => Message::InspectResponse { ref_id: id, summary },
                    Err(e) => err(e),
                }
            }
            Message::BrowseRequest { path, .. } => match self.browse(&path) {
                Ok(text) => Message::BrowseResponse { ref_id: id, text },
                Err(e) => err(e),
            },
            Message::RemoteEdit { target, buffer, accept, .. } => {
                if !accept {
                    Message::Ack { ref_id: id }
                } else {
                    match self.remote_edit(&target, &buffer) {
                        Ok(()) => Message::Ack { ref_id: id },
                        Err(e) => err(e),
                    }
                }
            }
            Message::Error { reason, .. } => {
                log::warn!("manager reported: {reason}");
                return None;
            }
            other => err(format!("monitor does not handle {}", other.tag_name())),
        };
        Some(reply)
    }
}

/// Instance and class variable changes turning `old` into the shape of `new`.
fn shape_changes(old: &ClassDef, new: &ClassAst) -> Vec<ChangeRecord> {
    let class = || old.name.clone();
    let mut out = Vec::new();
    for v in old.ivars.iter().filter(|v| !new.ivars.contains(v)) {
        out.push(ChangeRecord::RemoveIvar { class: class(), name: v.clone() });
    }
    for v in new.ivars.iter().filter(|v| !old.ivars.contains(v)) {
        out.push(ChangeRecord::AddIvar { class: class(), name: v.clone() });
    }
    for (v, _) in &old.class_vars {
        if !new.class_vars.iter().any(|(n, _)| n == v) {
            out.push(ChangeRecord::RemoveClassVar { class: class(), name: v.clone() });
        }
    }
    for (v, _) in &new.class_vars {
        if !old.class_vars.iter().any(|(n, _)| n == v) {
            out.push(ChangeRecord::AddClassVar { class: class(), name: v.clone() });
        }
    }
    out
}

fn sender_loop(s: Arc<Shared>) {
    loop {
        let conn = {
            let mut q = s.outbox.lock().expect("outbox lock");
            loop {
                if s.shutdown.load(Ordering::SeqCst) {
                    return;
                }
                let conn = s.conn.lock().expect("conn lock").clone().filter(|c| !c.is_closed());
                if let (false, Some(c)) = (q.is_empty(), conn) {
                    break c;
                }
                q = s.outbox_cv.wait_timeout(q, Duration::from_millis(100)).expect("outbox lock").0;
            }
        };
        let (session, msg) = {
            let q = s.outbox.lock().expect("outbox lock");
            match q.front().expect("non-empty queue") {
                Outgoing::Session { session, blob } => {
                    (*session, Message::SessionTransfer { req: 0, session_id: *session, blob: blob.clone() })
                }
                Outgoing::Poisoned { session, reason } => {
                    (*session, Message::Error { ref_id: 0, reason: reason.clone() })
                }
            }
        };
        let done = match &msg {
            Message::Error { .. } => conn.send(&msg).is_ok(),
            Message::SessionTransfer { blob, .. } => {
                let bytes = blob.len();
                match conn.request(msg.clone()) {
                    Ok(_) => {
                        s.emit(MonitorEvent::SessionShipped { session, bytes });
                        true
                    }
                    Err(WireError::Remote(reason)) => {
                        s.emit(MonitorEvent::SessionRejected { session, reason });
                        true
                    }
                    Err(_) => false,
                }
            }
            _ => unreachable!("only transfers and errors are queued"),
        };
        if done {
            s.outbox.lock().expect("outbox lock").pop_front();
            s.outbox_cv.notify_all();
        } else if conn.is_closed() {
            s.emit(MonitorEvent::Disconnected);
            let mut c = s.conn.lock().expect("conn lock");
            if c.as_ref().is_some_and(|x| Arc::ptr_eq(x, &conn)) {
                *c = None;
            }
        }
    }
}
