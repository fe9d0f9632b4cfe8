use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::bytecode::CodeUnit;
use super::image::Migration;
use super::value::{Oid, Value};

pub type ResourceTag = u64;

#[derive(Debug, Clone, PartialEq)]
pub struct HeapObject {
    pub class: Arc<str>,
    /// Aligned with the class's instance variable names.
    pub fields: Vec<Value>,
    /// Host handle for objects that wrap an external resource.
    pub external: Option<ResourceTag>,
}

impl HeapObject {
    pub fn new(class: &str, fields: Vec<Value>) -> HeapObject {
        HeapObject { class: Arc::from(class), fields, external: None }
    }
}

/// Identifies the code a frame executes: a method, or a block nested in it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MethodRef {
    pub class: Arc<str>,
    pub selector: Arc<str>,
    pub block_path: Vec<u16>,
}

pub const EVAL_SELECTOR: &str = "<eval>";

impl MethodRef {
    pub fn method(class: &str, selector: &str) -> MethodRef {
        MethodRef { class: Arc::from(class), selector: Arc::from(selector), block_path: vec![] }
    }

    pub fn is_block(&self) -> bool {
        !self.block_path.is_empty()
    }

    pub fn display_name(&self) -> String {
        let mut s = format!("{}>>{}", self.class, self.selector);
        for i in &self.block_path {
            s.push_str(&format!("[]{i}"));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Unique within the execution; blocks find their home frame by id.
    pub id: u32,
    pub method: MethodRef,
    /// Captured at frame entry, so in-flight frames keep running old code
    /// after a method is replaced.
    pub code: Arc<CodeUnit>,
    pub home: Option<u32>,
    pub pc: usize,
    pub receiver: Value,
    /// Parameters then temporaries, in declaration order.
    pub locals: Vec<Value>,
    /// Argument values as passed at frame entry; restart reuses them.
    pub entry_args: Vec<Value>,
    pub stack: Vec<Value>,
}

impl Frame {
    pub fn local_names(&self) -> &[String] {
        &self.code.local_names
    }

    pub fn local(&self, name: &str) -> Option<&Value> {
        let i = self.code.local_names.iter().position(|n| n == name)?;
        self.locals.get(i)
    }

    pub fn line(&self) -> u32 {
        self.code.line_of(self.pc)
    }

    pub fn values(&self) -> impl Iterator<Item = &Value> {
        std::iter::once(&self.receiver).chain(&self.locals).chain(&self.entry_args).chain(&self.stack)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Status {
    Running,
    /// Stopped by a `halt` instruction, which sits at the top frame's pc.
    SuspendedOnHalt,
    /// Paused by a debugger step or restart.
    SuspendedOnStep,
    SuspendedOnException,
    Completed,
    Failed,
}

impl Status {
    pub fn is_suspended(self) -> bool {
        matches!(self, Status::SuspendedOnHalt | Status::SuspendedOnStep | Status::SuspendedOnException)
    }

    pub fn name(self) -> &'static str {
        match self {
            Status::Running => "running",
            Status::SuspendedOnHalt => "suspended-on-halt",
            Status::SuspendedOnStep => "suspended-on-step",
            Status::SuspendedOnException => "suspended-on-exception",
            Status::Completed => "completed",
            Status::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuestException {
    pub class_name: String,
    pub message: String,
    pub frame_index: usize,
    pub pc: usize,
}

/// A guest execution: its call stack and the heap objects it can reach.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionState {
    pub frames: Vec<Frame>,
    pub heap: BTreeMap<Oid, HeapObject>,
    /// Class variables written by this execution; unwritten ones read the
    /// class's initial value.
    pub class_vars: BTreeMap<(Arc<str>, Arc<str>), Value>,
    pub status: Status,
    pub exception: Option<GuestException>,
    pub result: Option<Value>,
    pub next_oid: u64,
    pub next_frame_id: u32,
    /// Guest instructions executed so far.
    pub instructions: u64,
}

impl Default for ExecutionState {
    fn default() -> Self {
        ExecutionState {
            frames: Vec::new(),
            heap: BTreeMap::new(),
            class_vars: BTreeMap::new(),
            status: Status::Running,
            exception: None,
            result: None,
            next_oid: 1,
            next_frame_id: 0,
            instructions: 0,
        }
    }
}

impl ExecutionState {
    pub fn alloc(&mut self, obj: HeapObject) -> Oid {
        let oid = Oid(self.next_oid);
        self.next_oid += 1;
        self.heap.insert(oid, obj);
        oid
    }

    pub fn object(&self, oid: Oid) -> Option<&HeapObject> {
        self.heap.get(&oid)
    }

    pub fn object_mut(&mut self, oid: Oid) -> Option<&mut HeapObject> {
        self.heap.get_mut(&oid)
    }

    pub fn top(&self) -> Option<&Frame> {
        self.frames.last()
    }

    pub fn depth(&self) -> usize {
        self.frames.len()
    }

    pub fn frame_by_id(&self, id: u32) -> Option<usize> {
        self.frames.iter().rposition(|f| f.id == id)
    }

    /// Values the execution holds directly.
    pub fn roots(&self) -> Vec<Value> {
        let mut roots: Vec<Value> = self.frames.iter().flat_map(|f| f.values().cloned()).collect();
        roots.extend(self.class_vars.values().cloned());
        roots.extend(self.result.iter().cloned());
        roots
    }

    /// Oids reachable from the roots, breadth first.
    pub fn reachable(&self, extra: &[Value]) -> BTreeSet<Oid> {
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<Oid> =
            self.roots().iter().chain(extra).filter_map(Value::as_ref_oid).collect();
        while let Some(oid) = queue.pop_front() {
            if !seen.insert(oid) {
                continue;
            }
            if let Some(obj) = self.heap.get(&oid) {
                queue.extend(obj.fields.iter().filter_map(Value::as_ref_oid));
            }
        }
        seen
    }

    /// Drops every object not reachable from the roots (plus `extra`).
    pub fn collect_garbage(&mut self, extra: &[Value]) {
        let live = self.reachable(extra);
        self.heap.retain(|oid, _| live.contains(oid));
    }

    /// True when every reference names a live object.
    pub fn references_valid(&self) -> bool {
        let ok = |v: &Value| v.as_ref_oid().is_none_or(|o| self.heap.contains_key(&o));
        self.roots().iter().all(ok) && self.heap.values().all(|o| o.fields.iter().all(ok))
    }

    pub(crate) fn migrate(&mut self, migrations: &[Migration]) {
        for m in migrations {
            match m {
                Migration::AddIvar { class, index } => {
                    for obj in self.heap.values_mut().filter(|o| &*o.class == class) {
                        let at = (*index).min(obj.fields.len());
                        obj.fields.insert(at, Value::Nil);
                    }
                }
                Migration::RemoveIvar { class, index } => {
                    for obj in self.heap.values_mut().filter(|o| &*o.class == class) {
                        if *index < obj.fields.len() {
                            obj.fields.remove(*index);
                        }
                    }
                }
                Migration::RemoveClassVar { class, name } => {
                    self.class_vars.retain(|(c, n), _| !(&**c == class && &**n == name));
                }
            }
        }
        self.collect_garbage(&[]);
    }

    /// SHA-256 over the exact state, oids included. Any change to frames,
    /// heap, class variables or status changes the fingerprint.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        let s = |h: &mut Sha256, b: &[u8]| {
            h.update((b.len() as u64).to_le_bytes());
            h.update(b);
        };
        let v = |h: &mut Sha256, v: &Value| match v {
            Value::Nil => h.update([0]),
            Value::Bool(b) => h.update([1, *b as u8]),
            Value::Int(i) => {
                h.update([2]);
                h.update(i.to_le_bytes());
            }
            Value::Float(f) => {
                h.update([3]);
                h.update(f.to_bits().to_le_bytes());
            }
            Value::Str(x) => {
                h.update([4]);
                h.update((x.len() as u64).to_le_bytes());
                h.update(x.as_bytes());
            }
            Value::Ref(o) => {
                h.update([5]);
                h.update(o.0.to_le_bytes());
            }
        };
        s(&mut h, self.status.name().as_bytes());
        h.update((self.frames.len() as u64).to_le_bytes());
        for f in &self.frames {
            h.update(f.id.to_le_bytes());
            s(&mut h, f.method.display_name().as_bytes());
            h.update((f.pc as u64).to_le_bytes());
            h.update(f.home.map_or(u64::MAX, u64::from).to_le_bytes());
            for group in [std::slice::from_ref(&f.receiver), &f.locals, &f.entry_args, &f.stack] {
                h.update((group.len() as u64).to_le_bytes());
                group.iter().for_each(|x| v(&mut h, x));
            }
        }
        h.update((self.heap.len() as u64).to_le_bytes());
        for (oid, obj) in &self.heap {
            h.update(oid.0.to_le_bytes());
            s(&mut h, obj.class.as_bytes());
            h.update(obj.external.map_or(u64::MAX, |t| t).to_le_bytes());
            h.update((obj.fields.len() as u64).to_le_bytes());
            obj.fields.iter().for_each(|x| v(&mut h, x));
        }
        for ((c, n), val) in &self.class_vars {
            s(&mut h, c.as_bytes());
            s(&mut h, n.as_bytes());
            v(&mut h, val);
        }
        if let Some(e) = &self.exception {
            s(&mut h, e.class_name.as_bytes());
            s(&mut h, e.message.as_bytes());
            h.update((e.frame_index as u64).to_le_bytes());
            h.update((e.pc as u64).to_le_bytes());
        }
        if let Some(r) = &self.result {
            v(&mut h, r);
        }
        h.finalize().into()
    }
}

/// The argument graph handed to a new task: a small standalone heap plus the
/// argument values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskArgs {
    pub heap: BTreeMap<Oid, HeapObject>,
    pub values: Vec<Value>,
    pub next_oid: u64,
}

impl TaskArgs {
    pub fn new() -> TaskArgs {
        TaskArgs { heap: BTreeMap::new(), values: Vec::new(), next_oid: 1 }
    }

    pub fn scalars(values: impl IntoIterator<Item = Value>) -> TaskArgs {
        TaskArgs { values: values.into_iter().collect(), ..TaskArgs::new() }
    }

    pub fn alloc(&mut self, class: &str, fields: Vec<Value>) -> Oid {
        let oid = Oid(self.next_oid);
        self.next_oid += 1;
        self.heap.insert(oid, HeapObject::new(class, fields));
        oid
    }

    pub fn push(&mut self, v: impl Into<Value>) -> &mut Self {
        self.values.push(v.into());
        self
    }

    pub fn object_mut(&mut self, oid: Oid) -> Option<&mut HeapObject> {
        self.heap.get_mut(&oid)
    }
}
