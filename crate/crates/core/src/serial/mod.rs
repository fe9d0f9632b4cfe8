//! Session blobs: the self-contained binary form of a suspended execution.
//!
//! A snapshot walks the stack, collects every heap object reachable from
//! it, and writes frames and objects with dense local ids. Code is never
//! included; the receiving side resolves methods by name in its own image
//! after checking the code hash. Objects of classes with a substitution rule
//! are written as proxy descriptors instead of object records.
//! See `docs/session-blob.md` for the byte layout.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::Arc;

use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::vm::image::CodeHash;
use crate::vm::state::{ExecutionState, Frame, GuestException, HeapObject, MethodRef, Status, TaskArgs};
use crate::vm::{Oid, ProgramImage, Value};

pub const MAGIC: &[u8; 4] = b"OOPS";
pub const VERSION: u8 = 1;

const KIND_SESSION: u8 = 0;
const KIND_ARGS: u8 = 1;

const REC_OBJECT: u8 = 0;
const REC_PROXY: u8 = 1;

/// Strings at least this long are written once into the blob's string
/// table and referenced by index.
pub const SHARED_MIN: usize = 64;

const NO_HOME: u32 = u32::MAX;
const UNKNOWN_SIZE: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SnapshotError {
    #[error("execution is not suspended ({0})")]
    NotSuspended(&'static str),
    #[error("object {oid} of class {class} holds an external resource and no substitution rule applies")]
    UnserializableValue { oid: Oid, class: String },
    #[error("more than one substitution rule for class {0}")]
    DuplicateRule(String),
    #[error("dangling reference {0}")]
    DanglingReference(Oid),
    #[error("substitution failed: {0}")]
    Substitution(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MaterializeError {
    #[error("code version mismatch: blob has {found}, image has {expected}")]
    CodeVersionMismatch { expected: CodeHash, found: CodeHash },
    #[error("malformed blob: {0}")]
    MalformedBlob(String),
    #[error("cannot build proxy: {0}")]
    Proxy(String),
}

impl From<DecodeError> for MaterializeError {
    fn from(e: DecodeError) -> Self {
        MaterializeError::MalformedBlob(e.to_string())
    }
}

fn malformed<T>(msg: impl Into<String>) -> Result<T, MaterializeError> {
    Err(MaterializeError::MalformedBlob(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResourceKind {
    File,
}

/// Stand-in for a resource that cannot leave its process.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProxyDescriptor {
    pub resource_id: u64,
    pub kind: ResourceKind,
    /// Class of the substituted object.
    pub class: String,
    pub path: String,
    /// Stream position when the snapshot was taken.
    pub position: u64,
    pub size: Option<u64>,
}

/// Replaces objects of one class with proxy descriptors during snapshot.
pub trait SubstitutionRule {
    fn target_class(&self) -> &str;
    fn build_descriptor(&mut self, oid: Oid, obj: &HeapObject) -> Result<ProxyDescriptor, String>;
}

/// Builds the local stand-in object for a proxy descriptor.
pub trait ProxyFactory {
    fn build(&mut self, desc: &ProxyDescriptor) -> Result<HeapObject, String>;
}

/// Factory that keeps proxies as inert objects with no resource attached.
/// Reads through them raise `FileError` in the guest.
pub struct InertProxies;

impl ProxyFactory for InertProxies {
    fn build(&mut self, desc: &ProxyDescriptor) -> Result<HeapObject, String> {
        Ok(HeapObject::new(&desc.class, vec![Value::from(desc.path.as_str()), Value::Int(desc.position as i64)]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlobHeader {
    pub session_id: u64,
    pub monitor_id: u64,
    pub code_hash: CodeHash,
    pub status: Status,
    pub exception: Option<GuestException>,
    pub frame_count: u32,
    pub object_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlobStats {
    pub object_count: u32,
    pub frame_count: u32,
    pub proxy_count: u32,
    pub byte_size: usize,
}

#[derive(Debug, Clone)]
pub struct Materialized {
    pub header: BlobHeader,
    pub state: ExecutionState,
    /// Proxy objects created, with the descriptors they came from.
    pub proxies: Vec<(Oid, ProxyDescriptor)>,
}

fn status_code(s: Status) -> u8 {
    match s {
        Status::Running => 0,
        Status::SuspendedOnHalt => 1,
        Status::SuspendedOnStep => 2,
        Status::SuspendedOnException => 3,
        Status::Completed => 4,
        Status::Failed => 5,
    }
}

fn status_from(code: u8) -> Result<Status, DecodeError> {
    Ok(match code {
        0 => Status::Running,
        1 => Status::SuspendedOnHalt,
        2 => Status::SuspendedOnStep,
        3 => Status::SuspendedOnException,
        4 => Status::Completed,
        5 => Status::Failed,
        tag => return Err(DecodeError::BadTag { what: "status", tag }),
    })
}

/// Assigns dense local ids in breadth-first order and writes values.
struct Closure<'a> {
    heap: &'a BTreeMap<Oid, HeapObject>,
    ids: HashMap<Oid, u32>,
    order: Vec<Oid>,
    queue: VecDeque<Oid>,
}

impl<'a> Closure<'a> {
    fn new(heap: &'a BTreeMap<Oid, HeapObject>) -> Self {
        Closure { heap, ids: HashMap::new(), order: Vec::new(), queue: VecDeque::new() }
    }

    fn visit(&mut self, v: &Value) -> Result<(), SnapshotError> {
        if let Value::Ref(oid) = v {
            if !self.ids.contains_key(oid) {
                if !self.heap.contains_key(oid) {
                    return Err(SnapshotError::DanglingReference(*oid));
                }
                self.ids.insert(*oid, self.order.len() as u32);
                self.order.push(*oid);
                self.queue.push_back(*oid);
            }
        }
        Ok(())
    }

    /// Expands the queue. Substituted objects are recorded but not traversed.
    fn drain(&mut self, substituted: &dyn Fn(&HeapObject) -> bool) -> Result<(), SnapshotError> {
        while let Some(oid) = self.queue.pop_front() {
            let obj = &self.heap[&oid];
            if substituted(obj) {
                continue;
            }
            for f in &obj.fields {
                self.visit(f)?;
            }
        }
        Ok(())
    }
}

/// Local ids plus the string table being collected.
struct Enc<'c> {
    ids: &'c HashMap<Oid, u32>,
    index: HashMap<Arc<str>, u32>,
    table: Vec<Arc<str>>,
}

impl<'c> Enc<'c> {
    fn new(ids: &'c HashMap<Oid, u32>) -> Self {
        Enc { ids, index: HashMap::new(), table: Vec::new() }
    }

    fn shared(&mut self, s: &Arc<str>) -> u32 {
        if let Some(i) = self.index.get(s) {
            return *i;
        }
        let i = self.table.len() as u32;
        self.index.insert(s.clone(), i);
        self.table.push(s.clone());
        i
    }

    /// Header, string table, then the body written against this encoder.
    fn assemble(self, header: Writer, body: Writer) -> Vec<u8> {
        let mut w = header;
        w.u32(self.table.len() as u32);
        for s in &self.table {
            w.str(s);
        }
        w.raw(&body.finish());
        w.finish()
    }
}

/// What values are decoded against.
struct Dec {
    object_count: u32,
    strings: Vec<Arc<str>>,
}

impl Dec {
    fn read(r: &mut Reader<'_>, object_count: u32) -> Result<Dec, MaterializeError> {
        let n = r.count(4)?;
        let strings = (0..n).map(|_| r.str().map(Arc::from)).collect::<Result<Vec<_>, _>>()?;
        Ok(Dec { object_count, strings })
    }
}

fn write_value(w: &mut Writer, enc: &mut Enc<'_>, v: &Value) {
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
        Value::Str(s) if s.len() >= SHARED_MIN => {
            let i = enc.shared(s);
            w.u8(7);
            w.u32(i);
        }
        Value::Str(s) => {
            w.u8(5);
            w.str(s);
        }
        Value::Ref(oid) => {
            w.u8(6);
            w.u32(enc.ids[oid]);
        }
    }
}

fn write_values(w: &mut Writer, enc: &mut Enc<'_>, vs: &[Value]) {
    w.u32(vs.len() as u32);
    for v in vs {
        write_value(w, enc, v);
    }
}

fn read_value(r: &mut Reader<'_>, d: &Dec) -> Result<Value, MaterializeError> {
    let object_count = d.object_count;
    Ok(match r.u8()? {
        0 => Value::Nil,
        1 => Value::Bool(true),
        2 => Value::Bool(false),
        3 => Value::Int(r.i64()?),
        4 => Value::Float(r.f64()?),
        5 => Value::Str(Arc::from(r.str()?)),
        6 => {
            let id = r.u32()?;
            if id >= object_count {
                return malformed(format!("reference to local id {id} of {object_count}"));
            }
            // Local ids become oids id+1 on materialization.
            Value::Ref(Oid(id as u64 + 1))
        }
        7 => {
            let i = r.u32()?;
            match d.strings.get(i as usize) {
                Some(s) => Value::Str(s.clone()),
                None => return malformed(format!("string {i} of {}", d.strings.len())),
            }
        }
        tag => return Err(DecodeError::BadTag { what: "value", tag }.into()),
    })
}

fn read_values(r: &mut Reader<'_>, d: &Dec) -> Result<Vec<Value>, MaterializeError> {
    let n = r.count(1)?;
    (0..n).map(|_| read_value(r, d)).collect()
}

fn write_header(
    w: &mut Writer,
    kind: u8,
    session_id: u64,
    monitor_id: u64,
    hash: CodeHash,
    status: Status,
    exception: Option<&GuestException>,
    frames: u32,
    objects: u32,
) {
    w.raw(MAGIC);
    w.u8(VERSION);
    w.u8(kind);
    w.u64(session_id);
    w.u64(monitor_id);
    w.raw(&hash.0);
    w.u8(status_code(status));
    match exception {
        None => w.u8(0),
        Some(e) => {
            w.u8(1);
            w.str(&e.class_name);
            w.str(&e.message);
            w.u32(e.frame_index as u32);
            w.u32(e.pc as u32);
        }
    }
    w.u32(frames);
    w.u32(objects);
}

fn read_header(r: &mut Reader<'_>, expected_kind: u8) -> Result<BlobHeader, MaterializeError> {
    if r.take(4)? != MAGIC {
        return malformed("bad magic");
    }
    let version = r.u8()?;
    if version != VERSION {
        return malformed(format!("unsupported version {version}"));
    }
    let kind = r.u8()?;
    if kind != expected_kind {
        return malformed(format!("blob kind {kind}, expected {expected_kind}"));
    }
    let session_id = r.u64()?;
    let monitor_id = r.u64()?;
    let code_hash = CodeHash(r.take(32)?.try_into().expect("32 bytes"));
    let status = status_from(r.u8()?)?;
    let exception = match r.u8()? {
        0 => None,
        1 => Some(GuestException {
            class_name: r.str()?.to_string(),
            message: r.str()?.to_string(),
            frame_index: r.u32()? as usize,
            pc: r.u32()? as usize,
        }),
        tag => return Err(DecodeError::BadTag { what: "exception flag", tag }.into()),
    };
    let frame_count = r.u32()?;
    let object_count = r.u32()?;
    Ok(BlobHeader { session_id, monitor_id, code_hash, status, exception, frame_count, object_count })
}

fn write_objects(
    w: &mut Writer,
    enc: &mut Enc<'_>,
    closure: &Closure<'_>,
    rules: &mut [&mut dyn SubstitutionRule],
) -> Result<(), SnapshotError> {
    let mut seen = std::collections::HashSet::new();
    for r in rules.iter() {
        if !seen.insert(r.target_class().to_string()) {
            return Err(SnapshotError::DuplicateRule(r.target_class().to_string()));
        }
    }
    for oid in &closure.order {
        let obj = &closure.heap[oid];
        let rule = rules.iter_mut().find(|r| r.target_class() == &*obj.class);
        match rule {
            Some(rule) => {
                let d = rule.build_descriptor(*oid, obj).map_err(SnapshotError::Substitution)?;
                w.record(|w| {
                    w.u8(REC_PROXY);
                    w.str(&d.class);
                    w.u64(d.resource_id);
                    w.u8(match d.kind {
                        ResourceKind::File => 0,
                    });
                    w.str(&d.path);
                    w.u64(d.position);
                    w.u64(d.size.unwrap_or(UNKNOWN_SIZE));
                });
            }
            None if obj.external.is_some() => {
                return Err(SnapshotError::UnserializableValue { oid: *oid, class: obj.class.to_string() })
            }
            None => w.record(|w| {
                w.u8(REC_OBJECT);
                w.str(&obj.class);
                write_values(w, enc, &obj.fields);
            }),
        }
    }
    Ok(())
}

/// Serializes a suspended execution.
pub fn snapshot(
    st: &ExecutionState,
    code_hash: CodeHash,
    session_id: u64,
    monitor_id: u64,
    rules: &mut [&mut dyn SubstitutionRule],
) -> Result<Vec<u8>, SnapshotError> {
    if !st.status.is_suspended() || st.frames.is_empty() {
        return Err(SnapshotError::NotSuspended(st.status.name()));
    }
    let targets: Vec<String> = rules.iter().map(|r| r.target_class().to_string()).collect();
    let substituted = |o: &HeapObject| targets.iter().any(|t| **t == *o.class);
    let mut closure = Closure::new(&st.heap);
    for f in &st.frames {
        closure.visit(&f.receiver)?;
        for v in f.locals.iter().chain(&f.stack).chain(&f.entry_args) {
            closure.visit(v)?;
        }
    }
    for v in st.class_vars.values() {
        closure.visit(v)?;
    }
    closure.drain(&substituted)?;

    let mut header = Writer::new();
    write_header(
        &mut header,
        KIND_SESSION,
        session_id,
        monitor_id,
        code_hash,
        st.status,
        st.exception.as_ref(),
        st.frames.len() as u32,
        closure.order.len() as u32,
    );
    let mut enc = Enc::new(&closure.ids);
    let mut w = Writer::new();
    for f in &st.frames {
        w.record(|w| write_frame(w, &mut enc, f));
    }
    write_objects(&mut w, &mut enc, &closure, rules)?;
    w.u32(st.class_vars.len() as u32);
    for ((c, n), v) in &st.class_vars {
        w.str(c);
        w.str(n);
        write_value(&mut w, &mut enc, v);
    }
    Ok(enc.assemble(header, w))
}

fn write_frame(w: &mut Writer, enc: &mut Enc<'_>, f: &Frame) {
    w.u32(f.id);
    w.str(&f.method.class);
    w.str(&f.method.selector);
    w.u32(f.method.block_path.len() as u32);
    for i in &f.method.block_path {
        w.raw(&i.to_le_bytes());
    }
    w.u32(f.home.unwrap_or(NO_HOME));
    w.u32(f.pc as u32);
    write_value(w, enc, &f.receiver);
    write_values(w, enc, &f.locals);
    write_values(w, enc, &f.entry_args);
    write_values(w, enc, &f.stack);
}

/// Reads only the header.
pub fn blob_header(blob: &[u8]) -> Result<BlobHeader, MaterializeError> {
    read_header(&mut Reader::new(blob), KIND_SESSION)
}

pub fn blob_stats(blob: &[u8]) -> Result<BlobStats, MaterializeError> {
    let mut r = Reader::new(blob);
    let h = read_header(&mut r, KIND_SESSION)?;
    Dec::read(&mut r, h.object_count)?;
    for _ in 0..h.frame_count {
        r.record()?;
    }
    let mut proxies = 0;
    for _ in 0..h.object_count {
        if r.record()?.u8()? == REC_PROXY {
            proxies += 1;
        }
    }
    Ok(BlobStats { object_count: h.object_count, frame_count: h.frame_count, proxy_count: proxies, byte_size: blob.len() })
}

/// Rebuilds an execution from a blob. Frames are bound to code in `image`,
/// whose hash must match the blob's. Local id `i` becomes oid `i + 1`.
pub fn materialize(
    blob: &[u8],
    image: &ProgramImage,
    proxies: &mut dyn ProxyFactory,
) -> Result<Materialized, MaterializeError> {
    let mut r = Reader::new(blob);
    let header = read_header(&mut r, KIND_SESSION)?;
    if header.code_hash != image.hash() {
        return Err(MaterializeError::CodeVersionMismatch { expected: image.hash(), found: header.code_hash });
    }
    if !header.status.is_suspended() || header.frame_count == 0 {
        return malformed("blob does not hold a suspended execution");
    }
    let n = header.object_count;
    let dec = Dec::read(&mut r, n)?;
    if n as usize > r.remaining() / 5 {
        return malformed("object count exceeds blob size");
    }
    let mut frames = Vec::with_capacity(header.frame_count as usize);
    for _ in 0..header.frame_count {
        let mut fr = r.record()?;
        frames.push(read_frame(&mut fr, &dec, image, &frames)?);
        fr.expect_end()?;
    }
    let mut heap = BTreeMap::new();
    let mut made = Vec::new();
    for id in 0..n {
        let mut or = r.record()?;
        let oid = Oid(id as u64 + 1);
        let obj = match or.u8()? {
            REC_OBJECT => {
                let class = or.str()?;
                let fields = read_values(&mut or, &dec)?;
                if image.class(class).is_none() {
                    return malformed(format!("unknown class {class}"));
                }
                HeapObject::new(class, fields)
            }
            REC_PROXY => {
                let class = or.str()?.to_string();
                let resource_id = or.u64()?;
                let kind = match or.u8()? {
                    0 => ResourceKind::File,
                    tag => return Err(DecodeError::BadTag { what: "resource kind", tag }.into()),
                };
                let path = or.str()?.to_string();
                let position = or.u64()?;
                let size = Some(or.u64()?).filter(|s| *s != UNKNOWN_SIZE);
                let desc = ProxyDescriptor { resource_id, kind, class, path, position, size };
                let obj = proxies.build(&desc).map_err(MaterializeError::Proxy)?;
                made.push((oid, desc));
                obj
            }
            tag => return Err(DecodeError::BadTag { what: "object record", tag }.into()),
        };
        or.expect_end()?;
        heap.insert(oid, obj);
    }
    let mut class_vars = BTreeMap::new();
    let nv = r.count(9)?;
    for _ in 0..nv {
        let c: Arc<str> = Arc::from(r.str()?);
        let name: Arc<str> = Arc::from(r.str()?);
        let v = read_value(&mut r, &dec)?;
        if image.class(&c).and_then(|cd| cd.class_var(&name)).is_none() {
            return malformed(format!("unknown class variable {c}.{name}"));
        }
        class_vars.insert((c, name), v);
    }
    r.expect_end()?;
    if let Some(e) = &header.exception {
        if e.frame_index >= frames.len() {
            return malformed("exception names a missing frame");
        }
    }
    let next_frame_id = frames.iter().map(|f| f.id + 1).max().unwrap_or(0);
    let state = ExecutionState {
        frames,
        heap,
        class_vars,
        status: header.status,
        exception: header.exception.clone(),
        result: None,
        next_oid: n as u64 + 1,
        next_frame_id,
        instructions: 0,
    };
    Ok(Materialized { header, state, proxies: made })
}

fn read_frame(
    r: &mut Reader<'_>,
    d: &Dec,
    image: &ProgramImage,
    below: &[Frame],
) -> Result<Frame, MaterializeError> {
    let id = r.u32()?;
    let class = r.str()?;
    let selector = r.str()?;
    let plen = r.count(2)?;
    let mut block_path = Vec::with_capacity(plen);
    for _ in 0..plen {
        block_path.push(u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")));
    }
    let home = match r.u32()? {
        NO_HOME => None,
        h => Some(h),
    };
    let pc = r.u32()? as usize;
    let receiver = read_value(r, d)?;
    let locals = read_values(r, d)?;
    let entry_args = read_values(r, d)?;
    let stack = read_values(r, d)?;

    let Some(m) = image.method(class, selector) else {
        return malformed(format!("no method {class}>>{selector}"));
    };
    let Some(code) = m.code.block_at(&block_path) else {
        return malformed(format!("no block {block_path:?} in {class}>>{selector}"));
    };
    if below.iter().any(|f| f.id == id) {
        return malformed(format!("duplicate frame id {id}"));
    }
    match home {
        None if !block_path.is_empty() => return malformed("block frame without home"),
        Some(_) if block_path.is_empty() => return malformed("method frame with a home"),
        Some(h) => match below.iter().find(|f| f.id == h) {
            Some(hf) if hf.method.class == Arc::from(class)
                && &*hf.method.selector == selector
                && hf.method.block_path[..] == block_path[..block_path.len() - 1] => {}
            Some(_) => return malformed(format!("frame {id} has an inconsistent home")),
            // The home may have returned while the block lives on.
            None => {}
        },
        None => {}
    }
    if pc >= code.instrs.len() {
        return malformed(format!("pc {pc} outside {class}>>{selector}"));
    }
    if locals.len() != code.local_names.len() || entry_args.len() != code.param_count {
        return malformed(format!("frame {id} locals do not match {class}>>{selector}"));
    }
    let method = MethodRef { class: Arc::from(class), selector: Arc::from(selector), block_path };
    Ok(Frame { id, method, code, home, pc, receiver, locals, entry_args, stack })
}

/// Serializes a task's argument graph.
pub fn snapshot_args(args: &TaskArgs, code_hash: CodeHash) -> Result<Vec<u8>, SnapshotError> {
    let mut closure = Closure::new(&args.heap);
    for v in &args.values {
        closure.visit(v)?;
    }
    closure.drain(&|_| false)?;
    let mut header = Writer::new();
    write_header(&mut header, KIND_ARGS, 0, 0, code_hash, Status::Running, None, 0, closure.order.len() as u32);
    let mut enc = Enc::new(&closure.ids);
    let mut w = Writer::new();
    write_values(&mut w, &mut enc, &args.values);
    write_objects(&mut w, &mut enc, &closure, &mut [])?;
    Ok(enc.assemble(header, w))
}

pub fn materialize_args(blob: &[u8]) -> Result<TaskArgs, MaterializeError> {
    let mut r = Reader::new(blob);
    let h = read_header(&mut r, KIND_ARGS)?;
    let n = h.object_count;
    let dec = Dec::read(&mut r, n)?;
    if n as usize > r.remaining() / 5 {
        return malformed("object count exceeds blob size");
    }
    let values = read_values(&mut r, &dec)?;
    let mut args = TaskArgs { values, ..TaskArgs::new() };
    for _ in 0..n {
        let mut or = r.record()?;
        if or.u8()? != REC_OBJECT {
            return malformed("argument graphs hold plain objects only");
        }
        let class = or.str()?.to_string();
        let fields = read_values(&mut or, &dec)?;
        or.expect_end()?;
        args.alloc(&class, fields);
    }
    r.expect_end()?;
    Ok(args)
}
