//! Access to files held by the monitor from a debugging session.
//!
//! When a session is shipped, each open `FileStream` is replaced by a proxy
//! descriptor and the underlying file is registered in the monitor's
//! [`ResourceTable`]. On the manager, [`ProxyHost`] rebuilds the streams and
//! serves their reads over the wire through a read-ahead buffer, so the
//! debugger never opens a file itself.

use std::collections::HashMap;
use std::fs::File;
use std::sync::{Arc, Mutex};

use crate::serial::{ProxyDescriptor, ProxyFactory, ResourceKind, SubstitutionRule};
use crate::vm::host::{LocalFiles, OpenFile, ResourceHost};
use crate::vm::image::FILE_STREAM_CLASS;
use crate::vm::state::{HeapObject, ResourceTag};
use crate::vm::{Oid, Value};
use crate::wire::{Connection, Message, WireError};

/// Refill size for remote reads.
pub const DEFAULT_BUFFER: usize = 4096;

/// Resource id meaning "stream was already closed when shipped".
pub const CLOSED_RESOURCE: u64 = 0;

#[derive(Debug)]
struct Entry {
    file: OpenFile,
    session: u64,
}

/// Monitor-side registry of files reachable from shipped sessions.
#[derive(Debug, Default)]
pub struct ResourceTable {
    inner: Mutex<(u64, HashMap<u64, Entry>)>,
}

impl ResourceTable {
    pub fn new() -> Arc<ResourceTable> {
        Arc::new(ResourceTable::default())
    }

    pub fn register(&self, session: u64, file: OpenFile) -> u64 {
        let mut g = self.inner.lock().expect("resource lock");
        g.0 += 1;
        let id = g.0;
        g.1.insert(id, Entry { file, session });
        id
    }

    /// Opens `path` in this process on behalf of a session.
    pub fn open_for(&self, session: u64, path: &str) -> Result<(u64, u64), String> {
        let file = File::open(path).map_err(|e| format!("cannot open {path}: {e}"))?;
        let size = file.metadata().map_err(|e| e.to_string())?.len();
        let id = self.register(session, OpenFile { path: path.to_string(), file: Arc::new(Mutex::new(file)), size });
        Ok((id, size))
    }

    /// Positional read; never moves any stream cursor.
    pub fn read(&self, id: u64, offset: u64, len: u32) -> Result<(Vec<u8>, bool), String> {
        let file = {
            let g = self.inner.lock().expect("resource lock");
            g.1.get(&id).map(|e| e.file.clone()).ok_or_else(|| format!("unknown resource {id}"))?
        };
        let bytes = file.read_at(offset, len as usize).map_err(|e| e.to_string())?;
        let eof = offset + bytes.len() as u64 >= file.size;
        Ok((bytes, eof))
    }

    /// Drops every resource registered for a session.
    pub fn release_session(&self, session: u64) -> usize {
        let mut g = self.inner.lock().expect("resource lock");
        let before = g.1.len();
        g.1.retain(|_, e| e.session != session);
        before - g.1.len()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("resource lock").1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Serves a proxy request, producing the reply.
    pub fn serve(&self, msg: &Message) -> Option<Message> {
        match msg {
            Message::ProxyReadRequest { req, resource_id, offset, length } => {
                Some(match self.read(*resource_id, *offset, *length) {
                    Ok((bytes, eof)) => Message::ProxyReadResponse { ref_id: *req, bytes, eof },
                    Err(reason) => Message::Error { ref_id: *req, reason },
                })
            }
            Message::ProxyOpenRequest { req, session_id, path } => Some(match self.open_for(*session_id, path) {
                Ok((resource_id, size)) => Message::ProxyOpenResponse { ref_id: *req, resource_id, size },
                Err(reason) => Message::Error { ref_id: *req, reason },
            }),
            _ => None,
        }
    }
}

/// Substitutes open file streams with proxy descriptors while snapshotting.
pub struct FileStreamRule<'a> {
    files: &'a LocalFiles,
    table: &'a ResourceTable,
    session: u64,
}

impl<'a> FileStreamRule<'a> {
    pub fn new(files: &'a LocalFiles, table: &'a ResourceTable, session: u64) -> Self {
        FileStreamRule { files, table, session }
    }
}

fn stream_fields(obj: &HeapObject) -> (String, u64) {
    let path = obj.fields.first().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
    let pos = obj.fields.get(1).and_then(Value::as_int).unwrap_or(0).max(0) as u64;
    (path, pos)
}

impl SubstitutionRule for FileStreamRule<'_> {
    fn target_class(&self) -> &str {
        FILE_STREAM_CLASS
    }

    fn build_descriptor(&mut self, _oid: Oid, obj: &HeapObject) -> Result<ProxyDescriptor, String> {
        let (path, position) = stream_fields(obj);
        let (resource_id, size) = match obj.external {
            None => (CLOSED_RESOURCE, None),
            Some(tag) => {
                let file = self.files.file(tag).ok_or_else(|| format!("stream {tag} is not open"))?;
                let size = file.size;
                (self.table.register(self.session, file), Some(size))
            }
        };
        Ok(ProxyDescriptor { resource_id, kind: ResourceKind::File, class: obj.class.to_string(), path, position, size })
    }
}

#[derive(Debug)]
struct RemoteStream {
    resource_id: u64,
    size: Option<u64>,
    window_start: u64,
    window: Vec<u8>,
    /// The origin reported end of file right after the window.
    eof_after_window: bool,
}

#[derive(Debug, Default)]
struct ProxyInner {
    streams: HashMap<ResourceTag, RemoteStream>,
    next_tag: ResourceTag,
    output: Vec<String>,
    round_trips: u64,
}

/// Manager-side host: streams are proxies for files at the origin monitor,
/// and opens go to the origin too. Clones share state.
#[derive(Clone)]
pub struct ProxyHost {
    conn: Option<Arc<Connection>>,
    session: u64,
    buffer: usize,
    inner: Arc<Mutex<ProxyInner>>,
}

impl std::fmt::Debug for ProxyHost {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProxyHost").field("session", &self.session).field("buffer", &self.buffer).finish()
    }
}

impl ProxyHost {
    /// `conn` is the link to the session's monitor; without one every file
    /// access fails in the guest.
    pub fn new(conn: Option<Arc<Connection>>, session: u64) -> ProxyHost {
        ProxyHost::with_buffer(conn, session, DEFAULT_BUFFER)
    }

    pub fn with_buffer(conn: Option<Arc<Connection>>, session: u64, buffer: usize) -> ProxyHost {
        ProxyHost { conn, session, buffer: buffer.max(1), inner: Arc::default() }
    }

    /// Requests sent to the origin so far.
    pub fn round_trips(&self) -> u64 {
        self.inner.lock().expect("proxy lock").round_trips
    }

    pub fn output(&self) -> Vec<String> {
        self.inner.lock().expect("proxy lock").output.clone()
    }

    pub fn open_streams(&self) -> usize {
        self.inner.lock().expect("proxy lock").streams.len()
    }

    fn conn(&self) -> Result<&Arc<Connection>, String> {
        self.conn.as_ref().ok_or_else(|| "no connection to the session's origin".to_string())
    }

    fn add_stream(&self, resource_id: u64, size: Option<u64>) -> ResourceTag {
        let mut g = self.inner.lock().expect("proxy lock");
        g.next_tag += 1;
        let tag = g.next_tag;
        g.streams.insert(
            tag,
            RemoteStream { resource_id, size, window_start: 0, window: Vec::new(), eof_after_window: false },
        );
        tag
    }

    fn fetch(&self, resource_id: u64, offset: u64, len: usize) -> Result<(Vec<u8>, bool), String> {
        let conn = self.conn()?;
        self.inner.lock().expect("proxy lock").round_trips += 1;
        let reply = conn
            .request(Message::ProxyReadRequest { req: 0, resource_id, offset, length: len as u32 })
            .map_err(|e| e.to_string())?;
        match reply {
            Message::ProxyReadResponse { bytes, eof, .. } => Ok((bytes, eof)),
            other => Err(WireError::UnexpectedResponse(other.tag_name()).to_string()),
        }
    }
}

impl ResourceHost for ProxyHost {
    fn open(&mut self, path: &str) -> Result<ResourceTag, String> {
        self.open_remote(path)
    }

    fn open_remote(&mut self, path: &str) -> Result<ResourceTag, String> {
        let conn = self.conn()?.clone();
        self.inner.lock().expect("proxy lock").round_trips += 1;
        let reply = conn
            .request(Message::ProxyOpenRequest { req: 0, session_id: self.session, path: path.to_string() })
            .map_err(|e| match e {
                WireError::Remote(r) => r,
                other => other.to_string(),
            })?;
        match reply {
            Message::ProxyOpenResponse { resource_id, size, .. } => Ok(self.add_stream(resource_id, Some(size))),
            other => Err(WireError::UnexpectedResponse(other.tag_name()).to_string()),
        }
    }

    fn read_at(&mut self, tag: ResourceTag, offset: u64, len: usize) -> Result<Vec<u8>, String> {
        let (resource_id, size, mut out, eof_hit) = {
            let g = self.inner.lock().expect("proxy lock");
            let s = g.streams.get(&tag).ok_or_else(|| format!("stream {tag} is not open"))?;
            let end = s.window_start + s.window.len() as u64;
            let mut out = Vec::new();
            if offset >= s.window_start && offset < end {
                let from = (offset - s.window_start) as usize;
                let n = len.min(s.window.len() - from);
                out.extend_from_slice(&s.window[from..from + n]);
            }
            let eof_hit = s.eof_after_window && offset + out.len() as u64 >= end;
            (s.resource_id, s.size, out, eof_hit)
        };
        let next = offset + out.len() as u64;
        let missing = len - out.len();
        let past_end = size.is_some_and(|sz| next >= sz);
        if missing == 0 || eof_hit || past_end {
            return Ok(out);
        }
        let (chunk, eof) = self.fetch(resource_id, next, missing.max(self.buffer))?;
        let take = missing.min(chunk.len());
        out.extend_from_slice(&chunk[..take]);
        let mut g = self.inner.lock().expect("proxy lock");
        if let Some(s) = g.streams.get_mut(&tag) {
            s.window_start = next;
            s.window = chunk;
            s.eof_after_window = eof;
        }
        Ok(out)
    }

    fn at_end(&mut self, tag: ResourceTag, offset: u64) -> Result<bool, String> {
        let size = {
            let g = self.inner.lock().expect("proxy lock");
            g.streams.get(&tag).ok_or_else(|| format!("stream {tag} is not open"))?.size
        };
        match size {
            Some(sz) => Ok(offset >= sz),
            None => Ok(self.read_at(tag, offset, 1)?.is_empty()),
        }
    }

    fn close(&mut self, tag: ResourceTag) {
        self.inner.lock().expect("proxy lock").streams.remove(&tag);
    }

    fn print(&mut self, line: &str) {
        self.inner.lock().expect("proxy lock").output.push(line.to_string());
    }
}

impl ProxyFactory for ProxyHost {
    fn build(&mut self, desc: &ProxyDescriptor) -> Result<HeapObject, String> {
        let mut obj =
            HeapObject::new(&desc.class, vec![Value::from(desc.path.as_str()), Value::Int(desc.position as i64)]);
        if desc.resource_id != CLOSED_RESOURCE {
            obj.external = Some(self.add_stream(desc.resource_id, desc.size));
        }
        Ok(obj)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::Options;
    use std::io::Write;
    use std::net::TcpListener;

    fn serve(table: Arc<ResourceTable>) -> Arc<Connection> {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            let conn = Connection::start(s, Options::default(), Box::new(move |_, m| table.serve(&m))).unwrap();
            std::mem::forget(conn);
        });
        Connection::connect(addr, Options::default(), Box::new(|_, _| None)).unwrap()
    }

    #[test]
    fn sequential_reads_refill_in_blocks() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        let data: Vec<u8> = (0..10_000u32).map(|i| (i % 251) as u8).collect();
        f.write_all(&data).unwrap();
        let table = ResourceTable::new();
        let (id, size) = table.open_for(7, f.path().to_str().unwrap()).unwrap();
        let mut host = ProxyHost::new(Some(serve(table.clone())), 7);
        let tag = host.add_stream(id, Some(size));
        let mut got = Vec::new();
        let mut pos = 0;
        loop {
            let b = host.read_at(tag, pos, 300).unwrap();
            if b.is_empty() {
                break;
            }
            pos += b.len() as u64;
            got.extend(b);
        }
        assert_eq!(got, data);
        assert_eq!(host.round_trips(), 3);
        assert_eq!(table.release_session(7), 1);
    }
}
