use std::collections::HashMap;
use std::io::{Read, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex, Weak};
use std::thread;
use std::time::Duration;

use super::message::{Message, MAX_FRAME, TAG_NAMES};
use super::WireError;

const TAGS: usize = TAG_NAMES.len() + 1;

/// Bytes and frames per message tag, in both directions.
#[derive(Debug, Default)]
pub struct ByteCounter {
    sent: [AtomicU64; TAGS],
    received: [AtomicU64; TAGS],
    frames_sent: AtomicU64,
    frames_received: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CounterSnapshot {
    pub sent: [u64; TAGS],
    pub received: [u64; TAGS],
    pub frames_sent: u64,
    pub frames_received: u64,
}

impl CounterSnapshot {
    pub fn sent_total(&self) -> u64 {
        self.sent.iter().sum()
    }

    pub fn received_total(&self) -> u64 {
        self.received.iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.sent_total() + self.received_total()
    }

    pub fn round_trips(&self) -> u64 {
        self.frames_sent
    }

    /// Bytes in both directions for one tag.
    pub fn tag_total(&self, tag: u8) -> u64 {
        self.sent[tag as usize] + self.received[tag as usize]
    }

    pub fn since(&self, earlier: &CounterSnapshot) -> CounterSnapshot {
        let mut out = *self;
        for i in 0..TAGS {
            out.sent[i] -= earlier.sent[i];
            out.received[i] -= earlier.received[i];
        }
        out.frames_sent -= earlier.frames_sent;
        out.frames_received -= earlier.frames_received;
        out
    }

    /// Non-zero per-tag totals as (name, sent, received).
    pub fn by_tag(&self) -> Vec<(&'static str, u64, u64)> {
        (1..TAGS)
            .filter(|&i| self.sent[i] + self.received[i] > 0)
            .map(|i| (TAG_NAMES[i - 1], self.sent[i], self.received[i]))
            .collect()
    }
}

impl ByteCounter {
    pub fn new() -> Arc<ByteCounter> {
        Arc::new(ByteCounter::default())
    }

    fn on_send(&self, tag: u8, n: usize) {
        self.sent[tag as usize % TAGS].fetch_add(n as u64, Ordering::Relaxed);
        self.frames_sent.fetch_add(1, Ordering::Relaxed);
    }

    fn on_receive(&self, tag: u8, n: usize) {
        self.received[tag as usize % TAGS].fetch_add(n as u64, Ordering::Relaxed);
        self.frames_received.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        let mut s = CounterSnapshot::default();
        for i in 0..TAGS {
            s.sent[i] = self.sent[i].load(Ordering::Relaxed);
            s.received[i] = self.received[i].load(Ordering::Relaxed);
        }
        s.frames_sent = self.frames_sent.load(Ordering::Relaxed);
        s.frames_received = self.frames_received.load(Ordering::Relaxed);
        s
    }
}

/// Handles an incoming request and optionally returns the reply to send.
pub type Handler = Box<dyn FnMut(&Arc<Connection>, Message) -> Option<Message> + Send>;

#[derive(Clone)]
pub struct Options {
    /// Delay added before every frame is written.
    pub latency: Duration,
    pub request_timeout: Duration,
    /// Shared counters; a fresh set is made when absent.
    pub counters: Option<Arc<ByteCounter>>,
}

impl Default for Options {
    fn default() -> Self {
        Options { latency: Duration::ZERO, request_timeout: Duration::from_secs(120), counters: None }
    }
}

pub struct Connection {
    writer: Mutex<TcpStream>,
    latency: Duration,
    timeout: Duration,
    counters: Arc<ByteCounter>,
    pending: Mutex<HashMap<u32, mpsc::Sender<Message>>>,
    next_id: AtomicU32,
    closed: AtomicBool,
    peer: String,
}

impl std::fmt::Debug for Connection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Connection").field("peer", &self.peer).field("closed", &self.is_closed()).finish()
    }
}

impl Connection {
    pub fn connect(addr: impl ToSocketAddrs, opts: Options, handler: Handler) -> Result<Arc<Connection>, WireError> {
        let stream = TcpStream::connect(addr)?;
        Connection::start(stream, opts, handler)
    }

    /// Takes over an established stream and starts its reader and
    /// dispatcher threads.
    pub fn start(stream: TcpStream, opts: Options, handler: Handler) -> Result<Arc<Connection>, WireError> {
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
        let conn = Arc::new(Connection {
            writer: Mutex::new(stream),
            latency: opts.latency,
            timeout: opts.request_timeout,
            counters: opts.counters.unwrap_or_default(),
            pending: Mutex::new(HashMap::new()),
            next_id: AtomicU32::new(1),
            closed: AtomicBool::new(false),
            peer,
        });
        let (tx, rx) = mpsc::channel::<Message>();
        let weak = Arc::downgrade(&conn);
        thread::Builder::new().name("wire-dispatch".into()).spawn(move || dispatch(weak, rx, handler))?;
        let weak = Arc::downgrade(&conn);
        thread::Builder::new().name("wire-read".into()).spawn(move || read_loop(weak, reader, tx))?;
        Ok(conn)
    }

    pub fn peer(&self) -> &str {
        &self.peer
    }

    pub fn counters(&self) -> &Arc<ByteCounter> {
        &self.counters
    }

    pub fn latency(&self) -> Duration {
        self.latency
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::SeqCst)
    }

    pub fn close(&self) {
        self.closed.store(true, Ordering::SeqCst);
        if let Ok(w) = self.writer.lock() {
            let _ = w.shutdown(Shutdown::Both);
        }
        self.pending.lock().expect("pending lock").clear();
    }

    /// Writes one frame after the configured latency.
    pub fn send(&self, msg: &Message) -> Result<(), WireError> {
        if self.is_closed() {
            return Err(WireError::ConnectionClosed);
        }
        let bytes = msg.encode();
        if !self.latency.is_zero() {
            thread::sleep(self.latency);
        }
        let mut w = self.writer.lock().expect("writer lock");
        // Counted before writing so the peer cannot observe the frame first.
        self.counters.on_send(msg.tag(), bytes.len());
        w.write_all(&bytes).map_err(|_| WireError::ConnectionClosed)?;
        Ok(())
    }

    /// Sends a request under a fresh id and waits for its response. Error
    /// responses become `WireError::Remote`.
    pub fn request(&self, mut msg: Message) -> Result<Message, WireError> {
        let id = loop {
            let id = self.next_id.fetch_add(1, Ordering::Relaxed);
            if id != 0 {
                break id;
            }
        };
        msg.set_request_id(id);
        let (tx, rx) = mpsc::channel();
        self.pending.lock().expect("pending lock").insert(id, tx);
        if let Err(e) = self.send(&msg) {
            self.pending.lock().expect("pending lock").remove(&id);
            return Err(e);
        }
        let reply = match rx.recv_timeout(self.timeout) {
            Ok(m) => m,
            Err(mpsc::RecvTimeoutError::Timeout) => {
                self.pending.lock().expect("pending lock").remove(&id);
                return Err(WireError::Timeout(self.timeout));
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => return Err(WireError::ConnectionClosed),
        };
        match reply {
            Message::Error { reason, .. } => Err(WireError::Remote(reason)),
            other => Ok(other),
        }
    }

    fn route(&self, msg: Message) -> Option<Message> {
        if !msg.is_response() || msg.correlation_id() == 0 {
            return Some(msg);
        }
        let waiter = self.pending.lock().expect("pending lock").remove(&msg.correlation_id());
        match waiter {
            Some(tx) => {
                let _ = tx.send(msg);
                None
            }
            None => {
                log::warn!("dropping {} for unknown request {}", msg.tag_name(), msg.correlation_id());
                None
            }
        }
    }
}

fn read_frame(stream: &mut TcpStream) -> Result<(u8, Vec<u8>), WireError> {
    let mut len = [0u8; 4];
    stream.read_exact(&mut len).map_err(|_| WireError::ConnectionClosed)?;
    let len = u32::from_le_bytes(len) as usize;
    if len == 0 || len > MAX_FRAME {
        return Err(WireError::Malformed(format!("bad frame length {len}")));
    }
    let mut body = vec![0u8; len];
    stream.read_exact(&mut body).map_err(|_| WireError::ConnectionClosed)?;
    Ok((body[0], body))
}

fn read_loop(conn: Weak<Connection>, mut stream: TcpStream, requests: mpsc::Sender<Message>) {
    loop {
        let frame = read_frame(&mut stream);
        let Some(c) = conn.upgrade() else { return };
        match frame {
            Ok((tag, body)) => {
                c.counters.on_receive(tag, body.len() + 4);
                match Message::decode_body(&body) {
                    Ok(msg) => {
                        if let Some(req) = c.route(msg) {
                            if requests.send(req).is_err() {
                                return;
                            }
                        }
                    }
                    Err(e) => {
                        log::warn!("discarding frame from {}: {e}", c.peer);
                        let _ = c.send(&Message::Error { ref_id: 0, reason: e.to_string() });
                    }
                }
            }
            Err(WireError::Malformed(e)) => {
                // Frame boundaries are lost; the stream cannot be resynchronised.
                log::warn!("closing connection to {}: {e}", c.peer);
                c.close();
                return;
            }
            Err(_) => {
                c.closed.store(true, Ordering::SeqCst);
                c.pending.lock().expect("pending lock").clear();
                return;
            }
        }
    }
}

fn dispatch(conn: Weak<Connection>, rx: mpsc::Receiver<Message>, mut handler: Handler) {
    while let Ok(msg) = rx.recv() {
        let Some(c) = conn.upgrade() else { return };
        if let Some(reply) = handler(&c, msg) {
            if let Err(e) = c.send(&reply) {
                log::debug!("reply to {} not sent: {e}", c.peer);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::TcpListener;

    fn pair(latency: Duration) -> (Arc<Connection>, Arc<Connection>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            Connection::start(
                s,
                Options { latency, ..Options::default() },
                Box::new(|_, m| match m {
                    Message::BrowseRequest { req, path } => Some(Message::BrowseResponse { ref_id: req, text: path }),
                    other => Some(Message::Error { ref_id: other.correlation_id(), reason: "no".into() }),
                }),
            )
            .unwrap()
        });
        let client =
            Connection::connect(addr, Options { latency, ..Options::default() }, Box::new(|_, _| None)).unwrap();
        (client, server.join().unwrap())
    }

    #[test]
    fn request_response_and_counters() {
        let (c, s) = pair(Duration::ZERO);
        let r = c.request(Message::BrowseRequest { req: 0, path: "classes".into() }).unwrap();
        assert_eq!(r, Message::BrowseResponse { ref_id: 1, text: "classes".into() });
        let e = c.request(Message::DiscardSession { req: 0, session_id: 3 }).unwrap_err();
        assert_eq!(e, WireError::Remote("no".into()));
        let snap = c.counters().snapshot();
        // BrowseRequest: 4 len + 1 tag + 4 id + 4 strlen + 7
        assert_eq!(snap.sent[18], 20);
        assert_eq!(snap.received[19], 20);
        assert_eq!(snap.frames_sent, 2);
        thread::sleep(Duration::from_millis(20));
        assert_eq!(s.counters().snapshot().total(), snap.total());
    }

    #[test]
    fn latency_applies_per_frame() {
        let (c, _s) = pair(Duration::from_millis(15));
        let t = std::time::Instant::now();
        c.request(Message::BrowseRequest { req: 0, path: "x".into() }).unwrap();
        assert!(t.elapsed() >= Duration::from_millis(30));
    }

    #[test]
    fn closed_peer_fails_pending_requests() {
        let (c, s) = pair(Duration::ZERO);
        s.close();
        thread::sleep(Duration::from_millis(20));
        let e = c.request(Message::BrowseRequest { req: 0, path: "x".into() }).unwrap_err();
        assert_eq!(e, WireError::ConnectionClosed);
    }
}
