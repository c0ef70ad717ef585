//! Message transport between producers and the consumer.
//!
//! Data path: each producer owns a [`Publisher`] that connects to the
//! consumer's [`Distributor`]. Frames are DRSM payloads with a u32 length
//! prefix. The distributor answers on the same connection with raw u32
//! credit grants: `queue_capacity` on accept, then one per message handed to
//! a worker. A publisher's transport agent only takes a message out of its
//! local queue while it holds a credit, so a stalled consumer stalls
//! `publish` after at most `send_capacity + queue_capacity` messages per
//! producer.
//!
//! Control path: the consumer binds a [`ControlServer`]; every producer
//! connects a [`ControlClient`] and receives a copy of every command.
//!
//! Downstream: [`StreamServer`] writes plain length-prefixed payloads to an
//! external reader (no credits); a reader that stops reading stalls the
//! writer through TCP flow control.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io::{self, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, warn};
use thiserror::Error;

use crate::wire::{self, Message, Tensor, Value, WireError};

pub const DEFAULT_CAPACITY: usize = 10;
pub const DEFAULT_CONNECT_TIMEOUT: Duration = Duration::from_secs(30);
/// Messages that may sit between a publisher's queue and the distributor's
/// per-connection queue beyond the two capacities. Credits reserve a
/// distributor slot before a message is written, so nothing is unaccounted.
pub const TRANSPORT_ALLOWANCE: usize = 0;
/// `btid` stamped on consumer-originated control messages.
pub const CONTROL_BTID: u64 = u64::MAX;

const ACCEPT_POLL: Duration = Duration::from_millis(10);
const CONNECT_RETRY: Duration = Duration::from_millis(50);

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("could not connect to {0} before the timeout")]
    ConnectTimeout(Endpoint),
    #[error("peer closed the connection")]
    PeerClosed,
    #[error("message btid {got:?} does not match publisher btid {expected}")]
    BtidMismatch { expected: u64, got: Option<u64> },
    #[error("address in use: {0}")]
    AddrInUse(String),
    #[error("timed out")]
    TimedOut,
    #[error("channel closed")]
    Closed,
    #[error("invalid endpoint `{0}`")]
    InvalidEndpoint(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("invalid control message: {0}")]
    InvalidControl(String),
    #[error("wire: {0}")]
    Wire(#[from] WireError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T, E = ChannelError> = std::result::Result<T, E>;

/// `tcp://host:port` with a port in 1..=65535.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Endpoint {
    host: String,
    port: u16,
}

impl Endpoint {
    pub fn new(host: impl Into<String>, port: u16) -> Result<Self> {
        let host = host.into();
        if port == 0 || host.is_empty() {
            return Err(ChannelError::InvalidEndpoint(format!("tcp://{host}:{port}")));
        }
        Ok(Endpoint { host, port })
    }

    fn from_local(addr: SocketAddr) -> Self {
        Endpoint {
            host: addr.ip().to_string(),
            port: addr.port(),
        }
    }

    pub fn host(&self) -> &str {
        &self.host
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    fn resolve(&self) -> io::Result<Vec<SocketAddr>> {
        Ok((self.host.as_str(), self.port).to_socket_addrs()?.collect())
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.host.contains(':') {
            write!(f, "tcp://[{}]:{}", self.host, self.port)
        } else {
            write!(f, "tcp://{}:{}", self.host, self.port)
        }
    }
}

impl FromStr for Endpoint {
    type Err = ChannelError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || ChannelError::InvalidEndpoint(s.to_string());
        let rest = s.strip_prefix("tcp://").ok_or_else(bad)?;
        let (host, port) = rest.rsplit_once(':').ok_or_else(bad)?;
        let host = host.trim_start_matches('[').trim_end_matches(']');
        let port: u16 = port.parse().map_err(|_| bad())?;
        Endpoint::new(host, port).map_err(|_| bad())
    }
}

fn bind_listener(host: &str, port: u16) -> Result<TcpListener> {
    TcpListener::bind((host, port)).map_err(|e| match e.kind() {
        io::ErrorKind::AddrInUse => ChannelError::AddrInUse(format!("{host}:{port}")),
        _ => ChannelError::Io(e),
    })
}

fn connect_with_retry(endpoint: &Endpoint, timeout: Duration) -> Result<TcpStream> {
    let deadline = Instant::now() + timeout;
    loop {
        let remaining = deadline.saturating_duration_since(Instant::now());
        if remaining.is_zero() {
            return Err(ChannelError::ConnectTimeout(endpoint.clone()));
        }
        let attempt = endpoint.resolve().and_then(|addrs| {
            let mut last = io::Error::new(io::ErrorKind::NotFound, "no address");
            for addr in addrs {
                match TcpStream::connect_timeout(&addr, remaining.min(Duration::from_secs(1))) {
                    Ok(s) => return Ok(s),
                    Err(e) => last = e,
                }
            }
            Err(last)
        });
        match attempt {
            Ok(stream) => {
                stream.set_nodelay(true)?;
                return Ok(stream);
            }
            Err(e) => {
                debug!("connect {endpoint}: {e}");
                thread::sleep(CONNECT_RETRY.min(deadline.saturating_duration_since(Instant::now())));
            }
        }
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

// ---------------------------------------------------------------------------
// Publisher

#[derive(Debug, Clone)]
pub struct PublisherConfig {
    pub endpoint: Endpoint,
    pub btid: u64,
    pub send_capacity: usize,
    pub connect_timeout: Duration,
}

impl PublisherConfig {
    pub fn new(endpoint: Endpoint, btid: u64) -> Self {
        PublisherConfig {
            endpoint,
            btid,
            send_capacity: DEFAULT_CAPACITY,
            connect_timeout: DEFAULT_CONNECT_TIMEOUT,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PublisherStats {
    /// Messages accepted by `publish`.
    pub admitted: u64,
    /// Messages written to the socket.
    pub sent: u64,
    pub queued: usize,
    pub max_queued: usize,
    pub credits: u64,
}

#[derive(Default)]
struct SendState {
    queue: VecDeque<Vec<u8>>,
    credits: u64,
    closed: bool,
    finishing: bool,
    admitted: u64,
    sent: u64,
    max_queued: usize,
}

struct SendShared {
    state: Mutex<SendState>,
    changed: Condvar,
    capacity: usize,
}

impl SendShared {
    fn mark_closed(&self) {
        lock(&self.state).closed = true;
        self.changed.notify_all();
    }
}

/// Producer-side sender. Confined to one producing thread; an internal
/// transport agent drains the queue as credits arrive.
pub struct Publisher {
    btid: u64,
    shared: Arc<SendShared>,
    stream: TcpStream,
    agent: Option<JoinHandle<()>>,
    credit_reader: Option<JoinHandle<()>>,
}

impl Publisher {
    pub fn connect(cfg: PublisherConfig) -> Result<Self> {
        if cfg.send_capacity == 0 {
            return Err(ChannelError::InvalidConfig("send_capacity must be >= 1"));
        }
        let stream = connect_with_retry(&cfg.endpoint, cfg.connect_timeout)?;
        let shared = Arc::new(SendShared {
            state: Mutex::new(SendState::default()),
            changed: Condvar::new(),
            capacity: cfg.send_capacity,
        });

        let mut credit_stream = stream.try_clone()?;
        let credit_shared = Arc::clone(&shared);
        let credit_reader = thread::Builder::new()
            .name(format!("credits-{}", cfg.btid))
            .spawn(move || {
                let mut buf = [0u8; 4];
                while credit_stream.read_exact(&mut buf).is_ok() {
                    let grant = u32::from_le_bytes(buf) as u64;
                    lock(&credit_shared.state).credits += grant;
                    credit_shared.changed.notify_all();
                }
                credit_shared.mark_closed();
            })?;

        let agent_stream = stream.try_clone()?;
        let agent_shared = Arc::clone(&shared);
        let agent = thread::Builder::new()
            .name(format!("publisher-{}", cfg.btid))
            .spawn(move || transport_agent(agent_stream, agent_shared))?;

        Ok(Publisher {
            btid: cfg.btid,
            shared,
            stream,
            agent: Some(agent),
            credit_reader: Some(credit_reader),
        })
    }

    pub fn btid(&self) -> u64 {
        self.btid
    }

    /// Enqueues `m`, blocking while the local queue is full.
    pub fn publish(&self, m: &Message) -> Result<()> {
        let (btid, _) = wire::validate_stream_header(m)?;
        if btid != self.btid {
            return Err(ChannelError::BtidMismatch {
                expected: self.btid,
                got: Some(btid),
            });
        }
        let payload = wire::encode_message(m)?;
        self.publish_payload(payload)
    }

    fn publish_payload(&self, payload: Vec<u8>) -> Result<()> {
        let mut st = lock(&self.shared.state);
        while st.queue.len() >= self.shared.capacity && !st.closed {
            st = self
                .shared
                .changed
                .wait(st)
                .unwrap_or_else(|p| p.into_inner());
        }
        if st.closed {
            return Err(ChannelError::PeerClosed);
        }
        st.queue.push_back(payload);
        st.admitted += 1;
        st.max_queued = st.max_queued.max(st.queue.len());
        drop(st);
        self.shared.changed.notify_all();
        Ok(())
    }

    pub fn stats(&self) -> PublisherStats {
        let st = lock(&self.shared.state);
        PublisherStats {
            admitted: st.admitted,
            sent: st.sent,
            queued: st.queue.len(),
            max_queued: st.max_queued,
            credits: st.credits,
        }
    }

    /// Waits until every queued message has been written, then closes.
    /// Fails with `PeerClosed` if the consumer went away first.
    pub fn close(mut self) -> Result<()> {
        lock(&self.shared.state).finishing = true;
        self.shared.changed.notify_all();
        if let Some(agent) = self.agent.take() {
            let _ = agent.join();
        }
        let st = lock(&self.shared.state);
        let flushed = st.queue.is_empty() && st.sent == st.admitted;
        drop(st);
        let _ = self.stream.shutdown(Shutdown::Both);
        if let Some(r) = self.credit_reader.take() {
            let _ = r.join();
        }
        if flushed {
            Ok(())
        } else {
            Err(ChannelError::PeerClosed)
        }
    }
}

impl Drop for Publisher {
    fn drop(&mut self) {
        self.shared.mark_closed();
        let _ = self.stream.shutdown(Shutdown::Both);
        if let Some(agent) = self.agent.take() {
            let _ = agent.join();
        }
        if let Some(r) = self.credit_reader.take() {
            let _ = r.join();
        }
    }
}

fn transport_agent(stream: TcpStream, shared: Arc<SendShared>) {
    let mut out = stream;
    loop {
        let payload = {
            let mut st = lock(&shared.state);
            loop {
                if st.closed {
                    return;
                }
                if st.credits > 0 && !st.queue.is_empty() {
                    break;
                }
                if st.finishing && st.queue.is_empty() {
                    return;
                }
                st = shared.changed.wait(st).unwrap_or_else(|p| p.into_inner());
            }
            st.credits -= 1;
            let p = st.queue.pop_front().expect("queue checked non-empty");
            drop(st);
            shared.changed.notify_all();
            p
        };
        if let Err(e) = wire::write_frame(&mut out, &payload) {
            debug!("publisher write failed: {e}");
            shared.mark_closed();
            return;
        }
        lock(&shared.state).sent += 1;
    }
}

// ---------------------------------------------------------------------------
// Distributor

#[derive(Debug, Clone)]
pub struct DistributorConfig {
    pub host: String,
    /// 0 binds an ephemeral port; read it back with [`Distributor::endpoint`].
    pub port: u16,
    pub queue_capacity: usize,
    pub worker_count: usize,
}

impl Default for DistributorConfig {
    fn default() -> Self {
        DistributorConfig {
            host: "127.0.0.1".into(),
            port: 0,
            queue_capacity: DEFAULT_CAPACITY,
            worker_count: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConnectionStats {
    pub delivered: u64,
    pub buffered: usize,
    pub max_buffered: usize,
    pub alive: bool,
}

struct ConnSlot {
    id: u64,
    btid: Option<u64>,
    queue: VecDeque<Message>,
    alive: bool,
    delivered: u64,
    max_buffered: usize,
    writer: Arc<Mutex<TcpStream>>,
}

#[derive(Default)]
struct DistState {
    conns: Vec<ConnSlot>,
    cursor: usize,
    closed: bool,
    next_id: u64,
    /// Totals of connections that were removed after draining.
    retired: BTreeMap<u64, ConnectionStats>,
}

impl DistState {
    /// Round-robin over connections with pending data, starting at the cursor.
    fn pick(&mut self) -> Option<usize> {
        let n = self.conns.len();
        (0..n)
            .map(|k| (self.cursor + k) % n)
            .find(|&i| !self.conns[i].queue.is_empty())
    }
}

struct DistShared {
    state: Mutex<DistState>,
    data_ready: Condvar,
    space: Condvar,
    queue_capacity: usize,
}

/// Consumer-side receiver. `next_message`/`recv_batch` may be called from
/// any number of worker threads; each message is handed to exactly one.
pub struct Distributor {
    shared: Arc<DistShared>,
    endpoint: Endpoint,
    worker_count: usize,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

impl Distributor {
    pub fn bind(cfg: DistributorConfig) -> Result<Self> {
        if cfg.queue_capacity == 0 {
            return Err(ChannelError::InvalidConfig("queue_capacity must be >= 1"));
        }
        if cfg.worker_count == 0 {
            return Err(ChannelError::InvalidConfig("worker_count must be >= 1"));
        }
        let listener = bind_listener(&cfg.host, cfg.port)?;
        listener.set_nonblocking(true)?;
        let endpoint = Endpoint::from_local(listener.local_addr()?);
        let shared = Arc::new(DistShared {
            state: Mutex::new(DistState::default()),
            data_ready: Condvar::new(),
            space: Condvar::new(),
            queue_capacity: cfg.queue_capacity,
        });
        let stop = Arc::new(AtomicBool::new(false));
        let acceptor = {
            let shared = Arc::clone(&shared);
            let stop = Arc::clone(&stop);
            thread::Builder::new()
                .name("distributor-accept".into())
                .spawn(move || accept_loop(listener, shared, stop))?
        };
        Ok(Distributor {
            shared,
            endpoint,
            worker_count: cfg.worker_count,
            stop,
            acceptor: Some(acceptor),
        })
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn worker_count(&self) -> usize {
        self.worker_count
    }

    pub fn next_message(&self, timeout: Duration) -> Result<Message> {
        let deadline = Instant::now() + timeout;
        let mut st = lock(&self.shared.state);
        loop {
            if st.closed {
                return Err(ChannelError::Closed);
            }
            if let Some(i) = st.pick() {
                let slot = &mut st.conns[i];
                let msg = slot.queue.pop_front().expect("picked slot has data");
                slot.delivered += 1;
                let writer = slot.alive.then(|| Arc::clone(&slot.writer));
                if slot.queue.is_empty() && !slot.alive {
                    let slot = st.conns.remove(i);
                    retire(&mut st, slot);
                    if st.conns.is_empty() {
                        st.cursor = 0;
                    } else {
                        st.cursor = i % st.conns.len();
                    }
                } else {
                    st.cursor = (i + 1) % st.conns.len();
                }
                drop(st);
                self.shared.space.notify_all();
                if let Some(w) = writer {
                    let _ = lock(&w).write_all(&1u32.to_le_bytes());
                }
                return Ok(msg);
            }
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                return Err(ChannelError::TimedOut);
            }
            st = self
                .shared
                .data_ready
                .wait_timeout(st, remaining)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }

    /// Up to `n` messages; fewer if `timeout` expires first.
    pub fn recv_batch(&self, n: usize, timeout: Duration) -> Result<Vec<Message>> {
        let deadline = Instant::now() + timeout;
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            match self.next_message(deadline.saturating_duration_since(Instant::now())) {
                Ok(m) => out.push(m),
                Err(ChannelError::TimedOut) => break,
                Err(ChannelError::Closed) if !out.is_empty() => break,
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    /// Live connections (producers currently connected).
    pub fn connected(&self) -> usize {
        lock(&self.shared.state)
            .conns
            .iter()
            .filter(|c| c.alive)
            .count()
    }

    pub fn wait_for_producers(&self, n: usize, timeout: Duration) -> Result<()> {
        let deadline = Instant::now() + timeout;
        while self.connected() < n {
            if Instant::now() >= deadline {
                return Err(ChannelError::TimedOut);
            }
            thread::sleep(ACCEPT_POLL);
        }
        Ok(())
    }

    /// Per-producer counters keyed by btid (connections that have not sent a
    /// message yet are not listed).
    pub fn stats(&self) -> BTreeMap<u64, ConnectionStats> {
        let st = lock(&self.shared.state);
        let mut out = st.retired.clone();
        for c in &st.conns {
            if let Some(btid) = c.btid {
                let e = out.entry(btid).or_default();
                e.delivered += c.delivered;
                e.buffered += c.queue.len();
                e.max_buffered = e.max_buffered.max(c.max_buffered);
                e.alive |= c.alive;
            }
        }
        out
    }

    /// Closes every connection; pending and future receives fail with `Closed`.
    pub fn shutdown(&self) {
        self.stop.store(true, Ordering::SeqCst);
        let mut st = lock(&self.shared.state);
        st.closed = true;
        for c in &st.conns {
            let _ = lock(&c.writer).shutdown(Shutdown::Both);
        }
        drop(st);
        self.shared.data_ready.notify_all();
        self.shared.space.notify_all();
    }
}

impl Drop for Distributor {
    fn drop(&mut self) {
        self.shutdown();
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
    }
}

fn retire(st: &mut DistState, slot: ConnSlot) {
    if let Some(btid) = slot.btid {
        let e = st.retired.entry(btid).or_default();
        e.delivered += slot.delivered;
        e.max_buffered = e.max_buffered.max(slot.max_buffered);
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<DistShared>, stop: Arc<AtomicBool>) {
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                debug!("producer connected from {peer}");
                if let Err(e) = register_connection(stream, &shared) {
                    warn!("failed to register connection from {peer}: {e}");
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
            Err(e) => {
                warn!("accept failed: {e}");
                thread::sleep(ACCEPT_POLL);
            }
        }
    }
}

fn register_connection(stream: TcpStream, shared: &Arc<DistShared>) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let writer = Arc::new(Mutex::new(stream.try_clone()?));
    let id = {
        let mut st = lock(&shared.state);
        if st.closed {
            let _ = stream.shutdown(Shutdown::Both);
            return Ok(());
        }
        let id = st.next_id;
        st.next_id += 1;
        st.conns.push(ConnSlot {
            id,
            btid: None,
            queue: VecDeque::new(),
            alive: true,
            delivered: 0,
            max_buffered: 0,
            writer: Arc::clone(&writer),
        });
        id
    };
    let initial = shared.queue_capacity as u32;
    lock(&writer).write_all(&initial.to_le_bytes())?;
    let shared = Arc::clone(shared);
    thread::Builder::new()
        .name(format!("distributor-conn-{id}"))
        .spawn(move || connection_reader(stream, id, shared))?;
    Ok(())
}

fn connection_reader(mut stream: TcpStream, id: u64, shared: Arc<DistShared>) {
    loop {
        let payload = match wire::read_frame(&mut stream) {
            Ok(Some(p)) => p,
            Ok(None) => break,
            Err(e) => {
                debug!("connection {id}: partial or failed read ({e}); discarding");
                break;
            }
        };
        let msg = match wire::decode_message(&payload)
            .and_then(|m| wire::validate_stream_header(&m).map(|_| m))
        {
            Ok(m) => m,
            Err(e) => {
                warn!("connection {id}: dropping connection after bad message: {e}");
                break;
            }
        };
        let mut st = lock(&shared.state);
        // Cease reading while this connection's queue is full.
        loop {
            if st.closed {
                return;
            }
            let full = st
                .conns
                .iter()
                .find(|c| c.id == id)
                .map(|c| c.queue.len() >= shared.queue_capacity)
                .unwrap_or(false);
            if !full {
                break;
            }
            st = shared.space.wait(st).unwrap_or_else(|p| p.into_inner());
        }
        if let Some(slot) = st.conns.iter_mut().find(|c| c.id == id) {
            slot.btid.get_or_insert(msg.btid().unwrap_or_default());
            slot.queue.push_back(msg);
            slot.max_buffered = slot.max_buffered.max(slot.queue.len());
        }
        drop(st);
        shared.data_ready.notify_one();
    }
    let mut st = lock(&shared.state);
    if let Some(i) = st.conns.iter().position(|c| c.id == id) {
        st.conns[i].alive = false;
        if st.conns[i].queue.is_empty() {
            let slot = st.conns.remove(i);
            retire(&mut st, slot);
            if st.cursor >= st.conns.len() {
                st.cursor = 0;
            }
        }
    }
    drop(st);
    shared.data_ready.notify_all();
}

// ---------------------------------------------------------------------------
// Control channel

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    SetClassProbs(Vec<f64>),
    Pause,
    Resume,
    Stop,
    Other(String),
}

/// A validated control message: `cmd` is present and `class_probs`, when
/// present, is a probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlMsg(Message);

fn check_probs(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(ChannelError::InvalidControl("class_probs is empty".into()));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(ChannelError::InvalidControl(
            "class_probs has a negative or non-finite entry".into(),
        ));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(ChannelError::InvalidControl(format!(
            "class_probs sums to {sum}"
        )));
    }
    Ok(())
}

impl ControlMsg {
    fn command_only(cmd: &str) -> Self {
        let mut m = Message::with_header(CONTROL_BTID, 0);
        m.insert("cmd", Value::Str(cmd.into()));
        ControlMsg(m)
    }

    pub fn set_class_probs(probs: &[f64]) -> Result<Self> {
        check_probs(probs)?;
        let mut c = ControlMsg::command_only("set_class_probs");
        let values: Vec<f32> = probs.iter().map(|&p| p as f32).collect();
        let t = Tensor::from_f32(vec![values.len() as u32], &values)?;
        c.0.insert("class_probs", Value::Tensor(t));
        Ok(c)
    }

    pub fn pause() -> Self {
        ControlMsg::command_only("pause")
    }

    pub fn resume() -> Self {
        ControlMsg::command_only("resume")
    }

    pub fn stop() -> Self {
        ControlMsg::command_only("stop")
    }

    pub fn from_message(m: Message) -> Result<Self> {
        if m.get("cmd").and_then(Value::as_str).is_none() {
            return Err(ChannelError::InvalidControl("missing `cmd`".into()));
        }
        if let Some(v) = m.get("class_probs") {
            let probs = v
                .as_tensor()
                .and_then(Tensor::to_f32)
                .ok_or_else(|| ChannelError::InvalidControl("class_probs must be f32".into()))?;
            check_probs(&probs.iter().map(|&p| p as f64).collect::<Vec<_>>())?;
        }
        Ok(ControlMsg(m))
    }

    pub fn message(&self) -> &Message {
        &self.0
    }

    pub fn cmd(&self) -> &str {
        self.0.get("cmd").and_then(Value::as_str).unwrap_or_default()
    }

    pub fn command(&self) -> Command {
        match self.cmd() {
            "set_class_probs" => {
                let probs = self
                    .0
                    .tensor("class_probs")
                    .and_then(Tensor::to_f32)
                    .unwrap_or_default();
                // f32 transport; renormalise in f64 so consumers see an exact simplex.
                let sum: f64 = probs.iter().map(|&p| p as f64).sum();
                Command::SetClassProbs(probs.iter().map(|&p| p as f64 / sum).collect())
            }
            "pause" => Command::Pause,
            "resume" => Command::Resume,
            "stop" => Command::Stop,
            other => Command::Other(other.to_string()),
        }
    }
}

struct ControlShared {
    clients: Mutex<Vec<TcpStream>>,
    seq: AtomicU64,
}

/// Consumer side of the control channel: broadcasts to every connected producer.
pub struct ControlServer {
    shared: Arc<ControlShared>,
    endpoint: Endpoint,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

impl ControlServer {
    pub fn bind(host: &str, port: u16) -> Result<Self> {
        let listener = bind_listener(host, port)?;
        listener.set_nonblocking(true)?;
        let endpoint = Endpoint::from_local(listener.local_addr()?);
        let shared = Arc::new(ControlShared {
            clients: Mutex::new(Vec::new()),
            seq: AtomicU64::new(0),
        });
        let stop = Arc::new(AtomicBool::new(false));
        let acceptor = {
            let shared = Arc::clone(&shared);
            let stop = Arc::clone(&stop);
            thread::Builder::new()
                .name("control-accept".into())
                .spawn(move || {
                    while !stop.load(Ordering::SeqCst) {
                        match listener.accept() {
                            Ok((s, _)) => {
                                if s.set_nonblocking(false).and(s.set_nodelay(true)).is_ok() {
                                    lock(&shared.clients).push(s);
                                }
                            }
                            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                                thread::sleep(ACCEPT_POLL)
                            }
                            Err(e) => {
                                warn!("control accept failed: {e}");
                                thread::sleep(ACCEPT_POLL);
                            }
                        }
                    }
                })?
        };
        Ok(ControlServer {
            shared,
            endpoint,
            stop,
            acceptor: Some(acceptor),
        })
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn client_count(&self) -> usize {
        lock(&self.shared.clients).len()
    }

    pub fn wait_for_clients(&self, n: usize, timeout: Duration) -> Result<()> {
        let deadline = Instant::now() + timeout;
        while self.client_count() < n {
            if Instant::now() >= deadline {
                return Err(ChannelError::TimedOut);
            }
            thread::sleep(ACCEPT_POLL);
        }
        Ok(())
    }

    /// Broadcasts `msg`; returns the number of producers it was written to.
    /// Clients whose connection fails are dropped.
    pub fn send(&self, msg: &ControlMsg) -> Result<usize> {
        if self.stop.load(Ordering::SeqCst) {
            return Err(ChannelError::Closed);
        }
        let mut m = msg.0.clone();
        m.insert("frame", Value::U64(self.shared.seq.fetch_add(1, Ordering::SeqCst)));
        let payload = wire::encode_message(&m)?;
        let mut clients = lock(&self.shared.clients);
        clients.retain_mut(|s| wire::write_frame(s, &payload).is_ok());
        Ok(clients.len())
    }

    pub fn shutdown(&self) {
        self.stop.store(true, Ordering::SeqCst);
        for s in lock(&self.shared.clients).drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for ControlServer {
    fn drop(&mut self) {
        self.shutdown();
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
    }
}

/// Producer side of the control channel.
pub struct ControlClient {
    rx: mpsc::Receiver<ControlMsg>,
    stream: TcpStream,
    reader: Option<JoinHandle<()>>,
}

impl ControlClient {
    pub fn connect(endpoint: &Endpoint, timeout: Duration) -> Result<Self> {
        let stream = connect_with_retry(endpoint, timeout)?;
        let (tx, rx) = mpsc::channel();
        let mut input = stream.try_clone()?;
        let reader = thread::Builder::new()
            .name("control-reader".into())
            .spawn(move || {
                while let Ok(Some(p)) = wire::read_frame(&mut input) {
                    match wire::decode_message(&p)
                        .map_err(ChannelError::from)
                        .and_then(ControlMsg::from_message)
                    {
                        Ok(c) => {
                            if tx.send(c).is_err() {
                                break;
                            }
                        }
                        Err(e) => warn!("ignoring control message: {e}"),
                    }
                }
            })?;
        Ok(ControlClient {
            rx,
            stream,
            reader: Some(reader),
        })
    }

    /// Next command, or `None` if nothing arrives within `timeout`.
    /// `Closed` once the server is gone and every pending command was read.
    pub fn poll(&self, timeout: Duration) -> Result<Option<ControlMsg>> {
        match self.rx.recv_timeout(timeout) {
            Ok(c) => Ok(Some(c)),
            Err(mpsc::RecvTimeoutError::Timeout) => Ok(None),
            Err(mpsc::RecvTimeoutError::Disconnected) => Err(ChannelError::Closed),
        }
    }
}

impl Drop for ControlClient {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
        if let Some(r) = self.reader.take() {
            let _ = r.join();
        }
    }
}

// ---------------------------------------------------------------------------
// Downstream frame server

/// Listens for external readers that consume plain DRSM frames.
pub struct StreamServer {
    listener: TcpListener,
    endpoint: Endpoint,
}

impl StreamServer {
    pub fn bind(host: &str, port: u16) -> Result<Self> {
        let listener = bind_listener(host, port)?;
        let endpoint = Endpoint::from_local(listener.local_addr()?);
        Ok(StreamServer { listener, endpoint })
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn accept(&self, timeout: Duration) -> Result<StreamSink> {
        self.listener.set_nonblocking(true)?;
        let deadline = Instant::now() + timeout;
        loop {
            match self.listener.accept() {
                Ok((s, _)) => {
                    s.set_nonblocking(false)?;
                    s.set_nodelay(true)?;
                    return Ok(StreamSink {
                        out: BufWriter::new(s),
                    });
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(ChannelError::TimedOut);
                    }
                    thread::sleep(ACCEPT_POLL);
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

pub struct StreamSink {
    out: BufWriter<TcpStream>,
}

impl StreamSink {
    /// Blocks while the reader is not draining its socket.
    pub fn send_payload(&mut self, payload: &[u8]) -> Result<()> {
        wire::write_frame(&mut self.out, payload)
            .and_then(|_| self.out.flush())
            .map_err(|_| ChannelError::PeerClosed)
    }

    pub fn send(&mut self, m: &Message) -> Result<()> {
        let payload = wire::encode_message(m)?;
        self.send_payload(&payload)
    }

    /// Flushes and closes the write half so the reader sees a clean end.
    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|_| ChannelError::PeerClosed)?;
        let _ = self.out.get_ref().shutdown(Shutdown::Write);
        Ok(())
    }
}
