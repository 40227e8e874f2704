//! Byte-message delivery between ranks behind a poll-only interface.
//!
//! `post_send` and `poll` never block. Messages on one (source, dest)
//! channel arrive in the order they were posted. Two backends are provided:
//! [`SimNet`], a seeded in-process network whose clock advances one tick per
//! poll, and [`SocketTransport`], one TCP stream per rank pair.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datahier::Rank;
use crate::error::{Error, Result};
use crate::protocol::{Message, MessageHeader, MessageType, MESSAGE_HEADER_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SendTicket(pub u64);

#[derive(Debug, Default)]
pub struct Polled {
    pub completed: Vec<SendTicket>,
    pub received: Vec<Message>,
}

impl Polled {
    pub fn is_empty(&self) -> bool {
        self.completed.is_empty() && self.received.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Sent,
    Received,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AuditEntry {
    pub direction: Direction,
    pub header: MessageHeader,
}

/// Every header an endpoint ever sent or received, in local order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditLog {
    entries: Vec<AuditEntry>,
}

impl AuditLog {
    pub fn record(&mut self, direction: Direction, header: MessageHeader) {
        self.entries.push(AuditEntry { direction, header });
    }

    pub fn entries(&self) -> &[AuditEntry] {
        &self.entries
    }

    pub fn sent(&self) -> impl Iterator<Item = &MessageHeader> {
        self.entries
            .iter()
            .filter(|e| e.direction == Direction::Sent)
            .map(|e| &e.header)
    }

    pub fn received(&self) -> impl Iterator<Item = &MessageHeader> {
        self.entries
            .iter()
            .filter(|e| e.direction == Direction::Received)
            .map(|e| &e.header)
    }
}

/// Callback used by a transport to nudge a sleeping owner.
pub type Waker = Arc<dyn Fn() + Send + Sync>;

pub trait Transport: Send {
    fn rank(&self) -> Rank;

    fn ranks(&self) -> usize;

    /// Queues `msg` for delivery. Never blocks.
    fn post_send(&mut self, msg: Message) -> Result<SendTicket>;

    /// Collects finished sends and arrived messages. Never blocks.
    fn poll(&mut self) -> Result<Polled>;

    /// Sends posted but not yet completed.
    fn in_flight(&self) -> usize;

    fn close(&mut self) -> Result<()>;

    fn audit(&self) -> &AuditLog;

    /// Installs a callback invoked when something arrives for this rank.
    fn set_waker(&mut self, _waker: Waker) {}

    /// This rank has nothing left to receive; peers closing is now expected.
    fn begin_shutdown(&mut self) {}
}

/// Per-message latency in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Latency {
    Fixed(u64),
    /// Uniform in `min..=max`, drawn from the network's seeded generator.
    Uniform {
        min: u64,
        max: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimNetConfig {
    pub seed: u64,
    pub latency: Latency,
    /// Messages a source may have on the wire at once; the rest wait in its
    /// outbox.
    pub capacity: usize,
}

impl Default for SimNetConfig {
    fn default() -> Self {
        SimNetConfig {
            seed: 0,
            latency: Latency::Fixed(0),
            capacity: usize::MAX,
        }
    }
}

struct InFlight {
    deliver_at: u64,
    ticket: SendTicket,
    msg: Message,
}

struct Router {
    now: u64,
    rng: ChaCha8Rng,
    config: SimNetConfig,
    outbox: Vec<VecDeque<(SendTicket, Message)>>,
    on_wire: Vec<usize>,
    channels: HashMap<(Rank, Rank), VecDeque<InFlight>>,
    last_delivery: HashMap<(Rank, Rank), u64>,
    inbox: Vec<VecDeque<Message>>,
    completed: Vec<Vec<SendTicket>>,
    closed: Vec<bool>,
    wakers: Vec<Option<Waker>>,
}

impl Router {
    fn latency(&mut self) -> u64 {
        match self.config.latency {
            Latency::Fixed(t) => t,
            Latency::Uniform { min, max } => self.rng.gen_range(min..=max),
        }
    }

    fn launch(&mut self, src: usize) {
        while self.on_wire[src] < self.config.capacity {
            let Some((ticket, msg)) = self.outbox[src].pop_front() else {
                break;
            };
            let key = (msg.header.source, msg.header.dest);
            let earliest = self.now + self.latency();
            let last = self.last_delivery.get(&key).copied().unwrap_or(0);
            let deliver_at = earliest.max(last);
            self.last_delivery.insert(key, deliver_at);
            self.on_wire[src] += 1;
            self.channels.entry(key).or_default().push_back(InFlight {
                deliver_at,
                ticket,
                msg,
            });
        }
    }

    fn tick(&mut self) {
        self.now += 1;
        for src in 0..self.outbox.len() {
            self.launch(src);
        }
        let mut keys: Vec<_> = self.channels.keys().copied().collect();
        keys.sort_unstable();
        let mut woken = Vec::new();
        for key in keys {
            let queue = self.channels.get_mut(&key).expect("present");
            while queue.front().is_some_and(|f| f.deliver_at <= self.now) {
                let f = queue.pop_front().expect("front");
                let (src, dst) = (key.0 as usize, key.1 as usize);
                self.on_wire[src] -= 1;
                self.completed[src].push(f.ticket);
                self.inbox[dst].push_back(f.msg);
                woken.push(dst);
            }
            if queue.is_empty() {
                self.channels.remove(&key);
            }
        }
        for src in 0..self.outbox.len() {
            self.launch(src);
        }
        woken.dedup();
        for dst in woken {
            if let Some(w) = &self.wakers[dst] {
                w();
            }
        }
    }
}

/// Seeded in-process network shared by co-hosted ranks.
#[derive(Clone)]
pub struct SimNet {
    router: Arc<Mutex<Router>>,
}

impl SimNet {
    /// Creates the network and one endpoint per rank.
    pub fn create(ranks: usize, config: SimNetConfig) -> Result<(SimNet, Vec<SimEndpoint>)> {
        if ranks == 0 {
            return Err(Error::Config("a network needs at least one rank".into()));
        }
        if config.capacity == 0 {
            return Err(Error::Config("in-flight capacity must be positive".into()));
        }
        if let Latency::Uniform { min, max } = config.latency {
            if min > max {
                return Err(Error::Config(format!("latency range {min}..={max} is empty")));
            }
        }
        let router = Router {
            now: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            outbox: (0..ranks).map(|_| VecDeque::new()).collect(),
            on_wire: vec![0; ranks],
            channels: HashMap::new(),
            last_delivery: HashMap::new(),
            inbox: (0..ranks).map(|_| VecDeque::new()).collect(),
            completed: vec![Vec::new(); ranks],
            closed: vec![false; ranks],
            wakers: (0..ranks).map(|_| None).collect(),
        };
        let net = SimNet {
            router: Arc::new(Mutex::new(router)),
        };
        let endpoints = (0..ranks)
            .map(|r| SimEndpoint {
                rank: r as Rank,
                ranks,
                router: Arc::clone(&net.router),
                next_ticket: 0,
                in_flight: 0,
                audit: AuditLog::default(),
                closed: false,
            })
            .collect();
        Ok((net, endpoints))
    }

    /// Current network time in ticks.
    pub fn now(&self) -> u64 {
        self.router.lock().expect("router lock").now
    }

    /// True when no message is queued, on the wire or undrained.
    pub fn is_idle(&self) -> bool {
        let r = self.router.lock().expect("router lock");
        r.outbox.iter().all(VecDeque::is_empty) && r.channels.is_empty() && r.inbox.iter().all(VecDeque::is_empty)
    }
}

pub struct SimEndpoint {
    rank: Rank,
    ranks: usize,
    router: Arc<Mutex<Router>>,
    next_ticket: u64,
    in_flight: usize,
    audit: AuditLog,
    closed: bool,
}

impl Transport for SimEndpoint {
    fn rank(&self) -> Rank {
        self.rank
    }

    fn ranks(&self) -> usize {
        self.ranks
    }

    fn post_send(&mut self, msg: Message) -> Result<SendTicket> {
        if self.closed {
            return Err(Error::Transport(format!("rank {} sent after close", self.rank)));
        }
        let dest = msg.header.dest as usize;
        if dest >= self.ranks || msg.header.source != self.rank {
            return Err(Error::Transport(format!(
                "bad routing {} -> {} on rank {}",
                msg.header.source, msg.header.dest, self.rank
            )));
        }
        let ticket = SendTicket(self.next_ticket);
        self.next_ticket += 1;
        self.in_flight += 1;
        self.audit.record(Direction::Sent, msg.header);
        let mut router = self.router.lock().expect("router lock");
        if router.closed[dest] {
            return Err(Error::Transport(format!("rank {dest} is closed")));
        }
        router.outbox[self.rank as usize].push_back((ticket, msg));
        if let Some(w) = &router.wakers[dest] {
            w();
        }
        Ok(ticket)
    }

    fn poll(&mut self) -> Result<Polled> {
        let mut router = self.router.lock().expect("router lock");
        router.tick();
        let me = self.rank as usize;
        let completed = std::mem::take(&mut router.completed[me]);
        let received: Vec<Message> = router.inbox[me].drain(..).collect();
        drop(router);
        self.in_flight -= completed.len();
        for m in &received {
            self.audit.record(Direction::Received, m.header);
        }
        Ok(Polled { completed, received })
    }

    fn in_flight(&self) -> usize {
        self.in_flight
    }

    fn close(&mut self) -> Result<()> {
        self.closed = true;
        self.router.lock().expect("router lock").closed[self.rank as usize] = true;
        Ok(())
    }

    fn audit(&self) -> &AuditLog {
        &self.audit
    }

    fn set_waker(&mut self, waker: Waker) {
        self.router.lock().expect("router lock").wakers[self.rank as usize] = Some(waker);
    }
}

/// Rank-to-address table, one `rank host:port` pair per line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankTable {
    addrs: Vec<SocketAddr>,
}

impl RankTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, SocketAddr)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (rank, addr) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| Error::Parse(format!("rank table line {}: `{line}`", lineno + 1)))?;
            let rank: usize = rank
                .parse()
                .map_err(|e| Error::Parse(format!("rank table line {}: {e}", lineno + 1)))?;
            let addr = addr
                .trim()
                .to_socket_addrs()
                .map_err(|e| Error::Parse(format!("rank table line {}: {e}", lineno + 1)))?
                .next()
                .ok_or_else(|| Error::Parse(format!("rank table line {}: no address", lineno + 1)))?;
            entries.push((rank, addr));
        }
        entries.sort_by_key(|e| e.0);
        for (expected, (rank, _)) in entries.iter().enumerate() {
            if *rank != expected {
                return Err(Error::Parse(format!("rank table is missing rank {expected}")));
            }
        }
        if entries.is_empty() {
            return Err(Error::Parse("rank table is empty".into()));
        }
        Ok(RankTable {
            addrs: entries.into_iter().map(|e| e.1).collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn from_addrs(addrs: Vec<SocketAddr>) -> Self {
        RankTable { addrs }
    }

    pub fn len(&self) -> usize {
        self.addrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.addrs.is_empty()
    }

    pub fn addr(&self, rank: Rank) -> Option<SocketAddr> {
        self.addrs.get(rank as usize).copied()
    }
}

struct Peer {
    stream: TcpStream,
    outgoing: VecDeque<(SendTicket, Vec<u8>)>,
    written: usize,
    incoming: Vec<u8>,
    shut_down: bool,
    eof: bool,
}

/// One non-blocking TCP stream per rank pair. The lower rank listens, the
/// higher rank connects and announces itself with its rank as `u32`.
pub struct SocketTransport {
    rank: Rank,
    peers: Vec<Option<Peer>>,
    next_ticket: u64,
    in_flight: usize,
    audit: AuditLog,
    closed: bool,
    finishing: bool,
}

impl SocketTransport {
    /// Establishes all pairwise connections; blocks until done or `timeout`.
    pub fn connect(rank: Rank, table: &RankTable, timeout: Duration) -> Result<Self> {
        let me = table
            .addr(rank)
            .ok_or_else(|| Error::Config(format!("rank {rank} not in rank table")))?;
        let n = table.len();
        let listener = TcpListener::bind(me).map_err(|e| Error::Transport(format!("bind {me}: {e}")))?;
        Self::connect_with(rank, table, listener, timeout, n)
    }

    /// Like [`connect`](Self::connect) but with a listener bound by the caller.
    pub fn connect_with(
        rank: Rank,
        table: &RankTable,
        listener: TcpListener,
        timeout: Duration,
        n: usize,
    ) -> Result<Self> {
        let deadline = Instant::now() + timeout;
        let mut peers: Vec<Option<Peer>> = (0..n).map(|_| None).collect();
        for lower in 0..rank {
            let addr = table.addr(lower).expect("rank in table");
            let mut stream = loop {
                match TcpStream::connect_timeout(&addr, Duration::from_millis(200)) {
                    Ok(s) => break s,
                    Err(e) if Instant::now() < deadline => {
                        let _ = e;
                        std::thread::sleep(Duration::from_millis(20));
                    }
                    Err(e) => {
                        return Err(Error::Transport(format!(
                            "rank {rank} cannot reach rank {lower} at {addr}: {e}"
                        )))
                    }
                }
            };
            stream.write_all(&rank.to_le_bytes())?;
            peers[lower as usize] = Some(Self::peer(stream)?);
        }
        listener.set_nonblocking(true)?;
        let mut missing = n - rank as usize - 1;
        while missing > 0 {
            match listener.accept() {
                Ok((mut stream, _)) => {
                    stream.set_nonblocking(false)?;
                    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
                    let mut id = [0u8; 4];
                    stream.read_exact(&mut id)?;
                    let peer = u32::from_le_bytes(id) as usize;
                    if peer <= rank as usize || peer >= n || peers[peer].is_some() {
                        return Err(Error::Transport(format!("unexpected handshake from rank {peer}")));
                    }
                    peers[peer] = Some(Self::peer(stream)?);
                    missing -= 1;
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() > deadline {
                        return Err(Error::Transport(format!(
                            "rank {rank} timed out waiting for {missing} peer(s)"
                        )));
                    }
                    std::thread::sleep(Duration::from_millis(10));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(SocketTransport {
            rank,
            peers,
            next_ticket: 0,
            in_flight: 0,
            audit: AuditLog::default(),
            closed: false,
            finishing: false,
        })
    }

    fn peer(stream: TcpStream) -> Result<Peer> {
        stream.set_nodelay(true)?;
        stream.set_read_timeout(None)?;
        stream.set_nonblocking(true)?;
        Ok(Peer {
            stream,
            outgoing: VecDeque::new(),
            written: 0,
            incoming: Vec::new(),
            shut_down: false,
            eof: false,
        })
    }

    fn flush_peer(peer: &mut Peer, completed: &mut Vec<SendTicket>) -> Result<()> {
        while let Some((ticket, bytes)) = peer.outgoing.front() {
            match peer.stream.write(&bytes[peer.written..]) {
                Ok(0) => return Err(Error::Transport("peer closed the connection".into())),
                Ok(k) => {
                    peer.written += k;
                    if peer.written == bytes.len() {
                        completed.push(*ticket);
                        peer.outgoing.pop_front();
                        peer.written = 0;
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(Error::Transport(format!("write failed: {e}"))),
            }
        }
        Ok(())
    }
}

impl Transport for SocketTransport {
    fn rank(&self) -> Rank {
        self.rank
    }

    fn ranks(&self) -> usize {
        self.peers.len()
    }

    fn post_send(&mut self, msg: Message) -> Result<SendTicket> {
        if self.closed {
            return Err(Error::Transport(format!("rank {} sent after close", self.rank)));
        }
        let dest = msg.header.dest;
        let peer = self
            .peers
            .get_mut(dest as usize)
            .and_then(Option::as_mut)
            .ok_or_else(|| Error::Transport(format!("no connection from {} to {dest}", self.rank)))?;
        let ticket = SendTicket(self.next_ticket);
        self.next_ticket += 1;
        self.in_flight += 1;
        self.audit.record(Direction::Sent, msg.header);
        peer.outgoing.push_back((ticket, msg.encode()));
        Ok(ticket)
    }

    fn poll(&mut self) -> Result<Polled> {
        let mut polled = Polled::default();
        let mut buf = [0u8; 64 * 1024];
        for (idx, slot) in self.peers.iter_mut().enumerate() {
            let Some(peer) = slot.as_mut() else { continue };
            Self::flush_peer(peer, &mut polled.completed).map_err(|e| Error::Transport(format!("rank {idx}: {e}")))?;
            while !peer.eof {
                match peer.stream.read(&mut buf) {
                    Ok(0) => peer.eof = true,
                    Ok(k) => peer.incoming.extend_from_slice(&buf[..k]),
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                    Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                    Err(e) => return Err(Error::Transport(format!("read from rank {idx} failed: {e}"))),
                }
            }
            loop {
                if peer.incoming.len() < MESSAGE_HEADER_SIZE {
                    break;
                }
                let header = MessageHeader::decode(&peer.incoming)?;
                let total = MESSAGE_HEADER_SIZE + header.payload_length as usize;
                if peer.incoming.len() < total {
                    break;
                }
                let msg = Message::decode(&peer.incoming[..total])?;
                peer.incoming.drain(..total);
                if msg.header.msg_type == MessageType::Shutdown {
                    peer.shut_down = true;
                }
                self.audit.record(Direction::Received, msg.header);
                polled.received.push(msg);
            }
            if peer.eof && !peer.shut_down && !self.closed && !self.finishing {
                return Err(Error::Transport(format!("rank {idx} disconnected unexpectedly")));
            }
        }
        self.in_flight -= polled.completed.len();
        Ok(polled)
    }

    fn in_flight(&self) -> usize {
        self.in_flight
    }

    fn close(&mut self) -> Result<()> {
        self.closed = true;
        let deadline = Instant::now() + Duration::from_secs(10);
        let mut done = Vec::new();
        for peer in self.peers.iter_mut().flatten() {
            while !peer.outgoing.is_empty() {
                Self::flush_peer(peer, &mut done)?;
                if Instant::now() > deadline {
                    return Err(Error::Transport("timed out flushing on close".into()));
                }
                if !peer.outgoing.is_empty() {
                    std::thread::sleep(Duration::from_millis(1));
                }
            }
            let _ = peer.stream.shutdown(std::net::Shutdown::Write);
        }
        self.in_flight -= done.len();
        Ok(())
    }

    fn audit(&self) -> &AuditLog {
        &self.audit
    }

    fn begin_shutdown(&mut self) {
        self.finishing = true;
    }
}
