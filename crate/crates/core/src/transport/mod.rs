//! Sans-IO QUIC connection facade.
//!
//! [`QuicEndpoint`] wraps one engine endpoint and at most one live
//! connection. Callers feed received datagrams and timer expiries in, and
//! drain datagrams and [`TransportEvent`]s out. Logical stream labels are
//! carried in an 8-byte preamble at the start of each native stream.

pub mod credentials;
pub mod handshake;
pub mod keys;
pub mod session;
pub mod wire;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use bytes::{Bytes, BytesMut};
use quinn_proto::{
    ClientConfig, ConnectionHandle, DatagramEvent, Dir, EndpointConfig, Event, ServerConfig, Side, StreamEvent,
    StreamId, TransportConfig, VarInt, WriteError,
};

pub use credentials::{demo_certificate, CredentialError, ServerCredentials};
pub use handshake::{EarlyStatus, HandshakePhase, KeyLedger, ServerTrust, SessionShared};
pub use session::{SessionFileError, SessionTicket, DEFAULT_SESSION_FILE};
pub use wire::{detect_header, split_datagram, HeaderForm, PacketKind, PacketSpan};

use crate::mux::StreamLabel;

pub const DEFAULT_SERVER_NAME: &str = "controller.quicsb.test";
pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);
pub const MIN_PROBE_TIMEOUT: Duration = Duration::from_secs(1);
/// Largest UDP payload for a 1500-byte IPv4 MTU.
pub const UDP_PAYLOAD_1500: u16 = 1472;
const PREAMBLE_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportErr {
    #[error("packet truncated")]
    Truncated,
    #[error("keys for this phase are not available")]
    KeysUnavailable,
    #[error("authentication failed")]
    AuthenticationFailed,
    #[error("handshake timed out")]
    HandshakeTimeout,
    #[error("path validation timed out")]
    PathValidationTimeout,
    #[error("connection closed: {0}")]
    Closed(String),
    #[error("no connection")]
    NoConnection,
    #[error("cannot connect: {0}")]
    Connect(String),
    #[error("flow control blocked")]
    FlowControlBlocked,
    #[error("migration requires an established connection")]
    NotEstablished,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Encrypt,
    Decrypt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub struct PathInfo {
    pub local: SocketAddr,
    pub remote: SocketAddr,
    pub validated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TransportEvent {
    /// Handshake confirmed; `resumed` is true when 0-RTT data was accepted.
    Connected { resumed: bool },
    /// The offered ticket was refused; already-written data was replayed under 1-RTT keys.
    TicketRejected,
    NewTicket(SessionTicket),
    /// A peer-opened stream was classified by its preamble.
    StreamOpened(StreamLabel),
    /// The peer opened a stream whose label breaks the id rule; it was stopped.
    StreamRejected(u64),
    PathValidated(PathInfo),
    PathValidationTimeout(PathInfo),
    HandshakeTimeout,
    Closed(String),
}

/// A datagram ready for the network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outgoing {
    pub src: SocketAddr,
    pub dst: SocketAddr,
    pub data: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct QuicOptions {
    pub udp_payload: u16,
    pub max_concurrent_streams: u32,
    pub idle_timeout: Duration,
    pub keep_alive: Option<Duration>,
    pub handshake_timeout: Duration,
    /// Seeds the engine's RNG (connection ids, packet number skips).
    pub seed: Option<[u8; 32]>,
}

impl Default for QuicOptions {
    fn default() -> Self {
        Self {
            udp_payload: UDP_PAYLOAD_1500,
            max_concurrent_streams: 1024,
            idle_timeout: Duration::from_secs(30),
            keep_alive: None,
            handshake_timeout: HANDSHAKE_TIMEOUT,
            seed: None,
        }
    }
}

impl QuicOptions {
    fn transport_config(&self) -> Arc<TransportConfig> {
        let mut t = TransportConfig::default();
        t.initial_mtu(self.udp_payload)
            .min_mtu(self.udp_payload.min(1200))
            .mtu_discovery_config(None)
            .max_concurrent_bidi_streams(VarInt::from_u32(self.max_concurrent_streams))
            .max_concurrent_uni_streams(VarInt::from_u32(0))
            .keep_alive_interval(self.keep_alive)
            .max_idle_timeout(Some(self.idle_timeout.try_into().expect("idle timeout in range")));
        Arc::new(t)
    }

    fn endpoint_config(&self) -> Arc<EndpointConfig> {
        let mut e = EndpointConfig::default();
        e.max_udp_payload_size(self.udp_payload).expect("valid payload size");
        Arc::new(e)
    }
}

struct LogicalStream {
    native: StreamId,
    preamble_done: bool,
    sent: u64,
    received: u64,
}

struct Migration {
    info: PathInfo,
    deadline: Instant,
    challenge_rx: u64,
    response_tx: u64,
    datagrams_rx_at_response: Option<u64>,
}

/// One engine endpoint with at most one live connection.
pub struct QuicEndpoint {
    side: Side,
    endpoint: quinn_proto::Endpoint,
    options: QuicOptions,
    server_config: Option<Arc<ServerConfig>>,
    local: SocketAddr,
    conn: Option<(ConnectionHandle, quinn_proto::Connection)>,
    shared: Option<Arc<SessionShared>>,
    connected: bool,
    handshake_deadline: Option<Instant>,
    events: VecDeque<TransportEvent>,
    outgoing: VecDeque<Outgoing>,
    by_label: BTreeMap<u64, LogicalStream>,
    by_native: HashMap<StreamId, u64>,
    pending_preamble: HashMap<StreamId, Vec<u8>>,
    /// Bytes written before the handshake is confirmed, per label, for replay on 0-RTT rejection.
    early_backlog: BTreeMap<u64, Vec<u8>>,
    replay: BTreeMap<u64, VecDeque<u8>>,
    session_file: Option<PathBuf>,
    migration: Option<Migration>,
    path_validated: bool,
    generation: u64,
    buf: Vec<u8>,
}

impl QuicEndpoint {
    pub fn client(local: SocketAddr, options: QuicOptions) -> Self {
        let endpoint = quinn_proto::Endpoint::new(options.endpoint_config(), None, false, options.seed);
        Self::with_endpoint(Side::Client, endpoint, None, local, options)
    }

    pub fn server(local: SocketAddr, creds: Arc<ServerCredentials>, options: QuicOptions) -> Self {
        let crypto = handshake::ServerCrypto::new(creds);
        let mut sc = ServerConfig::with_crypto(crypto);
        sc.transport_config(options.transport_config()).migration(true);
        let sc = Arc::new(sc);
        let endpoint = quinn_proto::Endpoint::new(options.endpoint_config(), Some(sc.clone()), false, options.seed);
        Self::with_endpoint(Side::Server, endpoint, Some(sc), local, options)
    }

    fn with_endpoint(
        side: Side,
        endpoint: quinn_proto::Endpoint,
        server_config: Option<Arc<ServerConfig>>,
        local: SocketAddr,
        options: QuicOptions,
    ) -> Self {
        Self {
            side,
            endpoint,
            options,
            server_config,
            local,
            conn: None,
            shared: None,
            connected: false,
            handshake_deadline: None,
            events: VecDeque::new(),
            outgoing: VecDeque::new(),
            by_label: BTreeMap::new(),
            by_native: HashMap::new(),
            pending_preamble: HashMap::new(),
            early_backlog: BTreeMap::new(),
            replay: BTreeMap::new(),
            session_file: None,
            migration: None,
            path_validated: true,
            generation: 0,
            buf: Vec::new(),
        }
    }

    /// Persist each new ticket to `path` once the handshake completes.
    pub fn set_session_file(&mut self, path: Option<PathBuf>) {
        self.session_file = path;
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local
    }

    /// Starts a connection; with a ticket, stream writes are sent as 0-RTT data
    /// immediately.
    pub fn do_handshake(
        &mut self,
        now: Instant,
        remote: SocketAddr,
        server_name: &str,
        trust: ServerTrust,
        ticket: Option<SessionTicket>,
    ) -> Result<(), TransportErr> {
        let crypto = handshake::ClientCrypto::new(trust, ticket);
        let mut cc = ClientConfig::new(crypto);
        cc.transport_config(self.options.transport_config());
        let (handle, conn) =
            self.endpoint.connect(now, cc, remote, server_name).map_err(|e| TransportErr::Connect(e.to_string()))?;
        self.install(now, handle, conn);
        self.drive(now);
        Ok(())
    }

    fn install(&mut self, now: Instant, handle: ConnectionHandle, conn: quinn_proto::Connection) {
        self.shared = handshake::shared_of(&conn);
        self.conn = Some((handle, conn));
        self.connected = false;
        self.handshake_deadline = Some(now + self.options.handshake_timeout);
        self.by_label.clear();
        self.by_native.clear();
        self.pending_preamble.clear();
        self.early_backlog.clear();
        self.replay.clear();
        self.migration = None;
        self.path_validated = true;
        self.generation += 1;
    }

    /// Increments each time a new connection is installed.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Datagrams packetized but not yet taken by `poll_transmit`.
    pub fn queued_datagrams(&self) -> usize {
        self.outgoing.len()
    }

    pub fn is_connected(&self) -> bool {
        self.connected
    }

    pub fn has_connection(&self) -> bool {
        self.conn.is_some()
    }

    /// True while a ticket was offered and the handshake is unconfirmed.
    pub fn is_zero_rtt(&self) -> bool {
        !self.connected && self.conn.as_ref().is_some_and(|(_, c)| c.has_0rtt())
    }

    pub fn shared(&self) -> Option<&Arc<SessionShared>> {
        self.shared.as_ref()
    }

    pub fn phase(&self) -> HandshakePhase {
        self.shared.as_ref().map_or(HandshakePhase::InitialKeyAgreement, |s| s.ledger().phase())
    }

    pub fn auth_failures(&self) -> u64 {
        self.shared.as_ref().map_or(0, |s| s.auth_failures())
    }

    pub fn stats(&self) -> Option<quinn_proto::ConnectionStats> {
        self.conn.as_ref().map(|(_, c)| c.stats())
    }

    pub fn rtt(&self) -> Option<Duration> {
        self.conn.as_ref().map(|(_, c)| c.rtt())
    }

    pub fn path(&self) -> Option<PathInfo> {
        self.conn.as_ref().map(|(_, c)| PathInfo {
            local: self.local,
            remote: c.remote_address(),
            validated: self.path_validated,
        })
    }

    /// Feeds one received datagram.
    pub fn handle_datagram(&mut self, now: Instant, from: SocketAddr, data: &[u8]) {
        self.buf.clear();
        let event =
            self.endpoint.handle(now, from, Some(self.local.ip()), None, BytesMut::from(data), &mut self.buf);
        match event {
            Some(DatagramEvent::ConnectionEvent(handle, ev)) => {
                if let Some((h, conn)) = self.conn.as_mut() {
                    if *h == handle {
                        conn.handle_event(ev);
                    }
                }
            }
            Some(DatagramEvent::NewConnection(incoming)) => {
                let mut buf = Vec::new();
                match self.endpoint.accept(incoming, now, &mut buf, self.server_config.clone()) {
                    Ok((handle, conn)) => {
                        if let Some((old, _)) = self.conn.take() {
                            tracing::info!(?old, "replacing previous connection");
                        }
                        self.install(now, handle, conn);
                    }
                    Err(e) => {
                        tracing::warn!(error = %e.cause, "refused incoming connection");
                        if let Some(t) = e.response {
                            self.push_transmit(&t, &buf);
                        }
                    }
                }
            }
            Some(DatagramEvent::Response(t)) => {
                let buf = std::mem::take(&mut self.buf);
                self.push_transmit(&t, &buf);
                self.buf = buf;
            }
            None => {}
        }
        self.drive(now);
    }

    fn push_transmit(&mut self, t: &quinn_proto::Transmit, buf: &[u8]) {
        let seg = t.segment_size.unwrap_or(t.size);
        for chunk in buf[..t.size].chunks(seg) {
            self.outgoing.push_back(Outgoing { src: self.local, dst: t.destination, data: chunk.to_vec() });
        }
    }

    /// Next loss-recovery or idle deadline.
    pub fn schedule_retransmit(&mut self) -> Result<Option<Instant>, TransportErr> {
        let (_, conn) = self.conn.as_mut().ok_or(TransportErr::NoConnection)?;
        if conn.is_closed() {
            return Err(TransportErr::Closed("connection closed".into()));
        }
        let mut t = conn.poll_timeout();
        for extra in [self.handshake_deadline.filter(|_| !self.connected), self.migration.as_ref().map(|m| m.deadline)]
            .into_iter()
            .flatten()
        {
            t = Some(t.map_or(extra, |v| v.min(extra)));
        }
        Ok(t)
    }

    pub fn handle_timeout(&mut self, now: Instant) {
        if let Some((_, conn)) = self.conn.as_mut() {
            if conn.poll_timeout().is_some_and(|t| t <= now) {
                conn.handle_timeout(now);
            }
        }
        if !self.connected && self.handshake_deadline.is_some_and(|d| d <= now) && self.conn.is_some() {
            self.handshake_deadline = None;
            if let Some((_, conn)) = self.conn.as_mut() {
                conn.close(now, VarInt::from_u32(0), Bytes::from_static(b"handshake timeout"));
            }
            self.events.push_back(TransportEvent::HandshakeTimeout);
        }
        self.drive(now);
    }

    /// Pulls the next datagram to send, first letting the engine packetize
    /// anything written since the last call.
    pub fn poll_transmit(&mut self, now: Instant) -> Option<Outgoing> {
        if self.outgoing.is_empty() {
            self.drive(now);
        }
        self.outgoing.pop_front()
    }

    pub fn poll_event(&mut self) -> Option<TransportEvent> {
        self.events.pop_front()
    }

    /// Processes engine events and collects everything it wants to send.
    pub fn drive(&mut self, now: Instant) {
        let Some((handle, conn)) = self.conn.as_mut() else { return };
        let handle = *handle;
        while let Some(ev) = conn.poll_endpoint_events() {
            if let Some(back) = self.endpoint.handle_event(handle, ev) {
                conn.handle_event(back);
            }
        }
        let mut app_events = Vec::new();
        while let Some(ev) = conn.poll() {
            app_events.push(ev);
        }
        for ev in app_events {
            self.on_engine_event(now, ev);
        }
        self.check_migration(now);
        self.flush_replay();
        self.flush_preambles();
        let Some((handle, conn)) = self.conn.as_mut() else { return };
        let handle = *handle;
        loop {
            self.buf.clear();
            let Some(t) = conn.poll_transmit(now, 1, &mut self.buf) else { break };
            let data = self.buf[..t.size].to_vec();
            self.outgoing.push_back(Outgoing { src: self.local, dst: t.destination, data });
        }
        while let Some(ev) = conn.poll_endpoint_events() {
            if let Some(back) = self.endpoint.handle_event(handle, ev) {
                conn.handle_event(back);
            }
        }
        if conn.is_drained() {
            self.conn = None;
            self.connected = false;
        }
    }

    fn on_engine_event(&mut self, _now: Instant, ev: Event) {
        match ev {
            Event::HandshakeDataReady => {}
            Event::Connected => {
                self.connected = true;
                self.handshake_deadline = None;
                let Some((_, conn)) = self.conn.as_mut() else { return };
                let offered = conn.has_0rtt() || self.shared.as_ref().is_some_and(|s| s.early_status() != EarlyStatus::NotOffered);
                let resumed = conn.accepted_0rtt()
                    || self.shared.as_ref().is_some_and(|s| s.early_status() == EarlyStatus::Accepted);
                if self.side.is_client() && offered && !resumed {
                    self.events.push_back(TransportEvent::TicketRejected);
                    self.replay_after_rejection();
                }
                self.early_backlog.clear();
                self.events.push_back(TransportEvent::Connected { resumed });
                if let Some(ticket) = self.shared.as_ref().and_then(|s| s.take_ticket()) {
                    if let Some(path) = &self.session_file {
                        if let Err(e) = ticket.save(path) {
                            tracing::warn!(path = %path.display(), error = %e, "cannot persist session ticket");
                        }
                    }
                    self.events.push_back(TransportEvent::NewTicket(ticket));
                }
            }
            Event::ConnectionLost { reason } => {
                self.connected = false;
                self.events.push_back(TransportEvent::Closed(reason.to_string()));
            }
            Event::Stream(StreamEvent::Opened { dir: Dir::Bi }) => {
                let Some((_, conn)) = self.conn.as_mut() else { return };
                while let Some(id) = conn.streams().accept(Dir::Bi) {
                    self.pending_preamble.insert(id, Vec::new());
                }
            }
            Event::Stream(_) | Event::DatagramReceived | Event::DatagramsUnblocked => {}
        }
    }

    fn replay_after_rejection(&mut self) {
        let labels: Vec<u64> = self.by_label.keys().copied().collect();
        self.by_label.clear();
        self.by_native.clear();
        for label in labels {
            if self.open_native(label).is_err() {
                continue;
            }
            if let Some(bytes) = self.early_backlog.remove(&label) {
                if let Some(s) = self.by_label.get_mut(&label) {
                    s.sent = 0;
                }
                self.replay.entry(label).or_default().extend(bytes);
            }
        }
        self.flush_replay();
    }

    fn open_native(&mut self, label: u64) -> Result<StreamId, TransportErr> {
        let (_, conn) = self.conn.as_mut().ok_or(TransportErr::NoConnection)?;
        let id = conn.streams().open(Dir::Bi).ok_or(TransportErr::FlowControlBlocked)?;
        self.by_label.insert(label, LogicalStream { native: id, preamble_done: false, sent: 0, received: 0 });
        self.by_native.insert(id, label);
        Ok(id)
    }

    fn flush_preambles(&mut self) {
        let Some((_, conn)) = self.conn.as_mut() else { return };
        for (label, s) in self.by_label.iter_mut().filter(|(_, s)| !s.preamble_done) {
            if let Ok(8) = conn.send_stream(s.native).write(&label.to_be_bytes()) {
                s.preamble_done = true;
            }
        }
    }

    fn flush_replay(&mut self) {
        let Some((_, conn)) = self.conn.as_mut() else { return };
        for (label, queue) in self.replay.iter_mut() {
            let Some(s) = self.by_label.get_mut(label) else { continue };
            if !s.preamble_done {
                if let Ok(8) = conn.send_stream(s.native).write(&label.to_be_bytes()) {
                    s.preamble_done = true;
                } else {
                    continue;
                }
            }
            while !queue.is_empty() {
                let (a, _) = queue.as_slices();
                match conn.send_stream(s.native).write(a) {
                    Ok(n) if n > 0 => {
                        queue.drain(..n);
                        s.sent += n as u64;
                    }
                    _ => break,
                }
            }
        }
        self.replay.retain(|_, q| !q.is_empty());
    }

    /// Opens the native stream for `label` if needed (with its preamble).
    pub fn ensure_stream(&mut self, label: StreamLabel) -> Result<(), TransportErr> {
        if self.by_label.contains_key(&label.get()) {
            return Ok(());
        }
        self.open_native(label.get())?;
        self.flush_preambles();
        Ok(())
    }

    /// Writes as much of `data` as flow control allows; returns the byte count
    /// accepted, or `FlowControlBlocked` when none was.
    pub fn try_write(&mut self, label: StreamLabel, data: &[u8]) -> Result<usize, TransportErr> {
        if self.conn.as_ref().is_none_or(|(_, c)| c.is_closed()) {
            return Err(TransportErr::NoConnection);
        }
        self.ensure_stream(label)?;
        let key = label.get();
        if self.replay.contains_key(&key) {
            return Err(TransportErr::FlowControlBlocked);
        }
        let s = self.by_label.get_mut(&key).expect("just ensured");
        if !s.preamble_done {
            return Err(TransportErr::FlowControlBlocked);
        }
        let (_, conn) = self.conn.as_mut().expect("checked");
        match conn.send_stream(s.native).write(data) {
            Ok(n) => {
                s.sent += n as u64;
                if !self.connected && self.side.is_client() {
                    self.early_backlog.entry(key).or_default().extend_from_slice(&data[..n]);
                }
                Ok(n)
            }
            Err(WriteError::Blocked) => Err(TransportErr::FlowControlBlocked),
            Err(e) => Err(TransportErr::Closed(e.to_string())),
        }
    }

    /// Reads everything available, returning `(label, bytes)` chunks in stream order.
    pub fn read_streams(&mut self) -> Vec<(StreamLabel, Bytes)> {
        let mut out = Vec::new();
        let Some((_, conn)) = self.conn.as_mut() else { return out };
        let pending: Vec<StreamId> = self.pending_preamble.keys().copied().collect();
        for id in pending {
            let mut stream = conn.recv_stream(id);
            let Ok(mut chunks) = stream.read(true) else { continue };
            let buf = self.pending_preamble.get_mut(&id).expect("listed");
            let mut rest = Vec::new();
            while buf.len() < PREAMBLE_LEN {
                match chunks.next(PREAMBLE_LEN - buf.len()) {
                    Ok(Some(c)) => buf.extend_from_slice(&c.bytes),
                    _ => break,
                }
            }
            if buf.len() == PREAMBLE_LEN {
                while let Ok(Some(c)) = chunks.next(usize::MAX) {
                    rest.push(c.bytes);
                }
            }
            let _ = chunks.finalize();
            if buf.len() < PREAMBLE_LEN {
                continue;
            }
            let label = u64::from_be_bytes(buf[..].try_into().expect("8 bytes"));
            self.pending_preamble.remove(&id);
            match StreamLabel::new(label) {
                Ok(l) => {
                    self.by_native.insert(id, label);
                    self.by_label.insert(label, LogicalStream { native: id, preamble_done: true, sent: 0, received: 0 });
                    self.events.push_back(TransportEvent::StreamOpened(l));
                    for b in rest {
                        self.by_label.get_mut(&label).expect("inserted").received += b.len() as u64;
                        out.push((l, b));
                    }
                }
                Err(_) => {
                    tracing::warn!(label, "peer opened stream with invalid label");
                    self.events.push_back(TransportEvent::StreamRejected(label));
                    let _ = conn.recv_stream(id).stop(VarInt::from_u32(1));
                }
            }
        }
        for (&label, s) in self.by_label.iter_mut() {
            let Ok(l) = StreamLabel::new(label) else { continue };
            let mut stream = conn.recv_stream(s.native);
            let Ok(mut chunks) = stream.read(true) else { continue };
            while let Ok(Some(c)) = chunks.next(usize::MAX) {
                s.received += c.bytes.len() as u64;
                out.push((l, c.bytes));
            }
            let _ = chunks.finalize();
        }
        out
    }

    /// Stream-data offsets `(sent, received)` for `label`, excluding the preamble.
    pub fn stream_offsets(&self, label: StreamLabel) -> Option<(u64, u64)> {
        self.by_label.get(&label.get()).map(|s| (s.sent, s.received))
    }

    pub fn labels(&self) -> Vec<StreamLabel> {
        self.by_label.keys().filter_map(|&l| StreamLabel::new(l).ok()).collect()
    }

    /// Encrypts or decrypts `data` with this side's write key for `phase`.
    pub fn crypt_message(&self, direction: Direction, phase: HandshakePhase, data: &[u8]) -> Result<Vec<u8>, TransportErr> {
        self.crypt_message_with(direction, phase, 0, 0, data)
    }

    /// As [`crypt_message`](Self::crypt_message), with key generation `aux`
    /// (1-RTT only) and packet number `pn` selecting the nonce.
    pub fn crypt_message_with(
        &self,
        direction: Direction,
        phase: HandshakePhase,
        aux: u32,
        pn: u64,
        data: &[u8],
    ) -> Result<Vec<u8>, TransportErr> {
        let shared = self.shared.as_ref().ok_or(TransportErr::KeysUnavailable)?;
        let pair = shared.ledger().secrets(phase, aux).ok_or(TransportErr::KeysUnavailable)?;
        let key = keys::PacketKey::from_secret(pair.local(self.side), None);
        let aad = [phase as u8];
        match direction {
            Direction::Encrypt => {
                let mut buf = data.to_vec();
                key.seal(pn, &aad, &mut buf);
                Ok(buf)
            }
            Direction::Decrypt => {
                let mut buf = data.to_vec();
                let n = key.open(pn, &aad, &mut buf).map_err(|_| TransportErr::AuthenticationFailed)?;
                buf.truncate(n);
                Ok(buf)
            }
        }
    }

    /// Rebinds to `new_local` and probes the peer. The connection id is kept;
    /// the peer validates the new path with a challenge.
    pub fn migrate(&mut self, now: Instant, new_local: SocketAddr) -> Result<PathInfo, TransportErr> {
        if !self.connected {
            return Err(TransportErr::NotEstablished);
        }
        let (_, conn) = self.conn.as_mut().ok_or(TransportErr::NoConnection)?;
        let remote = conn.remote_address();
        if new_local == self.local {
            let info = PathInfo { local: new_local, remote, validated: true };
            self.events.push_back(TransportEvent::PathValidated(info));
            return Ok(info);
        }
        self.local = new_local;
        let stats = conn.stats();
        let probe = MIN_PROBE_TIMEOUT.max(conn.rtt() * 3);
        conn.ping();
        self.path_validated = false;
        let info = PathInfo { local: new_local, remote, validated: false };
        self.migration = Some(Migration {
            info,
            deadline: now + probe,
            challenge_rx: stats.frame_rx.path_challenge,
            response_tx: stats.frame_tx.path_response,
            datagrams_rx_at_response: None,
        });
        self.drive(now);
        Ok(info)
    }

    fn check_migration(&mut self, now: Instant) {
        let (Some(m), Some((_, conn))) = (self.migration.as_mut(), self.conn.as_ref()) else { return };
        let stats = conn.stats();
        if m.datagrams_rx_at_response.is_none()
            && stats.frame_rx.path_challenge > m.challenge_rx
            && stats.frame_tx.path_response > m.response_tx
        {
            m.datagrams_rx_at_response = Some(stats.udp_rx.datagrams);
        }
        if m.datagrams_rx_at_response.is_some_and(|d| stats.udp_rx.datagrams > d) {
            let info = PathInfo { validated: true, ..m.info };
            self.migration = None;
            self.path_validated = true;
            self.events.push_back(TransportEvent::PathValidated(info));
        } else if now >= m.deadline {
            let info = m.info;
            self.migration = None;
            self.events.push_back(TransportEvent::PathValidationTimeout(info));
        }
    }

    pub fn close(&mut self, now: Instant, reason: &str) {
        if let Some((_, conn)) = self.conn.as_mut() {
            conn.close(now, VarInt::from_u32(0), Bytes::copy_from_slice(reason.as_bytes()));
        }
        self.drive(now);
    }
}
