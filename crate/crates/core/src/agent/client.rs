//! Switch-side agent core.

use std::collections::VecDeque;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use bytes::Bytes;

use super::queue::{SendQueue, DEFAULT_QUEUE_CAPACITY};
use super::{bump, AgentCounters, AgentError, Backoff, Delimiter, Delivery, DEFAULT_RECV_BUFFER, MIN_RECV_BUFFER};
use crate::codec::Protocol;
use crate::mux::{MuxPolicy, StreamMode, OPENFLOW_PORT, OVSDB_PORT};
use crate::transport::{
    detect_header, HeaderForm, Outgoing, PathInfo, QuicEndpoint, QuicOptions, ServerTrust, SessionTicket,
    TransportErr, TransportEvent, DEFAULT_SERVER_NAME,
};

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub server: SocketAddr,
    /// Address the local daemon sockets listen on.
    pub local_host: IpAddr,
    pub openflow_port: u16,
    pub ovsdb_port: u16,
    pub session_file: Option<PathBuf>,
    pub recv_buffer: usize,
    pub server_name: String,
    /// DER certificate the server must present; `None` accepts any.
    pub pinned_cert: Option<Vec<u8>>,
    pub stream_mode: StreamMode,
    pub queue_capacity: usize,
    pub reconnect: bool,
    pub quic: QuicOptions,
}

impl ClientConfig {
    pub fn new(server: SocketAddr) -> Self {
        Self {
            server,
            local_host: IpAddr::V4(Ipv4Addr::LOCALHOST),
            openflow_port: OPENFLOW_PORT,
            ovsdb_port: OVSDB_PORT,
            session_file: None,
            recv_buffer: DEFAULT_RECV_BUFFER,
            server_name: DEFAULT_SERVER_NAME.to_string(),
            pinned_cert: None,
            stream_mode: StreamMode::PerProtocol,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            reconnect: true,
            quic: QuicOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if self.openflow_port == self.ovsdb_port {
            return Err(AgentError::BindFailure(format!(
                "openflow and ovsdb ports are both {}",
                self.openflow_port
            )));
        }
        if self.recv_buffer < MIN_RECV_BUFFER {
            return Err(AgentError::Config(format!("receive buffer {} below {MIN_RECV_BUFFER}", self.recv_buffer)));
        }
        if self.queue_capacity == 0 {
            return Err(AgentError::Config("queue capacity must be positive".into()));
        }
        Ok(())
    }

    pub fn protocol_of(&self, port: u16) -> Option<Protocol> {
        if port == self.openflow_port {
            Some(Protocol::OpenFlow)
        } else if port == self.ovsdb_port {
            Some(Protocol::Ovsdb)
        } else {
            None
        }
    }

    pub fn port_for(&self, protocol: Protocol) -> u16 {
        match protocol {
            Protocol::OpenFlow => self.openflow_port,
            Protocol::Ovsdb => self.ovsdb_port,
        }
    }
}

pub struct ClientCore {
    cfg: ClientConfig,
    quic: QuicEndpoint,
    policy: MuxPolicy,
    queue: SendQueue,
    delimiter: Delimiter,
    counters: Arc<AgentCounters>,
    backoff: Backoff,
    reconnect_at: Option<Instant>,
    auth_seen: u64,
    events: VecDeque<TransportEvent>,
}

impl ClientCore {
    pub fn new(cfg: ClientConfig, local: SocketAddr) -> Result<Self, AgentError> {
        cfg.validate()?;
        let mut quic = QuicEndpoint::client(local, cfg.quic.clone());
        quic.set_session_file(cfg.session_file.clone());
        Ok(Self {
            policy: MuxPolicy::new(cfg.stream_mode),
            queue: SendQueue::new(cfg.queue_capacity),
            quic,
            cfg,
            delimiter: Delimiter::default(),
            counters: Arc::default(),
            backoff: Backoff::default(),
            reconnect_at: None,
            auth_seen: 0,
            events: VecDeque::new(),
        })
    }

    /// Opens the connection: 0-RTT when the session file holds a ticket for
    /// this server, 1-RTT otherwise.
    pub fn connect(&mut self, now: Instant) -> Result<(), AgentError> {
        let ticket = self
            .cfg
            .session_file
            .as_deref()
            .and_then(SessionTicket::load_optional)
            .filter(|t| t.server_name == self.cfg.server_name);
        let trust = match &self.cfg.pinned_cert {
            Some(cert) => ServerTrust::Pinned(cert.clone()),
            None => ServerTrust::AcceptAny,
        };
        self.auth_seen = 0;
        self.quic.do_handshake(now, self.cfg.server, &self.cfg.server_name, trust, ticket)?;
        Ok(())
    }

    /// Queues a datagram read from a local daemon socket.
    pub fn on_local_message(&mut self, origin_port: u16, data: Bytes) -> Result<(), AgentError> {
        bump(&self.counters.local_received, 1);
        if self.cfg.protocol_of(origin_port).is_none() {
            bump(&self.counters.dropped_unknown_origin, 1);
            return Err(AgentError::UnknownOrigin(origin_port));
        }
        if self.queue.push(origin_port, data).is_err() {
            bump(&self.counters.dropped_overflow, 1);
            return Err(AgentError::QueueFull(self.queue.len()));
        }
        bump(&self.counters.local_enqueued, 1);
        Ok(())
    }

    /// True when the local sockets should not be read until a flush drains
    /// the queue.
    pub fn is_backpressured(&self) -> bool {
        self.queue.is_full()
    }

    /// Writes queued records to their streams and packetizes them. Returns
    /// the number of datagrams produced.
    pub fn flush_streams(&mut self, now: Instant) -> Result<usize, AgentError> {
        let before = self.quic.queued_datagrams();
        let (quic, policy, cfg, counters) = (&mut self.quic, &mut self.policy, &self.cfg, &self.counters);
        let mut failure = None;
        let done = self.queue.drain_with(|origin, rec| {
            let label = match rec.label {
                Some(l) => l,
                None => {
                    let protocol = cfg.protocol_of(origin).expect("origin checked on enqueue");
                    match policy.label_for(protocol) {
                        Ok(l) => *rec.label.insert(l),
                        Err(e) => {
                            failure = Some(AgentError::from(e));
                            return None;
                        }
                    }
                }
            };
            match quic.try_write(label, rec.remaining()) {
                Ok(n) => {
                    bump(&counters.stream_bytes_out, n as u64);
                    Some(n)
                }
                Err(TransportErr::FlowControlBlocked | TransportErr::NoConnection) => None,
                Err(e) => {
                    failure = Some(e.into());
                    None
                }
            }
        });
        bump(&self.counters.records_written, done as u64);
        self.quic.drive(now);
        self.process_events(now);
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(self.quic.queued_datagrams().saturating_sub(before))
    }

    /// Processes one datagram from the server agent and returns the messages
    /// to forward to local daemons.
    pub fn feed_data(&mut self, now: Instant, from: SocketAddr, packet: &[u8]) -> Vec<Delivery> {
        bump(&self.counters.datagrams_in, 1);
        match detect_header(packet) {
            Ok(HeaderForm::Long) => bump(&self.counters.long_header_in, 1),
            Ok(HeaderForm::Short) => bump(&self.counters.short_header_in, 1),
            Err(_) => return Vec::new(),
        }
        self.quic.handle_datagram(now, from, packet);
        self.collect(now)
    }

    pub fn poll_transmit(&mut self, now: Instant) -> Option<Outgoing> {
        let out = self.quic.poll_transmit(now)?;
        bump(&self.counters.datagrams_out, 1);
        Some(out)
    }

    pub fn poll_timeout(&mut self) -> Option<Instant> {
        let t = self.quic.schedule_retransmit().ok().flatten();
        match (t, self.reconnect_at) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    pub fn handle_timeout(&mut self, now: Instant) -> Vec<Delivery> {
        if self.reconnect_at.is_some_and(|t| t <= now) {
            self.reconnect_at = None;
            self.reconnect(now);
        }
        self.quic.handle_timeout(now);
        self.collect(now)
    }

    pub fn poll_event(&mut self) -> Option<TransportEvent> {
        self.events.pop_front()
    }

    /// Moves the connection to a new local address, keeping streams.
    pub fn migrate(&mut self, now: Instant, new_local: SocketAddr) -> Result<PathInfo, AgentError> {
        let info = self.quic.migrate(now, new_local)?;
        self.process_events(now);
        Ok(info)
    }

    pub fn counters(&self) -> Arc<AgentCounters> {
        self.counters.clone()
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    pub fn quic(&self) -> &QuicEndpoint {
        &self.quic
    }

    pub fn quic_mut(&mut self) -> &mut QuicEndpoint {
        &mut self.quic
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    fn reconnect(&mut self, now: Instant) {
        bump(&self.counters.reconnects, 1);
        self.policy.retire(Protocol::OpenFlow);
        self.policy.retire(Protocol::Ovsdb);
        self.queue.reset_progress();
        self.delimiter.clear();
        if let Err(e) = self.connect(now) {
            tracing::warn!(error = %e, "reconnect failed");
            self.schedule_reconnect(now);
        }
    }

    fn schedule_reconnect(&mut self, now: Instant) {
        if self.cfg.reconnect && self.reconnect_at.is_none() {
            let delay = self.backoff.next_delay();
            tracing::info!(?delay, "scheduling reconnect");
            self.reconnect_at = Some(now + delay);
        }
    }

    fn process_events(&mut self, now: Instant) {
        let failures = self.quic.auth_failures();
        if failures > self.auth_seen {
            bump(&self.counters.dropped_auth, failures - self.auth_seen);
            self.auth_seen = failures;
        }
        while let Some(ev) = self.quic.poll_event() {
            match &ev {
                TransportEvent::Connected { resumed } => {
                    tracing::info!(resumed, "connected to server agent");
                    self.backoff.reset();
                }
                TransportEvent::Closed(_) | TransportEvent::HandshakeTimeout => self.schedule_reconnect(now),
                TransportEvent::StreamRejected(_) => bump(&self.counters.dropped_unknown_stream, 1),
                _ => {}
            }
            self.events.push_back(ev);
        }
    }

    fn collect(&mut self, now: Instant) -> Vec<Delivery> {
        let chunks = self.quic.read_streams();
        self.process_events(now);
        let mut out = Vec::new();
        for (label, bytes) in chunks {
            bump(&self.counters.stream_bytes_in, bytes.len() as u64);
            let protocol = label.protocol();
            let (msgs, ok) = self.delimiter.push(label, &bytes);
            if !ok {
                bump(&self.counters.dropped_framing, 1);
            }
            let port = self.cfg.port_for(protocol);
            for data in msgs {
                bump(
                    match protocol {
                        Protocol::OpenFlow => &self.counters.delivered_openflow,
                        Protocol::Ovsdb => &self.counters.delivered_ovsdb,
                    },
                    1,
                );
                out.push(Delivery { port, protocol, label, data });
            }
        }
        out
    }
}
