//! Controller-side agent core.

use std::collections::VecDeque;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use bytes::Bytes;

use super::queue::{SendQueue, DEFAULT_QUEUE_CAPACITY};
use super::{bump, AgentCounters, AgentError, Delimiter, Delivery, UNBOUND_WARN_AFTER};
use crate::codec::Protocol;
use crate::mux::{ConnMap, StreamLabel, OPENFLOW_PORT, OVSDB_PORT};
use crate::transport::{
    detect_header, HeaderForm, Outgoing, QuicEndpoint, QuicOptions, ServerCredentials, TransportErr, TransportEvent,
};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub listen: SocketAddr,
    pub key: PathBuf,
    pub cert: PathBuf,
    /// Host of the northbound daemons.
    pub daemon_host: IpAddr,
    pub openflow_port: u16,
    pub ovsdb_port: u16,
    pub queue_capacity: usize,
    pub quic: QuicOptions,
}

impl ServerConfig {
    pub fn new(listen: SocketAddr, key: PathBuf, cert: PathBuf) -> Self {
        Self {
            listen,
            key,
            cert,
            daemon_host: IpAddr::V4(Ipv4Addr::LOCALHOST),
            openflow_port: OPENFLOW_PORT,
            ovsdb_port: OVSDB_PORT,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            quic: QuicOptions::default(),
        }
    }

    pub fn load_credentials(&self) -> Result<ServerCredentials, AgentError> {
        ServerCredentials::from_pem_files(&self.key, &self.cert).map_err(|e| AgentError::BadCredentials(e.to_string()))
    }
}

/// Where a northbound record stands right after it was queued.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Enqueued {
    /// The port already has a stream; the next flush sends it there.
    Bound(StreamLabel),
    /// No stream for this port yet; the record waits until the client opens one.
    AwaitingStream,
}

pub struct ServerCore {
    quic: QuicEndpoint,
    conn_map: ConnMap,
    queue: SendQueue,
    delimiter: Delimiter,
    counters: Arc<AgentCounters>,
    generation: u64,
    auth_seen: u64,
    unbound_since: Vec<(u16, Instant, bool)>,
    events: VecDeque<TransportEvent>,
}

impl ServerCore {
    pub fn new(
        local: SocketAddr,
        creds: Arc<ServerCredentials>,
        openflow_port: u16,
        ovsdb_port: u16,
        options: QuicOptions,
    ) -> Result<Self, AgentError> {
        if openflow_port == ovsdb_port {
            return Err(AgentError::BindFailure(format!("openflow and ovsdb ports are both {openflow_port}")));
        }
        Ok(Self {
            quic: QuicEndpoint::server(local, creds, options),
            conn_map: ConnMap::new(openflow_port, ovsdb_port),
            queue: SendQueue::new(DEFAULT_QUEUE_CAPACITY),
            delimiter: Delimiter::default(),
            counters: Arc::default(),
            generation: 0,
            auth_seen: 0,
            unbound_since: Vec::new(),
            events: VecDeque::new(),
        })
    }

    pub fn with_queue_capacity(mut self, capacity: usize) -> Self {
        self.queue = SendQueue::new(capacity);
        self
    }

    /// Processes one datagram from the client agent and returns the messages
    /// to forward northbound.
    pub fn accept_packet(&mut self, now: Instant, from: SocketAddr, packet: &[u8]) -> Vec<Delivery> {
        bump(&self.counters.datagrams_in, 1);
        match detect_header(packet) {
            Ok(HeaderForm::Long) => bump(&self.counters.long_header_in, 1),
            Ok(HeaderForm::Short) => bump(&self.counters.short_header_in, 1),
            Err(_) => return Vec::new(),
        }
        self.quic.handle_datagram(now, from, packet);
        self.collect(now)
    }

    /// Queues a reply read from a northbound daemon socket.
    pub fn forward_northbound(&mut self, now: Instant, origin_port: u16, data: Bytes) -> Result<Enqueued, AgentError> {
        bump(&self.counters.local_received, 1);
        if self.conn_map.protocol_of(origin_port).is_none() {
            bump(&self.counters.dropped_unknown_origin, 1);
            return Err(AgentError::UnknownOrigin(origin_port));
        }
        if self.queue.push(origin_port, data).is_err() {
            bump(&self.counters.dropped_overflow, 1);
            return Err(AgentError::QueueFull(self.queue.len()));
        }
        bump(&self.counters.local_enqueued, 1);
        match self.conn_map.lookup(origin_port) {
            Some(label) => Ok(Enqueued::Bound(label)),
            None => {
                if !self.unbound_since.iter().any(|(p, _, _)| *p == origin_port) {
                    self.unbound_since.push((origin_port, now, false));
                }
                Ok(Enqueued::AwaitingStream)
            }
        }
    }

    /// Writes queued records to the streams bound to their ports. Returns the
    /// number of datagrams produced.
    pub fn flush_streams(&mut self, now: Instant) -> Result<usize, AgentError> {
        self.check_generation();
        let before = self.quic.queued_datagrams();
        let (quic, map, counters) = (&mut self.quic, &self.conn_map, &self.counters);
        let mut failure = None;
        let done = self.queue.drain_with(|origin, rec| {
            let label = *rec.label.get_or_insert(map.lookup(origin)?);
            match quic.try_write(label, rec.remaining()) {
                Ok(n) => {
                    bump(&counters.stream_bytes_out, n as u64);
                    Some(n)
                }
                Err(TransportErr::FlowControlBlocked | TransportErr::NoConnection) => None,
                Err(e) => {
                    failure = Some(AgentError::from(e));
                    None
                }
            }
        });
        bump(&self.counters.records_written, done as u64);
        self.warn_unbound(now);
        self.quic.drive(now);
        self.process_events();
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(self.quic.queued_datagrams().saturating_sub(before))
    }

    pub fn poll_transmit(&mut self, now: Instant) -> Option<Outgoing> {
        let out = self.quic.poll_transmit(now)?;
        bump(&self.counters.datagrams_out, 1);
        Some(out)
    }

    pub fn poll_timeout(&mut self) -> Option<Instant> {
        self.quic.schedule_retransmit().ok().flatten()
    }

    pub fn handle_timeout(&mut self, now: Instant) -> Vec<Delivery> {
        self.quic.handle_timeout(now);
        self.collect(now)
    }

    pub fn poll_event(&mut self) -> Option<TransportEvent> {
        self.events.pop_front()
    }

    pub fn conn_map(&self) -> &ConnMap {
        &self.conn_map
    }

    pub fn counters(&self) -> Arc<AgentCounters> {
        self.counters.clone()
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

    pub fn port_for(&self, protocol: Protocol) -> u16 {
        self.conn_map.port_for(protocol)
    }

    /// A new client connection starts with an empty map and fresh framers.
    fn check_generation(&mut self) {
        let g = self.quic.generation();
        if g != self.generation {
            if self.generation != 0 {
                tracing::info!("new client connection, clearing stream map");
            }
            self.generation = g;
            self.auth_seen = 0;
            self.conn_map.clear();
            self.delimiter.clear();
            self.queue.reset_progress();
        }
    }

    fn warn_unbound(&mut self, now: Instant) {
        let (queue, map, counters) = (&self.queue, &self.conn_map, &self.counters);
        self.unbound_since.retain_mut(|(port, since, warned)| {
            if queue.len_for(*port) == 0 || map.lookup(*port).is_some() {
                return false;
            }
            if !*warned && now.saturating_duration_since(*since) >= UNBOUND_WARN_AFTER {
                *warned = true;
                bump(&counters.unbound_warnings, 1);
                tracing::warn!(port, queued = queue.len_for(*port), "no stream bound for port");
            }
            true
        });
    }

    fn process_events(&mut self) {
        let failures = self.quic.auth_failures();
        if failures > self.auth_seen {
            bump(&self.counters.dropped_auth, failures - self.auth_seen);
            self.auth_seen = failures;
        }
        while let Some(ev) = self.quic.poll_event() {
            if let TransportEvent::StreamRejected(_) = ev {
                bump(&self.counters.dropped_unknown_stream, 1);
            }
            self.events.push_back(ev);
        }
    }

    fn collect(&mut self, _now: Instant) -> Vec<Delivery> {
        self.check_generation();
        let chunks = self.quic.read_streams();
        self.process_events();
        let mut out = Vec::new();
        for (label, bytes) in chunks {
            bump(&self.counters.stream_bytes_in, bytes.len() as u64);
            let protocol = label.protocol();
            let port = self.conn_map.port_for(protocol);
            match self.conn_map.bind(port, label) {
                Ok(Some(prior)) => tracing::info!(port, %prior, %label, "port rebound to new stream"),
                Ok(None) => {}
                Err(e) => {
                    bump(&self.counters.dropped_unknown_stream, 1);
                    tracing::warn!(error = %e, "stream outside policy");
                    continue;
                }
            }
            let (msgs, ok) = self.delimiter.push(label, &bytes);
            if !ok {
                bump(&self.counters.dropped_framing, 1);
            }
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
