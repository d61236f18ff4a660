//! The switch-to-controller path in virtual time, over the agents or over
//! plain TCP.

use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use bytes::{Buf, BufMut, Bytes, BytesMut};

use super::sim::{Body, Link, LinkConfig, Packet};
use super::tcp::{TcpEndpoint, TcpParams};
use crate::agent::{ClientConfig, ClientCore, Delivery, ServerCore};
use crate::codec::{ControlMessage, Framer, Protocol};
use crate::mux::{StreamLabel, StreamMode, OPENFLOW_PORT, OVSDB_PORT};
use crate::transport::{demo_certificate, QuicOptions, ServerCredentials, TransportEvent};

pub const SWITCH_HOST: IpAddr = IpAddr::V4(Ipv4Addr::new(10, 0, 0, 1));
pub const CONTROLLER_HOST: IpAddr = IpAddr::V4(Ipv4Addr::new(10, 0, 0, 2));
pub const AGENT_PORT: u16 = 4433;
const CLIENT_PORT_BASE: u16 = 50000;
const EPHEMERAL_BASE: u16 = 40000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    Quic,
    Tcp,
}

impl std::str::FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "quic" | "udp" => Ok(Self::Quic),
            "tcp" => Ok(Self::Tcp),
            other => Err(format!("unknown transport {other:?}, expected quic or tcp")),
        }
    }
}

impl std::fmt::Display for TransportKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Quic => "quic",
            Self::Tcp => "tcp",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Switch,
    Controller,
}

/// A control message handed to the daemon on side `to`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arrival {
    pub to: Side,
    pub protocol: Protocol,
    /// QUIC stream the message arrived on; `None` over tcp.
    pub label: Option<StreamLabel>,
    pub data: Bytes,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PathStats {
    /// Messages the path refused or lost before they reached the wire.
    pub undeliverable: u64,
    pub reconnects: u64,
    /// Stream frames sent by both engines (agent path only).
    pub stream_frames: Option<u64>,
}

/// Carries daemon messages across the simulated link.
pub trait Southbound {
    fn kind(&self) -> TransportKind;
    fn start(&mut self, now: Instant);
    /// Both protocol channels can carry messages.
    fn is_ready(&self) -> bool;
    fn send(&mut self, now: Instant, from: Side, msg: &ControlMessage);
    fn poll_deadline(&mut self) -> Option<Instant>;
    /// Processes everything due at `now`.
    fn advance(&mut self, now: Instant) -> Vec<Arrival>;
    /// The switch host loses its address; nothing in flight survives.
    fn path_down(&mut self, now: Instant);
    /// The switch host is back on a new address.
    fn path_up(&mut self, now: Instant);
    fn link(&self) -> &Link;
    fn link_mut(&mut self) -> &mut Link;
    fn stats(&self) -> PathStats;
    /// (label, sent, received) stream offsets on the switch side.
    fn stream_offsets(&self) -> Vec<(u64, u64, u64)> {
        Vec::new()
    }
    /// Set once the path has given up, e.g. on a failed path validation.
    fn failure(&self) -> Option<String> {
        None
    }
}

#[derive(Debug, Clone)]
pub struct PathConfig {
    pub link: LinkConfig,
    pub seed: u64,
    pub stream_mode: StreamMode,
    pub session_file: Option<PathBuf>,
    pub tcp: TcpParams,
    /// Wrap each baseline message in TLS 1.3 application-data records.
    pub tcp_tls: bool,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            link: LinkConfig::default(),
            seed: 1,
            stream_mode: StreamMode::PerProtocol,
            session_file: None,
            tcp: TcpParams::default(),
            tcp_tls: false,
        }
    }
}

pub fn build_path(kind: TransportKind, cfg: &PathConfig, origin: Instant) -> Box<dyn Southbound> {
    match kind {
        TransportKind::Quic => Box::new(QuicPath::new(cfg, origin)),
        TransportKind::Tcp => Box::new(TcpPath::new(cfg, origin)),
    }
}

fn seed_bytes(seed: u64, salt: u8) -> [u8; 32] {
    let mut b = [salt; 32];
    b[..8].copy_from_slice(&seed.to_le_bytes());
    b
}

/// Client and server agents joined by the link.
pub struct QuicPath {
    client: ClientCore,
    server: ServerCore,
    link: Link,
    client_addr: SocketAddr,
    server_addr: SocketAddr,
    next_port: u16,
    undeliverable: u64,
    events: Vec<(Side, TransportEvent)>,
}

impl QuicPath {
    pub fn new(cfg: &PathConfig, origin: Instant) -> Self {
        let server_addr = SocketAddr::new(CONTROLLER_HOST, AGENT_PORT);
        let client_addr = SocketAddr::new(SWITCH_HOST, CLIENT_PORT_BASE);
        let mut ccfg = ClientConfig::new(server_addr);
        ccfg.stream_mode = cfg.stream_mode;
        ccfg.session_file = cfg.session_file.clone();
        ccfg.pinned_cert = Some(demo_certificate());
        ccfg.reconnect = false;
        ccfg.quic = QuicOptions { seed: Some(seed_bytes(cfg.seed, 1)), ..Default::default() };
        let client = ClientCore::new(ccfg, client_addr).expect("valid client config");
        let sopts = QuicOptions { seed: Some(seed_bytes(cfg.seed, 2)), ..Default::default() };
        let server = ServerCore::new(server_addr, Arc::new(ServerCredentials::demo()), OPENFLOW_PORT, OVSDB_PORT, sopts)
            .expect("distinct daemon ports");
        Self {
            client,
            server,
            link: Link::new(cfg.link.clone(), cfg.seed, origin),
            client_addr,
            server_addr,
            next_port: CLIENT_PORT_BASE + 1,
            undeliverable: 0,
            events: Vec::new(),
        }
    }

    pub fn client(&self) -> &ClientCore {
        &self.client
    }

    pub fn server(&self) -> &ServerCore {
        &self.server
    }

    pub fn client_addr(&self) -> SocketAddr {
        self.client_addr
    }

    pub fn events(&self) -> &[(Side, TransportEvent)] {
        &self.events
    }

    fn pump(&mut self, now: Instant) {
        if self.client.flush_streams(now).is_err() {
            self.undeliverable += 1;
        }
        if self.server.flush_streams(now).is_err() {
            self.undeliverable += 1;
        }
        while let Some(out) = self.client.poll_transmit(now) {
            self.link.send(now, Packet { src: out.src, dst: out.dst, body: Body::Udp(out.data.into()) });
        }
        while let Some(out) = self.server.poll_transmit(now) {
            self.link.send(now, Packet { src: out.src, dst: out.dst, body: Body::Udp(out.data.into()) });
        }
        while let Some(e) = self.client.poll_event() {
            self.events.push((Side::Switch, e));
        }
        while let Some(e) = self.server.poll_event() {
            self.events.push((Side::Controller, e));
        }
    }
}

fn arrivals(to: Side, ds: Vec<Delivery>, out: &mut Vec<Arrival>) {
    out.extend(ds.into_iter().map(|d| Arrival { to, protocol: d.protocol, label: Some(d.label), data: d.data }));
}

impl Southbound for QuicPath {
    fn kind(&self) -> TransportKind {
        TransportKind::Quic
    }

    fn start(&mut self, now: Instant) {
        self.client.connect(now).expect("client connect");
        self.pump(now);
    }

    fn is_ready(&self) -> bool {
        self.client.quic().is_connected() && self.server.quic().is_connected()
    }

    fn send(&mut self, now: Instant, from: Side, msg: &ControlMessage) {
        let res = match from {
            Side::Switch => {
                let port = self.client.config().port_for(msg.protocol);
                self.client.on_local_message(port, msg.payload.clone())
            }
            Side::Controller => {
                let port = self.server.port_for(msg.protocol);
                self.server.forward_northbound(now, port, msg.payload.clone()).map(|_| ())
            }
        };
        if res.is_err() {
            self.undeliverable += 1;
        }
        self.pump(now);
    }

    fn poll_deadline(&mut self) -> Option<Instant> {
        [self.link.next_arrival(), self.client.poll_timeout(), self.server.poll_timeout()].into_iter().flatten().min()
    }

    fn advance(&mut self, now: Instant) -> Vec<Arrival> {
        let mut out = Vec::new();
        for _ in 0..10_000 {
            let mut busy = false;
            while let Some(pkt) = self.link.pop_due(now) {
                busy = true;
                let Body::Udp(data) = pkt.body else { continue };
                if pkt.dst == self.server_addr {
                    arrivals(Side::Controller, self.server.accept_packet(now, pkt.src, &data), &mut out);
                } else {
                    arrivals(Side::Switch, self.client.feed_data(now, pkt.src, &data), &mut out);
                }
            }
            if self.client.poll_timeout().is_some_and(|t| t <= now) {
                busy = true;
                arrivals(Side::Switch, self.client.handle_timeout(now), &mut out);
            }
            if self.server.poll_timeout().is_some_and(|t| t <= now) {
                busy = true;
                arrivals(Side::Controller, self.server.handle_timeout(now), &mut out);
            }
            self.pump(now);
            if !busy {
                break;
            }
        }
        out
    }

    fn path_down(&mut self, _now: Instant) {
        self.link.set_down(self.client_addr, true);
    }

    fn path_up(&mut self, now: Instant) {
        let new = SocketAddr::new(SWITCH_HOST, self.next_port);
        self.next_port += 1;
        if self.client.migrate(now, new).is_ok() {
            self.client_addr = new;
        }
        self.pump(now);
    }

    fn link(&self) -> &Link {
        &self.link
    }

    fn link_mut(&mut self) -> &mut Link {
        &mut self.link
    }

    fn stats(&self) -> PathStats {
        let frames = |s: Option<quinn_proto::ConnectionStats>| s.map_or(0, |s| s.frame_tx.stream);
        PathStats {
            undeliverable: self.undeliverable,
            reconnects: 0,
            stream_frames: Some(frames(self.client.quic().stats()) + frames(self.server.quic().stats())),
        }
    }

    fn stream_offsets(&self) -> Vec<(u64, u64, u64)> {
        let q = self.client.quic();
        q.labels().into_iter().filter_map(|l| q.stream_offsets(l).map(|(s, r)| (l.get(), s, r))).collect()
    }

    fn failure(&self) -> Option<String> {
        self.events.iter().find_map(|(_, e)| match e {
            TransportEvent::PathValidationTimeout(p) => Some(format!("path validation to {} timed out", p.remote)),
            TransportEvent::Closed(reason) => Some(format!("connection closed: {reason}")),
            _ => None,
        })
    }
}

/// Per-record cost of TLS 1.3 with an AEAD: 5-byte header, inner content
/// type and 16-byte tag.
pub const TLS_RECORD_OVERHEAD: usize = 22;
const TLS_MAX_PLAINTEXT: usize = 16384;
const TLS_TAG_LEN: usize = 16;

/// Frames `data` as TLS application-data records. The tag is filler; only
/// the sizes matter here.
pub fn seal_records(data: &[u8]) -> Vec<u8> {
    let records = data.len().div_ceil(TLS_MAX_PLAINTEXT).max(1);
    let mut out = Vec::with_capacity(data.len() + records * TLS_RECORD_OVERHEAD);
    for chunk in data.chunks(TLS_MAX_PLAINTEXT) {
        let len = (chunk.len() + 1 + TLS_TAG_LEN) as u16;
        out.extend_from_slice(&[0x17, 0x03, 0x03]);
        out.put_u16(len);
        out.extend_from_slice(chunk);
        out.push(0x17);
        out.extend_from_slice(&[0u8; TLS_TAG_LEN]);
    }
    out
}

/// Reassembles records from a byte stream and returns their plaintext.
#[derive(Debug, Default)]
pub struct RecordReader {
    buf: BytesMut,
}

impl RecordReader {
    pub fn push(&mut self, data: &[u8]) -> Vec<u8> {
        self.buf.extend_from_slice(data);
        let mut out = Vec::new();
        while self.buf.len() >= 5 {
            let len = usize::from(u16::from_be_bytes([self.buf[3], self.buf[4]]));
            if self.buf.len() < 5 + len {
                break;
            }
            self.buf.advance(5);
            let record = self.buf.split_to(len);
            out.extend_from_slice(&record[..len.saturating_sub(1 + TLS_TAG_LEN)]);
        }
        out
    }
}

struct Channel {
    protocol: Protocol,
    switch_addr: SocketAddr,
    ctrl_addr: SocketAddr,
    client: TcpEndpoint,
    server: TcpEndpoint,
    to_ctrl: Framer,
    to_switch: Framer,
    /// Record readers (toward controller, toward switch) when TLS is on.
    tls: Option<(RecordReader, RecordReader)>,
}

impl Channel {
    fn new(protocol: Protocol, params: TcpParams, local_port: u16, iss: u32, tls: bool) -> Self {
        let port = match protocol {
            Protocol::OpenFlow => OPENFLOW_PORT,
            Protocol::Ovsdb => OVSDB_PORT,
        };
        Self {
            protocol,
            switch_addr: SocketAddr::new(SWITCH_HOST, local_port),
            ctrl_addr: SocketAddr::new(CONTROLLER_HOST, port),
            client: TcpEndpoint::client(params, iss),
            server: TcpEndpoint::listener(params, iss.wrapping_mul(7).wrapping_add(12345)),
            to_ctrl: Framer::new(protocol),
            to_switch: Framer::new(protocol),
            tls: tls.then(Default::default),
        }
    }
}

/// One TCP connection per protocol, as ovs-switchd and ovsdb-server open
/// them, with no agents in between.
pub struct TcpPath {
    params: TcpParams,
    tls: bool,
    link: Link,
    channels: Vec<Channel>,
    next_port: u16,
    reconnects: u64,
    undeliverable: u64,
}

impl TcpPath {
    pub fn new(cfg: &PathConfig, origin: Instant) -> Self {
        let params = cfg.tcp;
        let iss = cfg.seed as u32;
        let tls = cfg.tcp_tls;
        Self {
            params,
            tls,
            link: Link::new(cfg.link.clone(), cfg.seed, origin),
            channels: vec![
                Channel::new(Protocol::OpenFlow, params, EPHEMERAL_BASE, iss, tls),
                Channel::new(Protocol::Ovsdb, params, EPHEMERAL_BASE + 1, iss.wrapping_add(1 << 20), tls),
            ],
            next_port: EPHEMERAL_BASE + 2,
            reconnects: 0,
            undeliverable: 0,
        }
    }

    pub fn switch_addrs(&self) -> Vec<SocketAddr> {
        self.channels.iter().map(|c| c.switch_addr).collect()
    }

    fn pump(&mut self, now: Instant) {
        for ch in &mut self.channels {
            while let Some(seg) = ch.client.poll_segment() {
                self.link.send(now, Packet { src: ch.switch_addr, dst: ch.ctrl_addr, body: Body::Tcp(seg) });
            }
            while let Some(seg) = ch.server.poll_segment() {
                self.link.send(now, Packet { src: ch.ctrl_addr, dst: ch.switch_addr, body: Body::Tcp(seg) });
            }
        }
    }

    fn collect(ch: &mut Channel, out: &mut Vec<Arrival>) {
        let mut up = ch.server.take_received().to_vec();
        let mut down = ch.client.take_received().to_vec();
        if let Some((to_ctrl, to_switch)) = &mut ch.tls {
            up = to_ctrl.push(&up);
            down = to_switch.push(&down);
        }
        if !up.is_empty() {
            ch.to_ctrl.push(&up);
        }
        if !down.is_empty() {
            ch.to_switch.push(&down);
        }
        while let Ok(Some(m)) = ch.to_ctrl.next_message() {
            out.push(Arrival { to: Side::Controller, protocol: ch.protocol, label: None, data: m });
        }
        while let Ok(Some(m)) = ch.to_switch.next_message() {
            out.push(Arrival { to: Side::Switch, protocol: ch.protocol, label: None, data: m });
        }
    }
}

impl Southbound for TcpPath {
    fn kind(&self) -> TransportKind {
        TransportKind::Tcp
    }

    fn start(&mut self, now: Instant) {
        for ch in &mut self.channels {
            ch.client.connect();
        }
        self.pump(now);
    }

    fn is_ready(&self) -> bool {
        self.channels.iter().all(|c| c.client.is_established() && c.server.is_established())
    }

    fn send(&mut self, now: Instant, from: Side, msg: &ControlMessage) {
        let Some(ch) = self.channels.iter_mut().find(|c| c.protocol == msg.protocol) else { return };
        let ep = match from {
            Side::Switch => &mut ch.client,
            Side::Controller => &mut ch.server,
        };
        if ep.is_established() {
            if ch.tls.is_some() {
                ep.write(&seal_records(&msg.payload));
            } else {
                ep.write(&msg.payload);
            }
        } else {
            self.undeliverable += 1;
        }
        self.pump(now);
    }

    fn poll_deadline(&mut self) -> Option<Instant> {
        let timers = self.channels.iter().flat_map(|c| [c.client.poll_timeout(), c.server.poll_timeout()]);
        timers.chain([self.link.next_arrival()]).flatten().min()
    }

    fn advance(&mut self, now: Instant) -> Vec<Arrival> {
        let mut out = Vec::new();
        while let Some(pkt) = self.link.pop_due(now) {
            let Body::Tcp(seg) = pkt.body else { continue };
            if let Some(ch) = self.channels.iter_mut().find(|c| c.ctrl_addr == pkt.dst && c.switch_addr == pkt.src) {
                ch.server.on_segment(now, seg);
            } else if let Some(ch) = self.channels.iter_mut().find(|c| c.switch_addr == pkt.dst && c.ctrl_addr == pkt.src)
            {
                ch.client.on_segment(now, seg);
            }
            self.pump(now);
        }
        for ch in &mut self.channels {
            ch.client.handle_timeout(now);
            ch.server.handle_timeout(now);
            Self::collect(ch, &mut out);
        }
        self.pump(now);
        out
    }

    fn path_down(&mut self, _now: Instant) {
        for ch in &mut self.channels {
            self.link.set_down(ch.switch_addr, true);
            ch.client.abort();
            ch.server.abort();
        }
    }

    fn path_up(&mut self, now: Instant) {
        self.reconnects += 1;
        let iss = (self.reconnects as u32).wrapping_mul(0x9e37_79b9);
        for i in 0..self.channels.len() {
            let protocol = self.channels[i].protocol;
            let mut ch = Channel::new(protocol, self.params, self.next_port, iss.wrapping_add(i as u32), self.tls);
            self.next_port += 1;
            ch.client.connect();
            self.channels[i] = ch;
        }
        self.pump(now);
    }

    fn link(&self) -> &Link {
        &self.link
    }

    fn link_mut(&mut self) -> &mut Link {
        &mut self.link
    }

    fn stats(&self) -> PathStats {
        PathStats { undeliverable: self.undeliverable, reconnects: self.reconnects, stream_frames: None }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Codec;
    use std::time::Duration;

    #[test]
    fn records_round_trip_in_pieces() {
        let data: Vec<u8> = (0..40_000u32).map(|i| i as u8).collect();
        let sealed = seal_records(&data);
        assert_eq!(sealed.len(), data.len() + 3 * TLS_RECORD_OVERHEAD);
        let mut r = RecordReader::default();
        let mut out = Vec::new();
        for chunk in sealed.chunks(1000) {
            out.extend(r.push(chunk));
        }
        assert_eq!(out, data);
        assert_eq!(seal_records(&[1; 8]).len(), 30);
    }

    fn exchange(path: &mut dyn Southbound, start: Instant) -> Vec<Arrival> {
        let mut now = start;
        path.start(now);
        while !path.is_ready() {
            now = path.poll_deadline().expect("handshake progresses");
            path.advance(now);
        }
        // The switch speaks first on each protocol, which binds its stream.
        path.send(now, Side::Switch, &Codec::default().hello(1));
        path.send(now, Side::Switch, &crate::endpoints::switch::ovsdb_echo_request());
        let mut got = Vec::new();
        let settle = now + Duration::from_millis(50);
        while let Some(t) = path.poll_deadline().filter(|t| *t <= settle) {
            now = now.max(t);
            got.extend(path.advance(now));
        }
        let fm = Codec::default().synth_flow_mod(1, 1, 7).unwrap();
        path.send(now, Side::Controller, &fm);
        let end = now + Duration::from_secs(1);
        while let Some(t) = path.poll_deadline().filter(|t| *t <= end) {
            now = now.max(t);
            got.extend(path.advance(now));
        }
        got
    }

    #[test]
    fn both_paths_deliver_to_the_right_side() {
        let cfg = PathConfig::default();
        for tls in [false, true] {
            let cfg = PathConfig { tcp_tls: tls, ..cfg.clone() };
            for kind in [TransportKind::Tcp, TransportKind::Quic] {
                let t0 = Instant::now();
                let mut path = build_path(kind, &cfg, t0);
                let got = exchange(path.as_mut(), t0);
                assert_eq!(got.len(), 3, "{kind} tls={tls}: {:?}", got.iter().map(|a| (a.to, a.protocol, a.data.len())).collect::<Vec<_>>());
                assert!(got.iter().any(|a| a.to == Side::Switch && a.protocol == Protocol::OpenFlow && a.data.len() == 80));
                assert!(got.iter().any(|a| a.to == Side::Controller && a.protocol == Protocol::Ovsdb));
            }
        }
    }

    #[test]
    fn tcp_path_reconnects_on_new_ports() {
        let t0 = Instant::now();
        let mut path = TcpPath::new(&PathConfig::default(), t0);
        exchange(&mut path, t0);
        let before = path.switch_addrs();
        path.path_down(t0);
        assert!(!path.is_ready());
        path.path_up(t0);
        while !path.is_ready() {
            let now = path.poll_deadline().unwrap();
            path.advance(now);
        }
        let after = path.switch_addrs();
        assert!(before.iter().all(|a| !after.contains(a)));
        assert_eq!(path.stats().reconnects, 1);
    }
}
