//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::time::{Duration, Instant};

use bytes::Bytes;
use quicsb::codec::{ovsdb_message, Codec, ControlMessage, Protocol};
use quicsb::harness::pcap::{parse_ipv4, read_pcap};
use quicsb::harness::sim::LinkConfig;
use quicsb::harness::southbound::{Arrival, PathConfig, QuicPath, Side, Southbound, AGENT_PORT, CONTROLLER_HOST};
use quicsb::transport::split_datagram;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Advances `path` through every event in the next `span`.
pub fn drive(path: &mut dyn Southbound, now: &mut Instant, span: Duration) -> Vec<Arrival> {
    let until = *now + span;
    let mut out = Vec::new();
    while let Some(t) = path.poll_deadline().filter(|t| *t <= until) {
        *now = (*now).max(t);
        out.extend(path.advance(*now));
    }
    *now = (*now).max(until);
    out.extend(path.advance(*now));
    out
}

/// Starts `path` and waits until both channels are up.
pub fn connect(path: &mut dyn Southbound, now: &mut Instant) {
    path.start(*now);
    let limit = *now + Duration::from_secs(10);
    while !path.is_ready() {
        let t = path.poll_deadline().expect("connection attempt in progress");
        assert!(t <= limit, "path did not come up");
        *now = (*now).max(t);
        path.advance(*now);
    }
}

/// An OpenFlow or OVSDB message whose content encodes `seq`.
pub fn tagged_message(rng: &mut ChaCha8Rng, protocol: Protocol, seq: u32) -> ControlMessage {
    match protocol {
        Protocol::OpenFlow => {
            let body: Vec<u8> = (0..rng.random_range(0..1200)).map(|_| rng.random()).collect();
            Codec::default().encode_openflow(rng.random_range(0..30), seq, &body).expect("body within limit")
        }
        Protocol::Ovsdb => {
            let pad = "x".repeat(rng.random_range(0..1500));
            ovsdb_message(&serde_json::json!({"method": "echo", "params": [pad], "id": seq}))
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// What the capture shows about one connection's start.
#[derive(Debug, Clone, Copy)]
pub struct EarlyData {
    /// First client datagram carrying a 0-RTT or 1-RTT packet.
    pub first_client_app: Option<Duration>,
    /// First datagram from the server.
    pub first_server_reply: Option<Duration>,
    pub resumed: bool,
}

impl EarlyData {
    pub fn app_before_reply(&self) -> bool {
        match (self.first_client_app, self.first_server_reply) {
            (Some(a), Some(r)) => a < r,
            (Some(_), None) => true,
            _ => false,
        }
    }
}

/// Connects over a path with round-trip time `rtt`, with a switch message
/// offered before the handshake starts, and reports when the first
/// application byte left the client.
pub fn observe_connection(session_file: &Path, rtt: Duration, seed: u64) -> EarlyData {
    let cfg = PathConfig {
        link: LinkConfig { delay: rtt / 2, ..Default::default() },
        seed,
        session_file: Some(session_file.to_path_buf()),
        ..Default::default()
    };
    let t0 = Instant::now();
    let mut now = t0;
    let mut path = QuicPath::new(&cfg, t0);
    path.link_mut().tap_mut().start();
    let hello = Codec::default().hello(1);
    path.send(now, Side::Switch, &hello);
    path.start(now);
    let mut got = Vec::new();
    let limit = t0 + Duration::from_secs(5);
    while got.is_empty() && now < limit {
        let step = Duration::from_millis(5);
        got.extend(drive(&mut path, &mut now, step).into_iter().filter(|a| a.to == Side::Controller));
    }
    assert_eq!(got.first().map(|a| &a.data), Some(&hello.payload), "early message not delivered");
    // Leave time for the session ticket to arrive and be saved.
    drive(&mut path, &mut now, Duration::from_millis(500));
    let resumed = path.client().quic().is_zero_rtt()
        || path.events().iter().any(|(_, e)| matches!(e, quicsb::transport::TransportEvent::Connected { resumed: true }));

    let server: SocketAddr = SocketAddr::new(CONTROLLER_HOST, AGENT_PORT);
    let (_, records) = read_pcap(path.link().tap().pcap()).expect("tap capture parses");
    let mut first_client_app = None;
    let mut first_server_reply = None;
    for r in &records {
        let ip = parse_ipv4(&r.data).expect("raw ipv4 record");
        if ip.src == server {
            first_server_reply.get_or_insert(r.ts);
        } else if split_datagram(ip.payload).expect("quic datagram").iter().any(|s| s.kind.carries_app_data()) {
            first_client_app.get_or_insert(r.ts);
        }
    }
    EarlyData { first_client_app, first_server_reply, resumed }
}

pub type Streams = HashMap<(Side, Protocol), Vec<Bytes>>;

/// Sends `n` random messages in both directions and returns what was sent
/// and what arrived, keyed by receiving side and protocol.
pub fn exchange(path: &mut dyn Southbound, n: u32, seed: u64) -> (Streams, Streams, Vec<(Protocol, Option<u64>)>) {
    let mut rng = rng(seed);
    let mut now = Instant::now();
    connect(path, &mut now);
    let mut sent = Streams::new();
    let mut got = Vec::new();
    // The switch opens both protocols so the controller side has streams.
    for p in [Protocol::OpenFlow, Protocol::Ovsdb] {
        let m = tagged_message(&mut rng, p, u32::MAX);
        path.send(now, Side::Switch, &m);
        sent.entry((Side::Controller, p)).or_default().push(m.payload);
    }
    got.extend(drive(path, &mut now, Duration::from_millis(20)));
    for seq in 0..n {
        let protocol = if rng.random_bool(0.5) { Protocol::OpenFlow } else { Protocol::Ovsdb };
        let from = if rng.random_bool(0.5) { Side::Switch } else { Side::Controller };
        let to = if from == Side::Switch { Side::Controller } else { Side::Switch };
        let m = tagged_message(&mut rng, protocol, seq);
        path.send(now, from, &m);
        sent.entry((to, protocol)).or_default().push(m.payload);
        if rng.random_bool(0.1) {
            let step = Duration::from_micros(rng.random_range(0..3000));
            got.extend(drive(path, &mut now, step));
        }
    }
    got.extend(drive(path, &mut now, Duration::from_secs(5)));
    let labels = got.iter().map(|a| (a.protocol, a.label.map(|l| l.get()))).collect();
    let mut received = Streams::new();
    for a in got {
        received.entry((a.to, a.protocol)).or_default().push(a.data);
    }
    (sent, received, labels)
}

