//! Virtual-time link between the switch host and the controller host, with
//! a capture tap at the sender side.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::net::SocketAddr;
use std::time::{Duration, Instant};

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::pcap::{ipv4_tcp, ipv4_udp, PcapWriter, TcpHeader, IPV4_HEADER_LEN, LINKTYPE_RAW, UDP_HEADER_LEN};
use super::tcp::TcpSegment;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LinkConfig {
    /// One-way propagation delay.
    pub delay: Duration,
    /// Extra delay drawn uniformly from `0..jitter`; per-flow order is kept.
    pub jitter: Duration,
    /// Serialization rate per sending host; `None` means unlimited.
    pub bandwidth_bps: Option<u64>,
    pub loss: f64,
    pub mtu: usize,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self { delay: Duration::from_millis(1), jitter: Duration::ZERO, bandwidth_bps: None, loss: 0.0, mtu: 1500 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    Udp(Bytes),
    Tcp(TcpSegment),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub src: SocketAddr,
    pub dst: SocketAddr,
    pub body: Body,
}

impl Packet {
    /// IPv4 total length.
    pub fn ip_len(&self) -> usize {
        IPV4_HEADER_LEN
            + match &self.body {
                Body::Udp(d) => UDP_HEADER_LEN + d.len(),
                Body::Tcp(s) => s.wire_len(),
            }
    }

    pub fn payload_len(&self) -> usize {
        match &self.body {
            Body::Udp(d) => d.len(),
            Body::Tcp(s) => s.payload.len(),
        }
    }
}

/// Running totals kept by the tap from per-packet header arithmetic, so they
/// can be cross-checked against the capture itself.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TapTotals {
    pub packets: u64,
    pub wire_bytes: u64,
    pub transport_payload_bytes: u64,
}

pub struct Tap {
    recording: bool,
    origin: Instant,
    writer: PcapWriter<Vec<u8>>,
    ip_id: u16,
    totals: TapTotals,
}

impl Tap {
    fn new(origin: Instant) -> Self {
        Self {
            recording: false,
            origin,
            writer: PcapWriter::new(Vec::new(), LINKTYPE_RAW).expect("writing to memory"),
            ip_id: 0,
            totals: TapTotals::default(),
        }
    }

    pub fn start(&mut self) {
        self.recording = true;
    }

    pub fn stop(&mut self) {
        self.recording = false;
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn totals(&self) -> TapTotals {
        self.totals
    }

    /// The capture as a pcap file (raw IPv4 link type).
    pub fn pcap(&self) -> &[u8] {
        self.writer.get_ref()
    }

    fn record(&mut self, now: Instant, pkt: &Packet) {
        if !self.recording {
            return;
        }
        self.ip_id = self.ip_id.wrapping_add(1);
        let bytes = match &pkt.body {
            Body::Udp(d) => ipv4_udp(pkt.src, pkt.dst, d, self.ip_id),
            Body::Tcp(s) => {
                let hdr = TcpHeader { seq: s.seq, ack: s.ack, flags: s.flags, len: s.header_len };
                ipv4_tcp(pkt.src, pkt.dst, hdr, &s.payload, self.ip_id)
            }
        };
        self.writer.write_packet(now.saturating_duration_since(self.origin), &bytes).expect("writing to memory");
        self.totals.packets += 1;
        self.totals.wire_bytes += pkt.ip_len() as u64;
        self.totals.transport_payload_bytes += pkt.payload_len() as u64;
    }
}

pub struct Link {
    cfg: LinkConfig,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<(Instant, u64)>>,
    slots: HashMap<u64, Packet>,
    seq: u64,
    last_arrival: HashMap<(SocketAddr, SocketAddr), Instant>,
    busy_until: HashMap<std::net::IpAddr, Instant>,
    down: HashSet<SocketAddr>,
    dropped: u64,
    tap: Tap,
}

impl Link {
    pub fn new(cfg: LinkConfig, seed: u64, origin: Instant) -> Self {
        Self {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: BinaryHeap::new(),
            slots: HashMap::new(),
            seq: 0,
            last_arrival: HashMap::new(),
            busy_until: HashMap::new(),
            down: HashSet::new(),
            dropped: 0,
            tap: Tap::new(origin),
        }
    }

    pub fn config(&self) -> &LinkConfig {
        &self.cfg
    }

    pub fn tap(&self) -> &Tap {
        &self.tap
    }

    pub fn tap_mut(&mut self) -> &mut Tap {
        &mut self.tap
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    /// Packets from or to `addr` vanish while it is down. Outbound ones never
    /// reach the tap.
    pub fn set_down(&mut self, addr: SocketAddr, down: bool) {
        if down {
            self.down.insert(addr);
        } else {
            self.down.remove(&addr);
        }
    }

    pub fn send(&mut self, now: Instant, pkt: Packet) {
        assert!(pkt.ip_len() <= self.cfg.mtu, "{} byte packet exceeds the {} byte MTU", pkt.ip_len(), self.cfg.mtu);
        if self.down.contains(&pkt.src) {
            self.dropped += 1;
            return;
        }
        self.tap.record(now, &pkt);
        if self.down.contains(&pkt.dst) || (self.cfg.loss > 0.0 && self.rng.random_bool(self.cfg.loss)) {
            self.dropped += 1;
            return;
        }
        let mut depart = now;
        if let Some(bps) = self.cfg.bandwidth_bps {
            let busy = self.busy_until.entry(pkt.src.ip()).or_insert(now);
            let start = (*busy).max(now);
            *busy = start + Duration::from_nanos(pkt.ip_len() as u64 * 8 * 1_000_000_000 / bps.max(1));
            depart = *busy;
        }
        let mut arrival = depart + self.cfg.delay;
        if !self.cfg.jitter.is_zero() {
            arrival += self.cfg.jitter.mul_f64(self.rng.random::<f64>());
        }
        let last = self.last_arrival.entry((pkt.src, pkt.dst)).or_insert(arrival);
        arrival = arrival.max(*last);
        *last = arrival;
        self.seq += 1;
        self.slots.insert(self.seq, pkt);
        self.queue.push(Reverse((arrival, self.seq)));
    }

    pub fn next_arrival(&self) -> Option<Instant> {
        self.queue.peek().map(|Reverse((t, _))| *t)
    }

    pub fn pop_due(&mut self, now: Instant) -> Option<Packet> {
        match self.queue.peek() {
            Some(Reverse((t, _))) if *t <= now => {
                let Reverse((_, id)) = self.queue.pop().expect("peeked");
                let pkt = self.slots.remove(&id).expect("slot for queued packet");
                if self.down.contains(&pkt.dst) || self.down.contains(&pkt.src) {
                    self.dropped += 1;
                    return self.pop_due(now);
                }
                Some(pkt)
            }
            _ => None,
        }
    }
}
