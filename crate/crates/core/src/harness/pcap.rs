//! Classic pcap files, synthetic IPv4 framing and capture analysis.

use std::collections::HashSet;
use std::io::Write;
use std::net::{IpAddr, Ipv4Addr, SocketAddr, SocketAddrV4};
use std::time::Duration;

use crate::transport::{split_datagram, PacketKind};

pub const LINKTYPE_ETHERNET: u32 = 1;
pub const LINKTYPE_RAW: u32 = 101;
pub const LINKTYPE_IPV4: u32 = 228;

const MAGIC_US: u32 = 0xa1b2_c3d4;
const MAGIC_NS: u32 = 0xa1b2_3c4d;
pub const IPV4_HEADER_LEN: usize = 20;
pub const UDP_HEADER_LEN: usize = 8;
pub const IPPROTO_TCP: u8 = 6;
pub const IPPROTO_UDP: u8 = 17;

#[derive(Debug, thiserror::Error)]
pub enum CaptureError {
    #[error("unsupported link type {0}")]
    UnsupportedLinkType(u32),
    #[error("capture contains no matching packets")]
    EmptyCapture,
    #[error("not a pcap file")]
    BadMagic,
    #[error("truncated capture")]
    Truncated,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Writes a little-endian microsecond pcap stream.
pub struct PcapWriter<W: Write> {
    out: W,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(mut out: W, linktype: u32) -> std::io::Result<Self> {
        out.write_all(&MAGIC_US.to_le_bytes())?;
        out.write_all(&2u16.to_le_bytes())?;
        out.write_all(&4u16.to_le_bytes())?;
        out.write_all(&0i32.to_le_bytes())?;
        out.write_all(&0u32.to_le_bytes())?;
        out.write_all(&65535u32.to_le_bytes())?;
        out.write_all(&linktype.to_le_bytes())?;
        Ok(Self { out })
    }

    pub fn write_packet(&mut self, ts: Duration, data: &[u8]) -> std::io::Result<()> {
        let len = data.len() as u32;
        self.out.write_all(&(ts.as_secs() as u32).to_le_bytes())?;
        self.out.write_all(&ts.subsec_micros().to_le_bytes())?;
        self.out.write_all(&len.to_le_bytes())?;
        self.out.write_all(&len.to_le_bytes())?;
        self.out.write_all(data)
    }

    pub fn get_ref(&self) -> &W {
        &self.out
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcapRecord {
    pub ts: Duration,
    pub orig_len: u32,
    pub data: Vec<u8>,
}

/// Parses a whole pcap file in either byte order, with micro- or nanosecond
/// timestamps. Returns the link type and records.
pub fn read_pcap(bytes: &[u8]) -> Result<(u32, Vec<PcapRecord>), CaptureError> {
    let head = bytes.get(..24).ok_or(CaptureError::Truncated)?;
    let raw = u32::from_le_bytes(head[..4].try_into().expect("4 bytes"));
    let (le, nanos) = match raw {
        MAGIC_US => (true, false),
        MAGIC_NS => (true, true),
        m if m.swap_bytes() == MAGIC_US => (false, false),
        m if m.swap_bytes() == MAGIC_NS => (false, true),
        _ => return Err(CaptureError::BadMagic),
    };
    let u32_at = |b: &[u8], at: usize| {
        let v: [u8; 4] = b[at..at + 4].try_into().expect("4 bytes");
        if le {
            u32::from_le_bytes(v)
        } else {
            u32::from_be_bytes(v)
        }
    };
    let linktype = u32_at(head, 20) & 0x0fff_ffff;
    let mut records = Vec::new();
    let mut pos = 24;
    while pos < bytes.len() {
        let rec = bytes.get(pos..pos + 16).ok_or(CaptureError::Truncated)?;
        let (sec, frac, incl, orig) = (u32_at(rec, 0), u32_at(rec, 4), u32_at(rec, 8) as usize, u32_at(rec, 12));
        let data = bytes.get(pos + 16..pos + 16 + incl).ok_or(CaptureError::Truncated)?;
        let ts = Duration::from_secs(sec.into()) + if nanos { Duration::from_nanos(frac.into()) } else { Duration::from_micros(frac.into()) };
        records.push(PcapRecord { ts, orig_len: orig, data: data.to_vec() });
        pos += 16 + incl;
    }
    Ok((linktype, records))
}

fn checksum(header: &[u8]) -> u16 {
    let mut sum: u32 = header.chunks(2).map(|c| u32::from(u16::from_be_bytes([c[0], *c.get(1).unwrap_or(&0)]))).sum();
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

fn v4(addr: SocketAddr) -> SocketAddrV4 {
    match addr {
        SocketAddr::V4(a) => a,
        SocketAddr::V6(a) => SocketAddrV4::new(a.ip().to_ipv4_mapped().unwrap_or(Ipv4Addr::UNSPECIFIED), a.port()),
    }
}

fn ipv4_header(src: Ipv4Addr, dst: Ipv4Addr, proto: u8, payload_len: usize, id: u16) -> [u8; IPV4_HEADER_LEN] {
    let total = (IPV4_HEADER_LEN + payload_len) as u16;
    let mut h = [0u8; IPV4_HEADER_LEN];
    h[0] = 0x45;
    h[2..4].copy_from_slice(&total.to_be_bytes());
    h[4..6].copy_from_slice(&id.to_be_bytes());
    h[6] = 0x40; // don't fragment
    h[8] = 64;
    h[9] = proto;
    h[12..16].copy_from_slice(&src.octets());
    h[16..20].copy_from_slice(&dst.octets());
    let c = checksum(&h);
    h[10..12].copy_from_slice(&c.to_be_bytes());
    h
}

/// IPv4 + UDP around `payload` (UDP checksum left zero).
pub fn ipv4_udp(src: SocketAddr, dst: SocketAddr, payload: &[u8], id: u16) -> Vec<u8> {
    let (s, d) = (v4(src), v4(dst));
    let udp_len = UDP_HEADER_LEN + payload.len();
    let mut out = Vec::with_capacity(IPV4_HEADER_LEN + udp_len);
    out.extend_from_slice(&ipv4_header(*s.ip(), *d.ip(), IPPROTO_UDP, udp_len, id));
    out.extend_from_slice(&s.port().to_be_bytes());
    out.extend_from_slice(&d.port().to_be_bytes());
    out.extend_from_slice(&(udp_len as u16).to_be_bytes());
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(payload);
    out
}

/// Fields of a synthesized TCP header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TcpHeader {
    pub seq: u32,
    pub ack: u32,
    pub flags: u8,
    /// Total header length including options; a multiple of 4 in 20..=60.
    pub len: usize,
}

/// IPv4 + TCP around `payload`; options are NOP padding plus a timestamp
/// option when there is room for it.
pub fn ipv4_tcp(src: SocketAddr, dst: SocketAddr, hdr: TcpHeader, payload: &[u8], id: u16) -> Vec<u8> {
    let (s, d) = (v4(src), v4(dst));
    let tcp_len = hdr.len + payload.len();
    let mut out = Vec::with_capacity(IPV4_HEADER_LEN + tcp_len);
    out.extend_from_slice(&ipv4_header(*s.ip(), *d.ip(), IPPROTO_TCP, tcp_len, id));
    out.extend_from_slice(&s.port().to_be_bytes());
    out.extend_from_slice(&d.port().to_be_bytes());
    out.extend_from_slice(&hdr.seq.to_be_bytes());
    out.extend_from_slice(&hdr.ack.to_be_bytes());
    out.push(((hdr.len / 4) as u8) << 4);
    out.push(hdr.flags);
    out.extend_from_slice(&65535u16.to_be_bytes());
    out.extend_from_slice(&[0, 0, 0, 0]);
    let mut opts = vec![1u8; hdr.len - 20];
    if opts.len() >= 12 {
        let at = opts.len() - 10;
        opts[at] = 8;
        opts[at + 1] = 10;
    }
    out.extend_from_slice(&opts);
    out.extend_from_slice(payload);
    out
}

/// One parsed IPv4 packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IpPacket<'a> {
    pub src: SocketAddr,
    pub dst: SocketAddr,
    pub proto: u8,
    pub ip_len: usize,
    pub transport_header: usize,
    pub payload: &'a [u8],
}

pub fn parse_ipv4(data: &[u8]) -> Option<IpPacket<'_>> {
    if data.len() < IPV4_HEADER_LEN || data[0] >> 4 != 4 {
        return None;
    }
    let ihl = usize::from(data[0] & 0x0f) * 4;
    let total = usize::from(u16::from_be_bytes([data[2], data[3]]));
    let proto = data[9];
    let src_ip = Ipv4Addr::new(data[12], data[13], data[14], data[15]);
    let dst_ip = Ipv4Addr::new(data[16], data[17], data[18], data[19]);
    let body = data.get(ihl..total.min(data.len()))?;
    let (sp, dp, thl) = match proto {
        IPPROTO_UDP if body.len() >= UDP_HEADER_LEN => {
            (u16::from_be_bytes([body[0], body[1]]), u16::from_be_bytes([body[2], body[3]]), UDP_HEADER_LEN)
        }
        IPPROTO_TCP if body.len() >= 20 => {
            let off = usize::from(body[12] >> 4) * 4;
            (u16::from_be_bytes([body[0], body[1]]), u16::from_be_bytes([body[2], body[3]]), off)
        }
        _ => return None,
    };
    let payload = body.get(thl..)?;
    Some(IpPacket {
        src: SocketAddr::new(IpAddr::V4(src_ip), sp),
        dst: SocketAddr::new(IpAddr::V4(dst_ip), dp),
        proto,
        ip_len: total,
        transport_header: thl,
        payload,
    })
}

/// Byte and packet totals for one direction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DirectionTotals {
    pub packets: u64,
    pub wire_bytes: u64,
    pub transport_payload_bytes: u64,
}

impl DirectionTotals {
    fn add(&mut self, p: &IpPacket<'_>) {
        self.packets += 1;
        self.wire_bytes += p.ip_len as u64;
        self.transport_payload_bytes += p.payload.len() as u64;
    }
}

/// What a capture says about the flows that matched the filter.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CaptureSummary {
    pub packets: u64,
    pub wire_bytes: u64,
    pub transport_payload_bytes: u64,
    pub tcp_packets: u64,
    pub udp_packets: u64,
    /// QUIC packets by header form, from the cleartext first byte.
    pub quic_long_packets: u64,
    pub quic_short_packets: u64,
    /// Traffic leaving the first filter endpoint, and the rest.
    pub forward: DirectionTotals,
    pub reverse: DirectionTotals,
    pub first_ts: Option<Duration>,
    pub last_ts: Option<Duration>,
}

/// Endpoints to keep. A packet matches when both its source and destination
/// are listed (by address and port); an empty filter keeps everything.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlowFilter {
    endpoints: Vec<SocketAddr>,
}

impl FlowFilter {
    pub fn new(endpoints: Vec<SocketAddr>) -> Self {
        Self { endpoints }
    }

    pub fn any() -> Self {
        Self::default()
    }

    /// Parses `a:p,b:p`.
    pub fn parse(text: &str) -> Result<Self, std::net::AddrParseError> {
        let endpoints = text.split(',').filter(|s| !s.is_empty()).map(|s| s.trim().parse()).collect::<Result<_, _>>()?;
        Ok(Self { endpoints })
    }

    fn matches(&self, p: &IpPacket<'_>) -> bool {
        if self.endpoints.is_empty() {
            return true;
        }
        let set: HashSet<&SocketAddr> = self.endpoints.iter().collect();
        let hit = |a: &SocketAddr| set.contains(a) || set.iter().any(|e| e.port() == 0 && e.ip() == a.ip());
        hit(&p.src) && hit(&p.dst)
    }

    fn is_forward(&self, p: &IpPacket<'_>) -> bool {
        self.endpoints.first().is_none_or(|e| *e == p.src || (e.port() == 0 && e.ip() == p.src.ip()))
    }
}

/// Sums IP datagram lengths and transport payload lengths for matching
/// packets. Supports Ethernet and raw IPv4 link types.
pub fn analyze_capture(bytes: &[u8], filter: &FlowFilter) -> Result<CaptureSummary, CaptureError> {
    let (linktype, records) = read_pcap(bytes)?;
    let skip = match linktype {
        LINKTYPE_ETHERNET => 14,
        LINKTYPE_RAW | LINKTYPE_IPV4 => 0,
        other => return Err(CaptureError::UnsupportedLinkType(other)),
    };
    let mut s = CaptureSummary::default();
    for rec in &records {
        if skip > 0 && rec.data.get(12..14) != Some(&[0x08, 0x00]) {
            continue;
        }
        let Some(p) = rec.data.get(skip..).and_then(parse_ipv4) else { continue };
        if !filter.matches(&p) {
            continue;
        }
        s.packets += 1;
        s.wire_bytes += p.ip_len as u64;
        s.transport_payload_bytes += p.payload.len() as u64;
        if filter.is_forward(&p) {
            s.forward.add(&p);
        } else {
            s.reverse.add(&p);
        }
        s.first_ts.get_or_insert(rec.ts);
        s.last_ts = Some(rec.ts);
        match p.proto {
            IPPROTO_TCP => s.tcp_packets += 1,
            _ => {
                s.udp_packets += 1;
                if let Ok(spans) = split_datagram(p.payload) {
                    for span in spans {
                        if span.kind == PacketKind::Short {
                            s.quic_short_packets += 1;
                        } else {
                            s.quic_long_packets += 1;
                        }
                    }
                }
            }
        }
    }
    if s.packets == 0 {
        return Err(CaptureError::EmptyCapture);
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn addr(s: &str) -> SocketAddr {
        s.parse().unwrap()
    }

    #[test]
    fn ip_checksum_validates() {
        let pkt = ipv4_udp(addr("10.0.0.1:5000"), addr("10.0.0.2:4433"), &[1, 2, 3], 7);
        assert_eq!(checksum(&pkt[..20]), 0);
        assert_eq!(pkt.len(), 31);
        assert_eq!(u16::from_be_bytes([pkt[2], pkt[3]]), 31);
    }

    #[test]
    fn round_trip_through_file_format() {
        let a = addr("10.0.0.1:40000");
        let b = addr("10.0.0.2:6653");
        let mut w = PcapWriter::new(Vec::new(), LINKTYPE_RAW).unwrap();
        let seg = ipv4_tcp(a, b, TcpHeader { seq: 1, ack: 2, flags: 0x18, len: 32 }, &[9; 100], 1);
        assert_eq!(seg.len(), 152);
        w.write_packet(Duration::from_millis(1500), &seg).unwrap();
        let ack = ipv4_tcp(b, a, TcpHeader { seq: 2, ack: 101, flags: 0x10, len: 32 }, &[], 2);
        w.write_packet(Duration::from_millis(1501), &ack).unwrap();
        let bytes = w.into_inner();
        let (lt, recs) = read_pcap(&bytes).unwrap();
        assert_eq!(lt, LINKTYPE_RAW);
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].ts, Duration::from_millis(1500));
        let s = analyze_capture(&bytes, &FlowFilter::new(vec![a, b])).unwrap();
        assert_eq!(s.wire_bytes, 152 + 52);
        assert_eq!(s.transport_payload_bytes, 100);
        assert_eq!(s.forward.packets, 1);
        assert_eq!(s.reverse.wire_bytes, 52);
        assert_eq!(s.tcp_packets, 2);
    }

    #[test]
    fn big_endian_and_ethernet_captures() {
        let a = addr("10.0.0.1:1");
        let b = addr("10.0.0.2:2");
        let ip = ipv4_udp(a, b, &[0x41, 0, 0, 0], 1);
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC_US.to_be_bytes());
        bytes.extend_from_slice(&2u16.to_be_bytes());
        bytes.extend_from_slice(&4u16.to_be_bytes());
        bytes.extend_from_slice(&[0; 8]);
        bytes.extend_from_slice(&65535u32.to_be_bytes());
        bytes.extend_from_slice(&LINKTYPE_ETHERNET.to_be_bytes());
        let mut frame = vec![0u8; 12];
        frame.extend_from_slice(&[0x08, 0x00]);
        frame.extend_from_slice(&ip);
        bytes.extend_from_slice(&0u32.to_be_bytes());
        bytes.extend_from_slice(&0u32.to_be_bytes());
        bytes.extend_from_slice(&(frame.len() as u32).to_be_bytes());
        bytes.extend_from_slice(&(frame.len() as u32).to_be_bytes());
        bytes.extend_from_slice(&frame);
        let s = analyze_capture(&bytes, &FlowFilter::any()).unwrap();
        assert_eq!(s.wire_bytes, 32);
        assert_eq!(s.quic_short_packets, 1);
    }

    #[test]
    fn errors() {
        let w = PcapWriter::new(Vec::new(), LINKTYPE_RAW).unwrap();
        assert!(matches!(analyze_capture(&w.into_inner(), &FlowFilter::any()), Err(CaptureError::EmptyCapture)));
        let w = PcapWriter::new(Vec::new(), 113).unwrap();
        assert!(matches!(analyze_capture(&w.into_inner(), &FlowFilter::any()), Err(CaptureError::UnsupportedLinkType(113))));
        assert!(matches!(read_pcap(&[0u8; 24]), Err(CaptureError::BadMagic)));
        let mut w = PcapWriter::new(Vec::new(), LINKTYPE_RAW).unwrap();
        w.write_packet(Duration::ZERO, &ipv4_udp(addr("1.1.1.1:1"), addr("2.2.2.2:2"), &[], 0)).unwrap();
        let only = FlowFilter::parse("3.3.3.3:3,2.2.2.2:2").unwrap();
        assert!(matches!(analyze_capture(&w.into_inner(), &only), Err(CaptureError::EmptyCapture)));
    }
}
