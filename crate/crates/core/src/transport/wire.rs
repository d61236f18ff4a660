//! Unprotected QUIC header fields: header form and coalesced-packet walking.

use super::TransportErr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum HeaderForm {
    Long,
    Short,
}

/// Long iff the most significant bit of the first octet is set.
pub fn detect_header(packet: &[u8]) -> Result<HeaderForm, TransportErr> {
    match packet.first() {
        None => Err(TransportErr::Truncated),
        Some(b) if b & 0x80 != 0 => Ok(HeaderForm::Long),
        Some(_) => Ok(HeaderForm::Short),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum PacketKind {
    Initial,
    ZeroRtt,
    Handshake,
    Retry,
    VersionNegotiation,
    Short,
}

impl PacketKind {
    /// Packets that can carry application stream data.
    pub fn carries_app_data(self) -> bool {
        matches!(self, PacketKind::ZeroRtt | PacketKind::Short)
    }
}

/// One packet inside a UDP datagram.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PacketSpan {
    pub kind: PacketKind,
    pub offset: usize,
    pub len: usize,
}

fn varint(buf: &[u8], pos: &mut usize) -> Option<u64> {
    let first = *buf.get(*pos)?;
    let len = 1usize << (first >> 6);
    let bytes = buf.get(*pos..*pos + len)?;
    let mut v = u64::from(first & 0x3f);
    for b in &bytes[1..] {
        v = (v << 8) | u64::from(*b);
    }
    *pos += len;
    Some(v)
}

/// Splits a datagram into its coalesced packets using only cleartext header fields.
pub fn split_datagram(datagram: &[u8]) -> Result<Vec<PacketSpan>, TransportErr> {
    let mut out = Vec::new();
    let mut offset = 0;
    while offset < datagram.len() {
        let pkt = &datagram[offset..];
        if detect_header(pkt)? == HeaderForm::Short {
            out.push(PacketSpan { kind: PacketKind::Short, offset, len: pkt.len() });
            break;
        }
        let mut pos = 1;
        let version = pkt.get(1..5).ok_or(TransportErr::Truncated)?;
        pos += 4;
        let dcid_len = usize::from(*pkt.get(pos).ok_or(TransportErr::Truncated)?);
        pos += 1 + dcid_len;
        let scid_len = usize::from(*pkt.get(pos).ok_or(TransportErr::Truncated)?);
        pos += 1 + scid_len;
        if pos > pkt.len() {
            return Err(TransportErr::Truncated);
        }
        if version == [0, 0, 0, 0] {
            out.push(PacketSpan { kind: PacketKind::VersionNegotiation, offset, len: pkt.len() });
            break;
        }
        let kind = match (pkt[0] >> 4) & 0x03 {
            0 => PacketKind::Initial,
            1 => PacketKind::ZeroRtt,
            2 => PacketKind::Handshake,
            _ => PacketKind::Retry,
        };
        if kind == PacketKind::Retry {
            out.push(PacketSpan { kind, offset, len: pkt.len() });
            break;
        }
        if kind == PacketKind::Initial {
            let token_len = varint(pkt, &mut pos).ok_or(TransportErr::Truncated)? as usize;
            pos += token_len;
        }
        let length = varint(pkt, &mut pos).ok_or(TransportErr::Truncated)? as usize;
        let len = pos + length;
        if len > pkt.len() {
            return Err(TransportErr::Truncated);
        }
        out.push(PacketSpan { kind, offset, len });
        offset += len;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_form_bit() {
        assert_eq!(detect_header(&[0xc0]).unwrap(), HeaderForm::Long);
        assert_eq!(detect_header(&[0x40]).unwrap(), HeaderForm::Short);
        assert_eq!(detect_header(&[0x80]).unwrap(), HeaderForm::Long);
        assert_eq!(detect_header(&[0x7f, 0xff]).unwrap(), HeaderForm::Short);
        assert!(matches!(detect_header(&[]), Err(TransportErr::Truncated)));
    }

    fn long(ty: u8, extra: &[u8], body_len: usize) -> Vec<u8> {
        let mut p = vec![0xc0 | (ty << 4), 0, 0, 0, 1, 2, 0xaa, 0xbb, 1, 0xcc];
        p.extend_from_slice(extra);
        p.push(0x40 | (body_len >> 8) as u8);
        p.push(body_len as u8);
        p.extend(std::iter::repeat(0u8).take(body_len));
        p
    }

    #[test]
    fn walks_coalesced_packets() {
        let mut d = long(0, &[0], 30);
        let first = d.len();
        d.extend(long(1, &[], 20));
        let second = d.len() - first;
        d.extend_from_slice(&[0x41, 1, 2, 3]);
        let spans = split_datagram(&d).unwrap();
        let kinds: Vec<_> = spans.iter().map(|s| s.kind).collect();
        assert_eq!(kinds, vec![PacketKind::Initial, PacketKind::ZeroRtt, PacketKind::Short]);
        assert_eq!(spans[0].len, first);
        assert_eq!(spans[1].len, second);
        assert_eq!(spans[2].len, 4);
        assert!(PacketKind::ZeroRtt.carries_app_data());
        assert!(!PacketKind::Handshake.carries_app_data());
    }

    #[test]
    fn truncated_long_header_errors() {
        let mut d = long(2, &[], 30);
        d.truncate(d.len() - 1);
        assert!(matches!(split_datagram(&d), Err(TransportErr::Truncated)));
        assert!(split_datagram(&[0xc0, 0, 0]).is_err());
    }

    #[test]
    fn arbitrary_input_never_panics() {
        use proptest::prelude::*;
        proptest!(|(bytes in proptest::collection::vec(any::<u8>(), 0..200))| {
            let _ = split_datagram(&bytes);
        });
    }
}
