//! OpenFlow and OVSDB message framing and workload synthesis.
//!
//! OpenFlow messages carry the standard 8-byte big-endian header. OVSDB
//! messages are compact JSON-RPC 1.0 objects with sorted keys, so byte
//! counts are a pure function of the inputs.
//!
//! Synthetic sizes:
//!
//! | message            | bytes                         |
//! |--------------------|-------------------------------|
//! | FLOW_MOD           | `56 + 8*match_fields + 16*actions` |
//! | MULTIPART request  | `16`                          |
//! | MULTIPART reply    | `16 + 104*n_flows` (split at 65535) |

use bytes::{BufMut, Bytes, BytesMut};
use serde_json::{json, Value};

pub const OFP_HEADER_LEN: usize = 8;
pub const OFP_VERSION_1_3: u8 = 0x04;
pub const OFP_MAX_LEN: usize = u16::MAX as usize;

pub const OFPT_HELLO: u8 = 0;
pub const OFPT_ECHO_REQUEST: u8 = 2;
pub const OFPT_ECHO_REPLY: u8 = 3;
pub const OFPT_FLOW_MOD: u8 = 14;
pub const OFPT_MULTIPART_REQUEST: u8 = 18;
pub const OFPT_MULTIPART_REPLY: u8 = 19;
pub const OFPT_BARRIER_REPLY: u8 = 21;

pub const FLOW_MOD_BASE_LEN: usize = 56;
pub const MATCH_FIELD_LEN: usize = 8;
pub const ACTION_LEN: usize = 16;
pub const MULTIPART_HEADER_LEN: usize = 16;
pub const FLOW_STATS_LEN: usize = 104;
pub const OFPMPF_REPLY_MORE: u16 = 1;
const OFPMP_FLOW: u16 = 1;

/// Records that fit one multipart part without overflowing the 16-bit length.
pub const MAX_FLOW_STATS_PER_PART: usize = (OFP_MAX_LEN - MULTIPART_HEADER_LEN) / FLOW_STATS_LEN;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("message of {len} bytes does not fit a 16-bit length field")]
    BodyTooLarge { len: usize },
    #[error("need at least {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("header length field {length} is below the 8-byte header")]
    BadLength { length: u16 },
    #[error("invalid JSON: {0}")]
    InvalidJson(String),
    #[error("JSON value is not a JSON-RPC 1.0 object")]
    NotJsonRpc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    OpenFlow,
    Ovsdb,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::OpenFlow => "openflow",
            Protocol::Ovsdb => "ovsdb",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlMessage {
    pub protocol: Protocol,
    pub payload: Bytes,
    pub xid: Option<u32>,
}

impl ControlMessage {
    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }

    /// Wraps raw bytes received from a daemon, reading the xid for OpenFlow.
    pub fn from_wire(protocol: Protocol, payload: Bytes) -> Result<Self, CodecError> {
        match protocol {
            Protocol::OpenFlow => {
                let hdr = decode_openflow_header(&payload)?;
                Ok(Self { protocol, payload, xid: Some(hdr.xid) })
            }
            Protocol::Ovsdb => {
                parse_ovsdb(&payload)?;
                Ok(Self { protocol, payload, xid: None })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpenFlowHeader {
    pub version: u8,
    pub msg_type: u8,
    pub length: u16,
    pub xid: u32,
}

impl OpenFlowHeader {
    pub fn to_bytes(self) -> [u8; OFP_HEADER_LEN] {
        let mut out = [0u8; OFP_HEADER_LEN];
        out[0] = self.version;
        out[1] = self.msg_type;
        out[2..4].copy_from_slice(&self.length.to_be_bytes());
        out[4..8].copy_from_slice(&self.xid.to_be_bytes());
        out
    }
}

pub fn decode_openflow_header(buf: &[u8]) -> Result<OpenFlowHeader, CodecError> {
    if buf.len() < OFP_HEADER_LEN {
        return Err(CodecError::Truncated { need: OFP_HEADER_LEN, have: buf.len() });
    }
    let length = u16::from_be_bytes([buf[2], buf[3]]);
    if (length as usize) < OFP_HEADER_LEN {
        return Err(CodecError::BadLength { length });
    }
    Ok(OpenFlowHeader {
        version: buf[0],
        msg_type: buf[1],
        length,
        xid: u32::from_be_bytes([buf[4], buf[5], buf[6], buf[7]]),
    })
}

/// Message builder; the only knob is the OpenFlow version byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Codec {
    pub version: u8,
}

impl Default for Codec {
    fn default() -> Self {
        Self { version: OFP_VERSION_1_3 }
    }
}

impl Codec {
    pub fn new(version: u8) -> Self {
        Self { version }
    }

    pub fn encode_openflow(&self, msg_type: u8, xid: u32, body: &[u8]) -> Result<ControlMessage, CodecError> {
        let total = OFP_HEADER_LEN + body.len();
        if total > OFP_MAX_LEN {
            return Err(CodecError::BodyTooLarge { len: total });
        }
        let hdr = OpenFlowHeader { version: self.version, msg_type, length: total as u16, xid };
        let mut buf = BytesMut::with_capacity(total);
        buf.put_slice(&hdr.to_bytes());
        buf.put_slice(body);
        Ok(ControlMessage { protocol: Protocol::OpenFlow, payload: buf.freeze(), xid: Some(xid) })
    }

    /// FLOW_MOD (OFPFC_ADD) with `match_fields` OXM entries and `action_count`
    /// output actions. Size is `56 + 8*match_fields + 16*action_count`.
    pub fn synth_flow_mod(&self, match_fields: usize, action_count: usize, xid: u32) -> Result<ControlMessage, CodecError> {
        let total = flow_mod_len(match_fields, action_count);
        if total > OFP_MAX_LEN {
            return Err(CodecError::BodyTooLarge { len: total });
        }
        let mut body = BytesMut::with_capacity(total - OFP_HEADER_LEN);
        body.put_u64(u64::from(xid)); // cookie
        body.put_u64(u64::MAX); // cookie mask
        body.put_u8(0); // table id
        body.put_u8(0); // OFPFC_ADD
        body.put_u16(0); // idle timeout
        body.put_u16(0); // hard timeout
        body.put_u16(0x8000); // priority
        body.put_u32(0xffff_ffff); // buffer id: none
        body.put_u32(0xffff_ffff); // out port: any
        body.put_u32(0xffff_ffff); // out group: any
        body.put_u16(0); // flags
        body.put_u16(0); // pad
        // ofp_match: type OXM, length excludes padding, padded to 8
        let match_len = 4 + MATCH_FIELD_LEN * match_fields;
        body.put_u16(1);
        body.put_u16(match_len as u16);
        for i in 0..match_fields {
            // OXM_OF_IN_PORT style field: class, field<<1, length 4, value
            body.put_u16(0x8000);
            body.put_u8(((i % 40) as u8) << 1);
            body.put_u8(4);
            body.put_u32(i as u32 + 1);
        }
        body.put_bytes(0, 4); // pad the 4-byte match header to 8
        for i in 0..action_count {
            body.put_u16(0); // OFPAT_OUTPUT
            body.put_u16(ACTION_LEN as u16);
            body.put_u32(i as u32 + 1);
            body.put_u16(0xffff);
            body.put_bytes(0, 6);
        }
        debug_assert_eq!(body.len() + OFP_HEADER_LEN, total);
        self.encode_openflow(OFPT_FLOW_MOD, xid, &body)
    }

    /// Flow-stats MULTIPART_REQUEST: always 16 bytes.
    pub fn synth_multipart_request(&self, xid: u32) -> ControlMessage {
        let mut body = BytesMut::with_capacity(8);
        body.put_u16(OFPMP_FLOW);
        body.put_u16(0);
        body.put_bytes(0, 4);
        self.encode_openflow(OFPT_MULTIPART_REQUEST, xid, &body).expect("fixed size")
    }

    /// Flow-stats MULTIPART_REPLY for `n_flows` records. Replies above 65535
    /// bytes are split record-aligned into parts flagged REPLY_MORE.
    pub fn synth_multipart_reply(&self, n_flows: usize, xid: u32) -> Vec<ControlMessage> {
        let mut parts = Vec::with_capacity(n_flows / MAX_FLOW_STATS_PER_PART + 1);
        let mut remaining = n_flows;
        let mut first = 0usize;
        loop {
            let here = remaining.min(MAX_FLOW_STATS_PER_PART);
            remaining -= here;
            let flags = if remaining > 0 { OFPMPF_REPLY_MORE } else { 0 };
            let mut body = BytesMut::with_capacity(8 + here * FLOW_STATS_LEN);
            body.put_u16(OFPMP_FLOW);
            body.put_u16(flags);
            body.put_bytes(0, 4);
            for i in first..first + here {
                put_flow_stats(&mut body, i);
            }
            parts.push(self.encode_openflow(OFPT_MULTIPART_REPLY, xid, &body).expect("record-aligned part fits"));
            first += here;
            if remaining == 0 {
                return parts;
            }
        }
    }

    pub fn synth_multipart(&self, kind: MultipartKind, n_flows: usize, xid: u32) -> Vec<ControlMessage> {
        match kind {
            MultipartKind::Request => vec![self.synth_multipart_request(xid)],
            MultipartKind::Reply => self.synth_multipart_reply(n_flows, xid),
        }
    }

    pub fn barrier_reply(&self, xid: u32) -> ControlMessage {
        self.encode_openflow(OFPT_BARRIER_REPLY, xid, &[]).expect("empty body")
    }

    pub fn hello(&self, xid: u32) -> ControlMessage {
        self.encode_openflow(OFPT_HELLO, xid, &[]).expect("empty body")
    }

    pub fn echo(&self, request: bool, xid: u32) -> ControlMessage {
        let t = if request { OFPT_ECHO_REQUEST } else { OFPT_ECHO_REPLY };
        self.encode_openflow(t, xid, &[]).expect("empty body")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MultipartKind {
    Request,
    Reply,
}

// 104-byte ofp_flow_stats with an empty (padded) match and one output
// instruction.
fn put_flow_stats(body: &mut BytesMut, i: usize) {
    let start = body.len();
    body.put_u16(FLOW_STATS_LEN as u16);
    body.put_u8(0); // table
    body.put_u8(0); // pad
    body.put_u32(i as u32); // duration sec
    body.put_u32(0); // duration nsec
    body.put_u16(0x8000); // priority
    body.put_u16(0); // idle
    body.put_u16(0); // hard
    body.put_u16(0); // flags
    body.put_bytes(0, 4); // pad
    body.put_u64(i as u64); // cookie
    body.put_u64(i as u64 * 10); // packet count
    body.put_u64(i as u64 * 640); // byte count
    body.put_u16(1); // match type
    body.put_u16(4); // match length
    body.put_bytes(0, 4);
    // apply-actions instruction with one output action
    body.put_u16(4);
    body.put_u16(24);
    body.put_bytes(0, 4);
    body.put_u16(0);
    body.put_u16(ACTION_LEN as u16);
    body.put_u32(i as u32 + 1);
    body.put_u16(0xffff);
    body.put_bytes(0, 6);
    let pad = FLOW_STATS_LEN - (body.len() - start);
    body.put_bytes(0, pad);
}

pub fn flow_mod_len(match_fields: usize, action_count: usize) -> usize {
    FLOW_MOD_BASE_LEN
        .saturating_add(MATCH_FIELD_LEN.saturating_mul(match_fields))
        .saturating_add(ACTION_LEN.saturating_mul(action_count))
}

/// Unsplit reply size: `16 + 104*n_flows`.
pub fn multipart_reply_len(n_flows: usize) -> usize {
    MULTIPART_HEADER_LEN + FLOW_STATS_LEN * n_flows
}

/// Bytes of all parts of a split reply: one 16-byte header per part.
pub fn multipart_reply_total_len(n_flows: usize) -> usize {
    let parts = n_flows.div_ceil(MAX_FLOW_STATS_PER_PART).max(1);
    MULTIPART_HEADER_LEN * parts + FLOW_STATS_LEN * n_flows
}

pub fn encode_openflow(msg_type: u8, xid: u32, body: &[u8]) -> Result<ControlMessage, CodecError> {
    Codec::default().encode_openflow(msg_type, xid, body)
}

pub fn synth_flow_mod(match_fields: usize, action_count: usize, xid: u32) -> Result<ControlMessage, CodecError> {
    Codec::default().synth_flow_mod(match_fields, action_count, xid)
}

pub fn synth_multipart(kind: MultipartKind, n_flows: usize) -> Vec<ControlMessage> {
    Codec::default().synth_multipart(kind, n_flows, 0)
}

/// OVSDB `transact` inserting a linux-htb queue with min/max rates. The
/// JSON-RPC id echoes `queue_id`.
pub fn synth_queue_transact(queue_id: u64, rates: (u64, u64)) -> ControlMessage {
    let (min, max) = rates;
    let value = json!({
        "id": queue_id,
        "method": "transact",
        "params": [
            "Open_vSwitch",
            {
                "op": "insert",
                "table": "Queue",
                "row": {
                    "other_config": ["map", [["max-rate", max.to_string()], ["min-rate", min.to_string()]]],
                    "external_ids": ["map", [["queue-id", queue_id.to_string()]]]
                },
                "uuid-name": format!("queue{queue_id}")
            }
        ]
    });
    ovsdb_message(&value)
}

/// OVSDB `update` notification acknowledging a queue transact.
pub fn synth_queue_update(queue_id: u64, rates: (u64, u64)) -> ControlMessage {
    let (min, max) = rates;
    let value = json!({
        "id": Value::Null,
        "method": "update",
        "params": [
            queue_id,
            {
                "Queue": {
                    format!("queue{queue_id}"): {
                        "new": {
                            "other_config": ["map", [["max-rate", max.to_string()], ["min-rate", min.to_string()]]]
                        }
                    }
                }
            }
        ]
    });
    ovsdb_message(&value)
}

/// Serializes compactly; `serde_json::Map` is ordered by key.
pub fn ovsdb_message(value: &Value) -> ControlMessage {
    let payload = serde_json::to_vec(value).expect("Value always serializes");
    ControlMessage { protocol: Protocol::Ovsdb, payload: Bytes::from(payload), xid: None }
}

/// Parses and checks the JSON-RPC 1.0 shape (request, notification or response).
pub fn parse_ovsdb(buf: &[u8]) -> Result<Value, CodecError> {
    let value: Value = serde_json::from_slice(buf).map_err(|e| CodecError::InvalidJson(e.to_string()))?;
    let obj = value.as_object().ok_or(CodecError::NotJsonRpc)?;
    let request = obj.contains_key("method") && obj.get("params").is_some_and(Value::is_array);
    let response = obj.contains_key("result") && obj.contains_key("error");
    if !obj.contains_key("id") || !(request || response) {
        return Err(CodecError::NotJsonRpc);
    }
    Ok(value)
}

/// Splits a byte stream of OpenFlow messages on header length fields.
#[derive(Debug, Default)]
pub struct OpenFlowFramer {
    buf: BytesMut,
}

impl OpenFlowFramer {
    pub fn push(&mut self, data: &[u8]) {
        self.buf.extend_from_slice(data);
    }

    /// Next complete message, or `Ok(None)` when more bytes are needed.
    pub fn next_message(&mut self) -> Result<Option<Bytes>, CodecError> {
        if self.buf.len() < OFP_HEADER_LEN {
            return Ok(None);
        }
        let hdr = decode_openflow_header(&self.buf)?;
        let len = hdr.length as usize;
        if self.buf.len() < len {
            return Ok(None);
        }
        Ok(Some(self.buf.split_to(len).freeze()))
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

/// Splits a byte stream of concatenated JSON-RPC objects.
#[derive(Debug, Default)]
pub struct OvsdbFramer {
    buf: BytesMut,
}

impl OvsdbFramer {
    pub fn push(&mut self, data: &[u8]) {
        self.buf.extend_from_slice(data);
    }

    pub fn next_message(&mut self) -> Result<Option<Bytes>, CodecError> {
        let lead = self.buf.iter().take_while(|b| b.is_ascii_whitespace()).count();
        let _ = self.buf.split_to(lead);
        if self.buf.is_empty() {
            return Ok(None);
        }
        let mut stream = serde_json::Deserializer::from_slice(&self.buf).into_iter::<serde::de::IgnoredAny>();
        match stream.next() {
            Some(Ok(_)) => {
                let end = stream.byte_offset();
                Ok(Some(self.buf.split_to(end).freeze()))
            }
            Some(Err(e)) if e.is_eof() => Ok(None),
            Some(Err(e)) => Err(CodecError::InvalidJson(e.to_string())),
            None => Ok(None),
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

/// Per-protocol re-delimiter used on the stream side of the agents.
#[derive(Debug)]
pub enum Framer {
    OpenFlow(OpenFlowFramer),
    Ovsdb(OvsdbFramer),
}

impl Framer {
    pub fn new(protocol: Protocol) -> Self {
        match protocol {
            Protocol::OpenFlow => Framer::OpenFlow(OpenFlowFramer::default()),
            Protocol::Ovsdb => Framer::Ovsdb(OvsdbFramer::default()),
        }
    }

    pub fn push(&mut self, data: &[u8]) {
        match self {
            Framer::OpenFlow(f) => f.push(data),
            Framer::Ovsdb(f) => f.push(data),
        }
    }

    pub fn next_message(&mut self) -> Result<Option<Bytes>, CodecError> {
        match self {
            Framer::OpenFlow(f) => f.next_message(),
            Framer::Ovsdb(f) => f.next_message(),
        }
    }

    pub fn buffered(&self) -> usize {
        match self {
            Framer::OpenFlow(f) => f.buffered(),
            Framer::Ovsdb(f) => f.buffered(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Field-by-field reference for the OpenFlow 1.3 header: version,
    // type, length (big-endian u16), xid (big-endian u32).
    fn reference_header(version: u8, t: u8, len: u16, xid: u32) -> Vec<u8> {
        let mut v = vec![version, t];
        v.push((len >> 8) as u8);
        v.push((len & 0xff) as u8);
        for shift in [24, 16, 8, 0] {
            v.push((xid >> shift) as u8);
        }
        v
    }

    #[test]
    fn flow_mod_header_layout() {
        let m = encode_openflow(14, 1, &[0u8; 56]).unwrap();
        assert_eq!(m.len(), 64);
        assert_eq!(&m.payload[..8], reference_header(0x04, 0x0e, 64, 1).as_slice());
        assert_eq!(&m.payload[..8], &[0x04, 0x0e, 0x00, 0x40, 0, 0, 0, 1]);
    }

    #[test]
    fn empty_body() {
        let m = encode_openflow(0, 0, &[]).unwrap();
        assert_eq!(m.len(), 8);
        assert_eq!(decode_openflow_header(&m.payload).unwrap().length, 8);
    }

    #[test]
    fn max_body_round_trips() {
        let body = vec![0xabu8; 65527];
        let m = encode_openflow(18, 7, &body).unwrap();
        let h = decode_openflow_header(&m.payload).unwrap();
        assert_eq!((h.msg_type, h.xid, h.length), (18, 7, 65535));
        assert_eq!(
            encode_openflow(18, 7, &[0u8; 65528]),
            Err(CodecError::BodyTooLarge { len: 65536 })
        );
    }

    #[test]
    fn decode_examples() {
        let h = decode_openflow_header(&[0x04, 0x0e, 0x00, 0x40, 0, 0, 0, 1]).unwrap();
        assert_eq!(h, OpenFlowHeader { version: 4, msg_type: 14, length: 64, xid: 1 });
        let h = decode_openflow_header(&[0x04, 0, 0, 8, 0, 0, 0, 0]).unwrap();
        assert_eq!(h, OpenFlowHeader { version: 4, msg_type: 0, length: 8, xid: 0 });
        assert_eq!(decode_openflow_header(&[0; 7]), Err(CodecError::Truncated { need: 8, have: 7 }));
        assert_eq!(decode_openflow_header(&[4, 0, 0, 7, 0, 0, 0, 0]), Err(CodecError::BadLength { length: 7 }));
    }

    #[test]
    fn version_is_configurable() {
        let m = Codec::new(0x01).encode_openflow(0, 0, &[]).unwrap();
        assert_eq!(m.payload[0], 0x01);
    }

    #[test]
    fn flow_mod_sizes() {
        let m = synth_flow_mod(0, 0, 1).unwrap();
        assert_eq!(m.len(), 56);
        assert_eq!(decode_openflow_header(&m.payload).unwrap().length, 56);
        assert_eq!(synth_flow_mod(2, 1, 2).unwrap().len(), 56 + 16 + 16);
        let a = synth_flow_mod(0, 0, 0).unwrap();
        let b = synth_flow_mod(0, 0, 99).unwrap();
        assert_eq!(a.len(), b.len());
        assert_ne!(a.xid, b.xid);
        assert!(matches!(synth_flow_mod(10_000, 0, 0), Err(CodecError::BodyTooLarge { .. })));
    }

    #[test]
    fn multipart_sizes() {
        let req = synth_multipart(MultipartKind::Request, 0);
        assert_eq!(req.len(), 1);
        assert_eq!(req[0].len(), 16);
        let empty = synth_multipart(MultipartKind::Reply, 0);
        assert_eq!(empty.len(), 1);
        assert_eq!(empty[0].len(), 16);

        assert_eq!(multipart_reply_len(1000), 104_016);
        let parts = synth_multipart(MultipartKind::Reply, 1000);
        assert_eq!(parts.len(), 2);
        let records: usize = parts.iter().map(|p| (p.len() - 16) / 104).sum();
        assert_eq!(records, 1000);
        for (i, p) in parts.iter().enumerate() {
            assert!(p.len() <= 65535);
            let h = decode_openflow_header(&p.payload).unwrap();
            assert_eq!(h.length as usize, p.len());
            let flags = u16::from_be_bytes([p.payload[10], p.payload[11]]);
            assert_eq!(flags == OFPMPF_REPLY_MORE, i + 1 < parts.len());
        }
        for n in [0, 1, 629, 630, 1000, 1258, 1259] {
            let total: usize = synth_multipart(MultipartKind::Reply, n).iter().map(|p| p.len()).sum();
            assert_eq!(multipart_reply_total_len(n), total, "n={n}");
        }
    }

    #[test]
    fn queue_transact_is_deterministic() {
        let a = synth_queue_transact(1, (1000, 2000));
        let b = synth_queue_transact(1, (1000, 2000));
        assert_eq!(a.payload, b.payload);
        let v = parse_ovsdb(&a.payload).unwrap();
        assert_eq!(v["method"], "transact");
        assert_eq!(v["id"], 1);
        let text = std::str::from_utf8(&a.payload).unwrap();
        assert!(!text.contains(' '));
        assert!(text.contains("\"2000\"") && text.contains("\"1000\""));
        parse_ovsdb(&synth_queue_transact(0, (0, 0)).payload).unwrap();
        let u = parse_ovsdb(&synth_queue_update(1, (1000, 2000)).payload).unwrap();
        assert_eq!(u["method"], "update");
    }

    #[test]
    fn keys_are_sorted() {
        let m = synth_queue_transact(3, (1, 2));
        let text = std::str::from_utf8(&m.payload).unwrap();
        let id = text.find("\"id\"").unwrap();
        let method = text.find("\"method\"").unwrap();
        let params = text.find("\"params\"").unwrap();
        assert!(id < method && method < params);
    }

    #[test]
    fn framer_splits_coalesced() {
        let a = synth_flow_mod(1, 1, 1).unwrap();
        let b = encode_openflow(21, 2, &[]).unwrap();
        let mut f = OpenFlowFramer::default();
        let mut joined = a.payload.to_vec();
        joined.extend_from_slice(&b.payload);
        f.push(&joined[..5]);
        assert_eq!(f.next_message().unwrap(), None);
        f.push(&joined[5..]);
        assert_eq!(f.next_message().unwrap().unwrap(), a.payload);
        assert_eq!(f.next_message().unwrap().unwrap(), b.payload);
        assert_eq!(f.next_message().unwrap(), None);
    }

    #[test]
    fn ovsdb_framer_splits() {
        let a = synth_queue_transact(1, (1, 2));
        let b = synth_queue_update(1, (1, 2));
        let mut joined = a.payload.to_vec();
        joined.extend_from_slice(&b.payload);
        let mut f = OvsdbFramer::default();
        f.push(&joined[..10]);
        assert_eq!(f.next_message().unwrap(), None);
        f.push(&joined[10..]);
        assert_eq!(f.next_message().unwrap().unwrap(), a.payload);
        assert_eq!(f.next_message().unwrap().unwrap(), b.payload);
        assert_eq!(f.next_message().unwrap(), None);
        f.push(b"]");
        assert!(f.next_message().is_err());
    }

    #[test]
    fn parse_rejects_non_rpc() {
        assert_eq!(parse_ovsdb(b"[1,2]"), Err(CodecError::NotJsonRpc));
        assert_eq!(parse_ovsdb(b"{\"id\":1}"), Err(CodecError::NotJsonRpc));
        assert!(matches!(parse_ovsdb(b"{"), Err(CodecError::InvalidJson(_))));
        parse_ovsdb(b"{\"error\":null,\"id\":1,\"result\":[]}").unwrap();
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(t in any::<u8>(), x in any::<u32>(), body in proptest::collection::vec(any::<u8>(), 0..2048)) {
            let m = encode_openflow(t, x, &body).unwrap();
            let h = decode_openflow_header(&m.payload).unwrap();
            prop_assert_eq!((h.msg_type, h.xid, h.length as usize), (t, x, 8 + body.len()));
            prop_assert_eq!(&m.payload[8..], body.as_slice());
        }

        #[test]
        fn flow_mod_strictly_monotone(mf in 0usize..500, ac in 0usize..500, xid in any::<u32>()) {
            let base = synth_flow_mod(mf, ac, xid).unwrap();
            prop_assert_eq!(base.len(), flow_mod_len(mf, ac));
            prop_assert!(synth_flow_mod(mf + 1, ac, xid).unwrap().len() > base.len());
            prop_assert!(synth_flow_mod(mf, ac + 1, xid).unwrap().len() > base.len());
            let h = decode_openflow_header(&base.payload).unwrap();
            prop_assert_eq!(h.length as usize, base.len());
        }

        #[test]
        fn multipart_reply_reparses(n in 0usize..3000) {
            let parts = synth_multipart(MultipartKind::Reply, n);
            let again = synth_multipart(MultipartKind::Reply, n);
            prop_assert_eq!(&parts, &again);
            let mut framer = OpenFlowFramer::default();
            for p in &parts {
                framer.push(&p.payload);
            }
            let mut count = 0;
            while let Some(m) = framer.next_message().unwrap() {
                prop_assert_eq!(&m, &parts[count].payload);
                count += 1;
            }
            prop_assert_eq!(count, parts.len());
            let wire: usize = parts.iter().map(ControlMessage::len).sum();
            prop_assert_eq!(wire, multipart_reply_len(n) + 16 * (parts.len() - 1));
        }

        #[test]
        fn transact_round_trip(q in any::<u64>(), lo in any::<u64>(), hi in any::<u64>()) {
            let m = synth_queue_transact(q, (lo, hi));
            let v = parse_ovsdb(&m.payload).unwrap();
            prop_assert_eq!(serde_json::to_vec(&v).unwrap(), m.payload.to_vec());
            prop_assert_eq!(v["id"].as_u64(), Some(q));
            let rates = &v["params"][1]["row"]["other_config"][1];
            prop_assert_eq!(rates[0][1].as_str().unwrap(), hi.to_string());
            prop_assert_eq!(rates[1][1].as_str().unwrap(), lo.to_string());
        }
    }
}
