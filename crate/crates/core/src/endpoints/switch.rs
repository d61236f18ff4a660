//! ovs-switchd and ovsdb-server stand-in.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use crate::codec::{
    decode_openflow_header, ovsdb_message, parse_ovsdb, synth_queue_update, Codec, ControlMessage, Protocol,
    OFPT_ECHO_REPLY, OFPT_ECHO_REQUEST, OFPT_FLOW_MOD, OFPT_HELLO, OFPT_MULTIPART_REQUEST, OFP_VERSION_1_3,
};

pub const DEFAULT_PROBE_INTERVAL: Duration = Duration::from_secs(5);

#[derive(Debug, Clone)]
pub struct SwitchConfig {
    /// Inactivity probe period on both channels; `None` disables probes.
    pub probe_interval: Option<Duration>,
    pub initial_flows: usize,
    pub version: u8,
}

impl Default for SwitchConfig {
    fn default() -> Self {
        Self { probe_interval: Some(DEFAULT_PROBE_INTERVAL), initial_flows: 0, version: OFP_VERSION_1_3 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SwitchCounters {
    pub flow_mods: u64,
    pub stats_requests: u64,
    pub transacts: u64,
    pub echo_requests: u64,
    pub echo_replies: u64,
    pub hellos: u64,
    pub ignored: u64,
}

pub fn ovsdb_echo_request() -> ControlMessage {
    ovsdb_message(&json!({"id": "echo", "method": "echo", "params": []}))
}

pub fn ovsdb_echo_reply(id: &Value) -> ControlMessage {
    ovsdb_message(&json!({"error": null, "id": id, "result": []}))
}

#[derive(Debug)]
pub struct Switch {
    cfg: SwitchConfig,
    codec: Codec,
    flows: usize,
    queues: BTreeMap<u64, (u64, u64)>,
    next_xid: u32,
    next_probe: Option<Instant>,
    counters: SwitchCounters,
}

impl Switch {
    pub fn new(cfg: SwitchConfig) -> Self {
        Self {
            codec: Codec::new(cfg.version),
            flows: cfg.initial_flows,
            cfg,
            queues: BTreeMap::new(),
            next_xid: 1,
            next_probe: None,
            counters: SwitchCounters::default(),
        }
    }

    /// Messages sent when a channel becomes ACTIVE.
    pub fn hello(&mut self, protocol: Protocol) -> ControlMessage {
        match protocol {
            Protocol::OpenFlow => {
                let xid = self.xid();
                self.codec.hello(xid)
            }
            Protocol::Ovsdb => ovsdb_echo_request(),
        }
    }

    pub fn flow_table_size(&self) -> usize {
        self.flows
    }

    pub fn queues(&self) -> &BTreeMap<u64, (u64, u64)> {
        &self.queues
    }

    pub fn counters(&self) -> SwitchCounters {
        self.counters
    }

    pub fn start_probes(&mut self, now: Instant) {
        self.next_probe = self.cfg.probe_interval.map(|p| now + p);
    }

    pub fn next_probe(&self) -> Option<Instant> {
        self.next_probe
    }

    /// Echo requests on both channels when the probe timer has fired.
    pub fn poll_probe(&mut self, now: Instant) -> Vec<ControlMessage> {
        match (self.next_probe, self.cfg.probe_interval) {
            (Some(t), Some(p)) if t <= now => {
                self.next_probe = Some(t + p);
                let xid = self.xid();
                vec![self.codec.echo(true, xid), ovsdb_echo_request()]
            }
            _ => Vec::new(),
        }
    }

    /// Raw bytes from a channel; unparseable input is counted and ignored.
    pub fn handle_bytes(&mut self, protocol: Protocol, data: bytes::Bytes) -> Vec<ControlMessage> {
        match ControlMessage::from_wire(protocol, data) {
            Ok(m) => self.handle(&m),
            Err(_) => {
                self.counters.ignored += 1;
                Vec::new()
            }
        }
    }

    pub fn handle(&mut self, msg: &ControlMessage) -> Vec<ControlMessage> {
        match msg.protocol {
            Protocol::OpenFlow => self.handle_openflow(msg),
            Protocol::Ovsdb => self.handle_ovsdb(msg),
        }
    }

    fn handle_openflow(&mut self, msg: &ControlMessage) -> Vec<ControlMessage> {
        let Ok(hdr) = decode_openflow_header(&msg.payload) else {
            self.counters.ignored += 1;
            return Vec::new();
        };
        match hdr.msg_type {
            OFPT_FLOW_MOD => {
                self.counters.flow_mods += 1;
                self.flows += 1;
                vec![self.codec.barrier_reply(hdr.xid)]
            }
            OFPT_MULTIPART_REQUEST => {
                self.counters.stats_requests += 1;
                self.codec.synth_multipart_reply(self.flows, hdr.xid)
            }
            OFPT_ECHO_REQUEST => {
                self.counters.echo_requests += 1;
                vec![self.codec.echo(false, hdr.xid)]
            }
            OFPT_ECHO_REPLY => {
                self.counters.echo_replies += 1;
                Vec::new()
            }
            OFPT_HELLO => {
                self.counters.hellos += 1;
                Vec::new()
            }
            _ => {
                self.counters.ignored += 1;
                Vec::new()
            }
        }
    }

    fn handle_ovsdb(&mut self, msg: &ControlMessage) -> Vec<ControlMessage> {
        let Ok(v) = parse_ovsdb(&msg.payload) else {
            self.counters.ignored += 1;
            return Vec::new();
        };
        match v.get("method").and_then(Value::as_str) {
            Some("transact") => match parse_queue_transact(&v) {
                Some((qid, rates)) => {
                    self.counters.transacts += 1;
                    self.queues.insert(qid, rates);
                    vec![synth_queue_update(qid, rates)]
                }
                None => {
                    self.counters.ignored += 1;
                    Vec::new()
                }
            },
            Some("echo") => {
                self.counters.echo_requests += 1;
                vec![ovsdb_echo_reply(&v["id"])]
            }
            None if v.get("result").is_some() => {
                self.counters.echo_replies += 1;
                Vec::new()
            }
            _ => {
                self.counters.ignored += 1;
                Vec::new()
            }
        }
    }

    fn xid(&mut self) -> u32 {
        let x = self.next_xid;
        self.next_xid = self.next_xid.wrapping_add(1);
        x
    }
}

/// Queue id and (min, max) rates from a queue-insert transact.
pub fn parse_queue_transact(v: &Value) -> Option<(u64, (u64, u64))> {
    let qid = v.get("id")?.as_u64()?;
    let op = v.get("params")?.get(1)?;
    let pairs = op.get("row")?.get("other_config")?.get(1)?.as_array()?;
    let get = |key: &str| {
        pairs
            .iter()
            .find(|p| p.get(0).and_then(Value::as_str) == Some(key))
            .and_then(|p| p.get(1)?.as_str()?.parse::<u64>().ok())
    };
    Some((qid, (get("min-rate")?, get("max-rate")?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{multipart_reply_len, synth_queue_transact, OFPT_BARRIER_REPLY};

    fn switch() -> Switch {
        Switch::new(SwitchConfig::default())
    }

    #[test]
    fn flow_mod_is_acked_and_counted() {
        let mut s = switch();
        let fm = Codec::default().synth_flow_mod(2, 1, 77).unwrap();
        let out = s.handle(&fm);
        assert_eq!(s.flow_table_size(), 1);
        assert_eq!(out.len(), 1);
        let hdr = decode_openflow_header(&out[0].payload).unwrap();
        assert_eq!((hdr.msg_type, hdr.xid), (OFPT_BARRIER_REPLY, 77));
    }

    #[test]
    fn stats_reply_sized_by_table() {
        let mut s = Switch::new(SwitchConfig { initial_flows: 100, ..Default::default() });
        let out = s.handle(&Codec::default().synth_multipart_request(5));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].len(), multipart_reply_len(100));
        assert_eq!(out[0].xid, Some(5));
    }

    #[test]
    fn queue_transact_yields_update() {
        let mut s = switch();
        let out = s.handle(&synth_queue_transact(3, (1000, 2000)));
        assert_eq!(out, vec![synth_queue_update(3, (1000, 2000))]);
        assert_eq!(s.queues().get(&3), Some(&(1000, 2000)));
        let v = parse_ovsdb(&out[0].payload).unwrap();
        assert_eq!(v["method"], "update");
    }

    #[test]
    fn echoes_and_probes() {
        let mut s = switch();
        let out = s.handle(&Codec::default().echo(true, 9));
        assert_eq!(decode_openflow_header(&out[0].payload).unwrap().msg_type, OFPT_ECHO_REPLY);
        let out = s.handle(&ovsdb_echo_request());
        assert_eq!(parse_ovsdb(&out[0].payload).unwrap()["result"], json!([]));
        let t0 = Instant::now();
        s.start_probes(t0);
        assert!(s.poll_probe(t0).is_empty());
        assert_eq!(s.poll_probe(t0 + DEFAULT_PROBE_INTERVAL).len(), 2);
        assert_eq!(s.next_probe(), Some(t0 + 2 * DEFAULT_PROBE_INTERVAL));
    }

    #[test]
    fn junk_is_ignored() {
        let mut s = switch();
        assert!(s.handle_bytes(Protocol::OpenFlow, bytes::Bytes::from_static(b"\x04\x63\x00\x08\0\0\0\0")).is_empty());
        assert!(s.handle_bytes(Protocol::Ovsdb, bytes::Bytes::from_static(b"{}")).is_empty());
        assert_eq!(s.counters().ignored, 2);
    }
}
