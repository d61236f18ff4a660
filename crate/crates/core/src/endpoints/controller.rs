//! ryu-of and ryu-ovsdb stand-in with workload hooks.

use std::collections::{HashMap, HashSet};

use bytes::Bytes;
use serde_json::Value;

use super::switch::ovsdb_echo_reply;
use crate::codec::{
    decode_openflow_header, parse_ovsdb, synth_queue_transact, Codec, ControlMessage, Protocol, OFPMPF_REPLY_MORE,
    OFPT_BARRIER_REPLY, OFPT_ECHO_REPLY, OFPT_ECHO_REQUEST, OFPT_HELLO, OFPT_MULTIPART_REPLY,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ControllerCounters {
    pub flow_mods_sent: u64,
    pub acks: u64,
    pub stats_requests_sent: u64,
    pub stats_replies: u64,
    pub stats_parts: u64,
    pub transacts_sent: u64,
    pub updates: u64,
    pub echo_requests: u64,
    pub echo_replies: u64,
    pub hellos: u64,
    pub xid_mismatch: u64,
    pub ignored: u64,
    pub messages_in: u64,
    pub bytes_in: u64,
}

#[derive(Debug)]
pub struct Controller {
    codec: Codec,
    next_xid: u32,
    flow_mods: HashSet<u32>,
    stats: HashSet<u32>,
    transacts: HashMap<u64, u32>,
    counters: ControllerCounters,
}

impl Default for Controller {
    fn default() -> Self {
        Self::new(Codec::default())
    }
}

impl Controller {
    pub fn new(codec: Codec) -> Self {
        Self {
            codec,
            next_xid: 1,
            flow_mods: HashSet::new(),
            stats: HashSet::new(),
            transacts: HashMap::new(),
            counters: ControllerCounters::default(),
        }
    }

    pub fn counters(&self) -> ControllerCounters {
        self.counters
    }

    /// Requests still waiting for their reply.
    pub fn outstanding(&self) -> usize {
        self.flow_mods.len() + self.stats.len() + self.transacts.values().sum::<u32>() as usize
    }

    /// Forgets outstanding requests, e.g. after the connection was lost.
    pub fn reset_outstanding(&mut self) {
        self.flow_mods.clear();
        self.stats.clear();
        self.transacts.clear();
    }

    pub fn flow_mods(&mut self, n: usize, match_fields: usize, actions: usize) -> Vec<ControlMessage> {
        (0..n)
            .map(|_| {
                let xid = self.xid();
                self.flow_mods.insert(xid);
                self.counters.flow_mods_sent += 1;
                self.codec.synth_flow_mod(match_fields, actions, xid).expect("workload flow mods are small")
            })
            .collect()
    }

    pub fn queue_transact(&mut self, queue_id: u64, rates: (u64, u64)) -> ControlMessage {
        *self.transacts.entry(queue_id).or_default() += 1;
        self.counters.transacts_sent += 1;
        synth_queue_transact(queue_id, rates)
    }

    pub fn stats_request(&mut self) -> ControlMessage {
        let xid = self.xid();
        self.stats.insert(xid);
        self.counters.stats_requests_sent += 1;
        self.codec.synth_multipart_request(xid)
    }

    pub fn hello(&mut self) -> ControlMessage {
        let xid = self.xid();
        self.codec.hello(xid)
    }

    pub fn handle_bytes(&mut self, protocol: Protocol, data: Bytes) -> Vec<ControlMessage> {
        match ControlMessage::from_wire(protocol, data.clone()) {
            Ok(m) => self.handle(&m),
            Err(_) => {
                self.counters.messages_in += 1;
                self.counters.bytes_in += data.len() as u64;
                self.counters.ignored += 1;
                Vec::new()
            }
        }
    }

    /// Validates a reply against outstanding requests and answers probes.
    pub fn handle(&mut self, msg: &ControlMessage) -> Vec<ControlMessage> {
        self.counters.messages_in += 1;
        self.counters.bytes_in += msg.len() as u64;
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
            OFPT_BARRIER_REPLY => {
                if self.flow_mods.remove(&hdr.xid) {
                    self.counters.acks += 1;
                } else {
                    self.counters.xid_mismatch += 1;
                }
            }
            OFPT_MULTIPART_REPLY => {
                if !self.stats.contains(&hdr.xid) {
                    self.counters.xid_mismatch += 1;
                    return Vec::new();
                }
                self.counters.stats_parts += 1;
                let flags = msg.payload.get(10..12).map_or(0, |b| u16::from_be_bytes([b[0], b[1]]));
                if flags & OFPMPF_REPLY_MORE == 0 {
                    self.stats.remove(&hdr.xid);
                    self.counters.stats_replies += 1;
                }
            }
            OFPT_ECHO_REQUEST => {
                self.counters.echo_requests += 1;
                return vec![self.codec.echo(false, hdr.xid)];
            }
            OFPT_ECHO_REPLY => self.counters.echo_replies += 1,
            OFPT_HELLO => {
                self.counters.hellos += 1;
                return vec![self.hello()];
            }
            _ => self.counters.ignored += 1,
        }
        Vec::new()
    }

    fn handle_ovsdb(&mut self, msg: &ControlMessage) -> Vec<ControlMessage> {
        let Ok(v) = parse_ovsdb(&msg.payload) else {
            self.counters.ignored += 1;
            return Vec::new();
        };
        match v.get("method").and_then(Value::as_str) {
            Some("update") => {
                let qid = v["params"].get(0).and_then(Value::as_u64);
                match qid.and_then(|q| self.transacts.get_mut(&q).map(|n| (q, n))) {
                    Some((q, n)) => {
                        *n -= 1;
                        if *n == 0 {
                            self.transacts.remove(&q);
                        }
                        self.counters.updates += 1;
                    }
                    None => self.counters.xid_mismatch += 1,
                }
                Vec::new()
            }
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::endpoints::switch::{ovsdb_echo_request, Switch, SwitchConfig};

    #[test]
    fn ten_flow_mods_ten_acks() {
        let mut c = Controller::default();
        let mut s = Switch::new(SwitchConfig::default());
        for fm in c.flow_mods(10, 1, 1) {
            for reply in s.handle(&fm) {
                c.handle(&reply);
            }
        }
        assert_eq!(c.counters().acks, 10);
        assert_eq!(c.counters().xid_mismatch, 0);
        assert_eq!(c.outstanding(), 0);
    }

    #[test]
    fn polls_collect_multipart_replies() {
        let mut c = Controller::default();
        let mut s = Switch::new(SwitchConfig { initial_flows: 1000, ..Default::default() });
        for _ in 0..10 {
            let req = c.stats_request();
            for part in s.handle(&req) {
                c.handle(&part);
            }
        }
        assert_eq!(c.counters().stats_replies, 10);
        assert_eq!(c.counters().stats_parts, 20);
        assert_eq!(c.outstanding(), 0);
    }

    #[test]
    fn unknown_xid_counts_mismatch() {
        let mut c = Controller::default();
        c.handle(&Codec::default().barrier_reply(4242));
        c.handle(&crate::codec::synth_queue_update(9, (1, 2)));
        assert_eq!(c.counters().xid_mismatch, 2);
    }

    #[test]
    fn transact_round_trip_and_echo() {
        let mut c = Controller::default();
        let mut s = Switch::new(SwitchConfig::default());
        let t = c.queue_transact(1, (1000, 2000));
        for r in s.handle(&t) {
            c.handle(&r);
        }
        assert_eq!(c.counters().updates, 1);
        let reply = c.handle(&ovsdb_echo_request());
        assert_eq!(reply.len(), 1);
        let hello = c.handle(&Codec::default().hello(1));
        assert_eq!(decode_openflow_header(&hello[0].payload).unwrap().msg_type, OFPT_HELLO);
    }
}
