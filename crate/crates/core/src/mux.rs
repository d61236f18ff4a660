//! Logical stream ids and the OpenFlow/OVSDB routing rule.
//!
//! Ids are client-initiated, so even. OpenFlow takes even ids divisible by
//! 3 (6, 12, 18, ...), OVSDB the remaining even ids (2, 4, 8, 10, ...). Id 0
//! is never issued.

use std::collections::HashMap;

use crate::codec::Protocol;

pub const MAX_STREAM_ID: u64 = (1 << 62) - 1;
pub const OPENFLOW_PORT: u16 = 6653;
pub const OVSDB_PORT: u16 = 6640;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum MuxError {
    #[error("stream id space exhausted")]
    IdSpaceExhausted,
    #[error("stream id {0} is odd (server-initiated)")]
    OddStreamId(u64),
    #[error("stream id {0} is not a valid label")]
    InvalidLabel(u64),
    #[error("port {port} cannot carry stream {id}")]
    PolicyViolation { port: u16, id: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StreamLabel(u64);

impl StreamLabel {
    pub fn new(id: u64) -> Result<Self, MuxError> {
        if id % 2 == 1 {
            return Err(MuxError::OddStreamId(id));
        }
        if id == 0 || id > MAX_STREAM_ID {
            return Err(MuxError::InvalidLabel(id));
        }
        Ok(Self(id))
    }

    pub fn get(self) -> u64 {
        self.0
    }

    pub fn protocol(self) -> Protocol {
        if self.0 % 3 == 0 {
            Protocol::OpenFlow
        } else {
            Protocol::Ovsdb
        }
    }
}

impl std::fmt::Display for StreamLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// OpenFlow when `id % 3 == 0`, else OVSDB. Odd ids are rejected.
pub fn classify(id: u64) -> Result<Protocol, MuxError> {
    Ok(StreamLabel::new(id)?.protocol())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamMode {
    /// One long-lived stream per protocol.
    #[default]
    PerProtocol,
    /// A fresh stream for every message.
    PerMessage,
}

#[derive(Debug, Clone)]
pub struct MuxPolicy {
    // k-th OpenFlow id is 6k
    next_openflow: u64,
    // k-th OVSDB id is 6*(k/2) + 2 or + 4
    next_ovsdb: u64,
    mode: StreamMode,
    current: [Option<StreamLabel>; 2],
}

impl Default for MuxPolicy {
    fn default() -> Self {
        Self::new(StreamMode::default())
    }
}

impl MuxPolicy {
    pub fn new(mode: StreamMode) -> Self {
        Self { next_openflow: 1, next_ovsdb: 0, mode, current: [None, None] }
    }

    pub fn mode(&self) -> StreamMode {
        self.mode
    }

    pub fn generate_stream_id_divisible_by_3(&mut self) -> Result<StreamLabel, MuxError> {
        let id = self.next_openflow.checked_mul(6).filter(|&id| id <= MAX_STREAM_ID).ok_or(MuxError::IdSpaceExhausted)?;
        self.next_openflow += 1;
        Ok(StreamLabel(id))
    }

    pub fn generate_normal_stream_id(&mut self) -> Result<StreamLabel, MuxError> {
        let k = self.next_ovsdb;
        let id = (k / 2)
            .checked_mul(6)
            .and_then(|base| base.checked_add(if k % 2 == 0 { 2 } else { 4 }))
            .filter(|&id| id <= MAX_STREAM_ID)
            .ok_or(MuxError::IdSpaceExhausted)?;
        self.next_ovsdb += 1;
        Ok(StreamLabel(id))
    }

    pub fn generate(&mut self, protocol: Protocol) -> Result<StreamLabel, MuxError> {
        match protocol {
            Protocol::OpenFlow => self.generate_stream_id_divisible_by_3(),
            Protocol::Ovsdb => self.generate_normal_stream_id(),
        }
    }

    /// Label for the next message of `protocol`, honoring the stream mode.
    pub fn label_for(&mut self, protocol: Protocol) -> Result<StreamLabel, MuxError> {
        let slot = protocol as usize;
        match (self.mode, self.current[slot]) {
            (StreamMode::PerProtocol, Some(label)) => Ok(label),
            _ => {
                let label = self.generate(protocol)?;
                self.current[slot] = Some(label);
                Ok(label)
            }
        }
    }

    /// Forgets the current per-protocol stream, e.g. after it was reset.
    pub fn retire(&mut self, protocol: Protocol) {
        self.current[protocol as usize] = None;
    }

    #[cfg(test)]
    fn skip_to(&mut self, openflow_k: u64, ovsdb_k: u64) {
        self.next_openflow = openflow_k;
        self.next_ovsdb = ovsdb_k;
    }
}

/// Bijective port <-> stream map kept by the controller-side agent.
#[derive(Debug, Clone)]
pub struct ConnMap {
    openflow_port: u16,
    ovsdb_port: u16,
    by_port: HashMap<u16, StreamLabel>,
    by_id: HashMap<StreamLabel, u16>,
}

impl Default for ConnMap {
    fn default() -> Self {
        Self::new(OPENFLOW_PORT, OVSDB_PORT)
    }
}

impl ConnMap {
    pub fn new(openflow_port: u16, ovsdb_port: u16) -> Self {
        assert_ne!(openflow_port, ovsdb_port, "protocol ports must differ");
        Self { openflow_port, ovsdb_port, by_port: HashMap::new(), by_id: HashMap::new() }
    }

    pub fn port_for(&self, protocol: Protocol) -> u16 {
        match protocol {
            Protocol::OpenFlow => self.openflow_port,
            Protocol::Ovsdb => self.ovsdb_port,
        }
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

    /// Binds `port <-> id`. Returns the id previously bound to `port`, if it
    /// differed (a rebind).
    pub fn bind(&mut self, port: u16, id: StreamLabel) -> Result<Option<StreamLabel>, MuxError> {
        if self.protocol_of(port) != Some(id.protocol()) {
            return Err(MuxError::PolicyViolation { port, id: id.get() });
        }
        if let Some(old_port) = self.by_id.get(&id).copied() {
            if old_port == port {
                return Ok(None);
            }
            self.by_port.remove(&old_port);
        }
        let prior = self.by_port.insert(port, id);
        if let Some(prior) = prior {
            self.by_id.remove(&prior);
        }
        self.by_id.insert(id, port);
        Ok(prior)
    }

    pub fn lookup(&self, port: u16) -> Option<StreamLabel> {
        self.by_port.get(&port).copied()
    }

    pub fn port_of(&self, id: StreamLabel) -> Option<u16> {
        self.by_id.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.by_port.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_port.is_empty()
    }

    pub fn clear(&mut self) {
        self.by_port.clear();
        self.by_id.clear();
    }

    pub fn unbind_id(&mut self, id: StreamLabel) {
        if let Some(port) = self.by_id.remove(&id) {
            self.by_port.remove(&port);
        }
    }

    /// Both directions of the map agree.
    pub fn is_bijective(&self) -> bool {
        self.by_port.len() == self.by_id.len()
            && self.by_port.iter().all(|(p, id)| self.by_id.get(id) == Some(p))
    }
}
