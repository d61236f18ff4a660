//! Switch-side and controller-side agents.
//!
//! Both agents are sans-IO cores: they take datagrams and timestamps and hand
//! back datagrams to send and messages to deliver to local daemons. The
//! [`live`] module drives them over real sockets; the harness drives them in
//! virtual time.

pub mod client;
pub mod live;
pub mod queue;
pub mod server;

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use bytes::Bytes;

use crate::codec::Protocol;
use crate::mux::{MuxError, StreamLabel};
use crate::transport::TransportErr;

pub use client::{ClientConfig, ClientCore};
pub use queue::{SendQueue, DEFAULT_QUEUE_CAPACITY};
pub use server::{Enqueued, ServerConfig, ServerCore};

/// Receive buffer for the agent event loops.
pub const DEFAULT_RECV_BUFFER: usize = 65536;
pub const MIN_RECV_BUFFER: usize = 1500;
/// Warn when reverse traffic waits this long for its stream.
pub const UNBOUND_WARN_AFTER: Duration = Duration::from_secs(5);

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("cannot bind: {0}")]
    BindFailure(String),
    #[error("bad credentials: {0}")]
    BadCredentials(String),
    #[error("handshake timed out")]
    HandshakeTimeout,
    #[error("datagram from unexpected port {0}")]
    UnknownOrigin(u16),
    #[error("send queue full ({0} records)")]
    QueueFull(usize),
    #[error("no stream bound for port {0}")]
    NoBoundStream(u16),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Mux(#[from] MuxError),
    #[error(transparent)]
    Transport(#[from] TransportErr),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One message leaving an agent toward a local daemon.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub port: u16,
    pub protocol: Protocol,
    pub label: StreamLabel,
    pub data: Bytes,
}

macro_rules! counters {
    ($($name:ident),* $(,)?) => {
        /// Agent counters, shared read-only with other threads.
        #[derive(Debug, Default)]
        pub struct AgentCounters {
            $(pub $name: AtomicU64,)*
        }

        #[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
        pub struct CounterSnapshot {
            $(pub $name: u64,)*
        }

        impl AgentCounters {
            pub fn snapshot(&self) -> CounterSnapshot {
                CounterSnapshot { $($name: self.$name.load(Ordering::Relaxed),)* }
            }
        }
    };
}

counters!(
    local_received,
    local_enqueued,
    dropped_unknown_origin,
    dropped_overflow,
    dropped_auth,
    dropped_unknown_stream,
    dropped_framing,
    delivered_openflow,
    delivered_ovsdb,
    records_written,
    stream_bytes_out,
    stream_bytes_in,
    datagrams_in,
    datagrams_out,
    long_header_in,
    short_header_in,
    unbound_warnings,
    reconnects,
    undeliverable,
);

pub(crate) fn bump(c: &AtomicU64, n: u64) {
    c.fetch_add(n, Ordering::Relaxed);
}

impl CounterSnapshot {
    pub fn delivered(&self) -> u64 {
        self.delivered_openflow + self.delivered_ovsdb
    }

    /// Local datagrams either queued or dropped, so this equals `local_received`.
    pub fn local_accounted(&self) -> u64 {
        self.local_enqueued + self.dropped_unknown_origin + self.dropped_overflow
    }
}

/// Exponential reconnect backoff.
#[derive(Debug, Clone)]
pub struct Backoff {
    base: Duration,
    cap: Duration,
    attempt: u32,
}

impl Default for Backoff {
    fn default() -> Self {
        Self::new(Duration::from_millis(200), Duration::from_secs(5))
    }
}

impl Backoff {
    pub fn new(base: Duration, cap: Duration) -> Self {
        Self { base, cap, attempt: 0 }
    }

    pub fn next_delay(&mut self) -> Duration {
        let d = self.base.saturating_mul(1u32 << self.attempt.min(20)).min(self.cap);
        self.attempt = self.attempt.saturating_add(1);
        d
    }

    pub fn reset(&mut self) {
        self.attempt = 0;
    }
}

/// Re-delimits stream bytes into whole messages, one framer per label.
#[derive(Debug, Default)]
pub(crate) struct Delimiter {
    framers: std::collections::HashMap<StreamLabel, crate::codec::Framer>,
}

impl Delimiter {
    pub(crate) fn clear(&mut self) {
        self.framers.clear();
    }

    /// Pushes `data` for `label` and returns the complete messages plus
    /// `false` if a framing error discarded the rest of the buffer.
    pub(crate) fn push(&mut self, label: StreamLabel, data: &[u8]) -> (Vec<Bytes>, bool) {
        let framer = self.framers.entry(label).or_insert_with(|| crate::codec::Framer::new(label.protocol()));
        framer.push(data);
        let mut out = Vec::new();
        loop {
            match framer.next_message() {
                Ok(Some(m)) => out.push(m),
                Ok(None) => return (out, true),
                Err(e) => {
                    tracing::warn!(%label, error = %e, "unparseable stream data, resetting framer");
                    *framer = crate::codec::Framer::new(label.protocol());
                    return (out, false);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_to_cap() {
        let mut b = Backoff::default();
        let got: Vec<u64> = (0..8).map(|_| b.next_delay().as_millis() as u64).collect();
        assert_eq!(got, vec![200, 400, 800, 1600, 3200, 5000, 5000, 5000]);
        b.reset();
        assert_eq!(b.next_delay(), Duration::from_millis(200));
    }

    #[test]
    fn delimiter_splits_and_recovers() {
        let codec = crate::codec::Codec::default();
        let a = codec.synth_flow_mod(0, 0, 1).unwrap().payload;
        let b = codec.barrier_reply(2).payload;
        let mut joined = a.to_vec();
        joined.extend_from_slice(&b);
        let label = StreamLabel::new(6).unwrap();
        let mut d = Delimiter::default();
        let (msgs, ok) = d.push(label, &joined[..60]);
        assert!(ok);
        assert_eq!(msgs, vec![a.clone()]);
        let (msgs, _) = d.push(label, &joined[60..]);
        assert_eq!(msgs, vec![b]);
        let (msgs, ok) = d.push(label, &[4, 0, 0, 2, 0, 0, 0, 0]);
        assert!(msgs.is_empty() && !ok);
        let (msgs, ok) = d.push(label, &a);
        assert!(ok);
        assert_eq!(msgs, vec![a]);
    }
}
