//! Minimal TCP endpoint for the baseline path.
//!
//! Lossless and in-order delivery is assumed, so there is no retransmission
//! and no congestion control. Segmentation, Nagle, the handshake and the ACK
//! policy are modelled because they decide how many bytes reach the wire.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use bytes::{Bytes, BytesMut};

pub const FLAG_FIN: u8 = 0x01;
pub const FLAG_SYN: u8 = 0x02;
pub const FLAG_PSH: u8 = 0x08;
pub const FLAG_ACK: u8 = 0x10;

/// Header with the timestamp option, as Linux sends on established flows.
pub const TCP_HEADER_LEN: usize = 32;
/// SYN and SYN-ACK carry MSS, SACK-permitted, timestamps and window scale.
pub const TCP_SYN_HEADER_LEN: usize = 40;
pub const DEFAULT_MSS: usize = 1448;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AckPolicy {
    /// A pure ACK for every data segment that is not answered by data.
    PerSegment,
    /// ACK every `every`-th segment or after `timeout`, whichever is first.
    Delayed { every: u32, timeout: Duration },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TcpParams {
    pub mss: usize,
    pub header_len: usize,
    pub syn_header_len: usize,
    pub ack: AckPolicy,
    pub nagle: bool,
}

impl Default for TcpParams {
    fn default() -> Self {
        Self {
            mss: DEFAULT_MSS,
            header_len: TCP_HEADER_LEN,
            syn_header_len: TCP_SYN_HEADER_LEN,
            ack: AckPolicy::PerSegment,
            nagle: true,
        }
    }
}

impl TcpParams {
    /// Largest segment payload for an IPv4 MTU.
    pub fn for_mtu(mtu: usize) -> Self {
        let d = Self::default();
        Self { mss: mtu - 20 - d.header_len, ..d }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcpSegment {
    pub seq: u32,
    pub ack: u32,
    pub flags: u8,
    pub header_len: usize,
    pub payload: Bytes,
}

impl TcpSegment {
    pub fn wire_len(&self) -> usize {
        self.header_len + self.payload.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TcpState {
    Closed,
    Listen,
    SynSent,
    SynReceived,
    Established,
}

#[derive(Debug)]
pub struct TcpEndpoint {
    params: TcpParams,
    state: TcpState,
    snd_una: u32,
    snd_nxt: u32,
    rcv_nxt: u32,
    sendq: BytesMut,
    outbox: VecDeque<TcpSegment>,
    received: BytesMut,
    unacked_in: u32,
    ack_deadline: Option<Instant>,
}

impl TcpEndpoint {
    fn with_state(params: TcpParams, iss: u32, state: TcpState) -> Self {
        Self {
            params,
            state,
            snd_una: iss,
            snd_nxt: iss,
            rcv_nxt: 0,
            sendq: BytesMut::new(),
            outbox: VecDeque::new(),
            received: BytesMut::new(),
            unacked_in: 0,
            ack_deadline: None,
        }
    }

    /// Active opener; call [`connect`](Self::connect) to send the SYN.
    pub fn client(params: TcpParams, iss: u32) -> Self {
        Self::with_state(params, iss, TcpState::Closed)
    }

    pub fn listener(params: TcpParams, iss: u32) -> Self {
        Self::with_state(params, iss, TcpState::Listen)
    }

    pub fn state(&self) -> TcpState {
        self.state
    }

    pub fn is_established(&self) -> bool {
        self.state == TcpState::Established
    }

    pub fn connect(&mut self) {
        if self.state == TcpState::Closed {
            self.state = TcpState::SynSent;
            self.control(FLAG_SYN);
            self.snd_nxt = self.snd_nxt.wrapping_add(1);
        }
    }

    /// Drops all state without sending anything, as when the path vanishes.
    pub fn abort(&mut self) {
        self.state = TcpState::Closed;
        self.sendq.clear();
        self.outbox.clear();
        self.received.clear();
        self.ack_deadline = None;
        self.unacked_in = 0;
    }

    /// Bytes written but not yet acknowledged by the peer.
    pub fn in_flight(&self) -> usize {
        self.snd_nxt.wrapping_sub(self.snd_una) as usize
    }

    pub fn buffered(&self) -> usize {
        self.sendq.len()
    }

    pub fn write(&mut self, data: &[u8]) {
        self.sendq.extend_from_slice(data);
        self.push_data();
    }

    pub fn take_received(&mut self) -> Bytes {
        self.received.split().freeze()
    }

    pub fn poll_segment(&mut self) -> Option<TcpSegment> {
        self.outbox.pop_front()
    }

    pub fn poll_timeout(&self) -> Option<Instant> {
        self.ack_deadline
    }

    pub fn handle_timeout(&mut self, now: Instant) {
        if self.ack_deadline.is_some_and(|t| t <= now) {
            self.send_ack();
        }
    }

    pub fn on_segment(&mut self, now: Instant, seg: TcpSegment) {
        match self.state {
            TcpState::Closed => return,
            TcpState::Listen => {
                if seg.flags & FLAG_SYN != 0 {
                    self.rcv_nxt = seg.seq.wrapping_add(1);
                    self.state = TcpState::SynReceived;
                    self.control(FLAG_SYN | FLAG_ACK);
                    self.snd_nxt = self.snd_nxt.wrapping_add(1);
                }
                return;
            }
            TcpState::SynSent => {
                if seg.flags & (FLAG_SYN | FLAG_ACK) == FLAG_SYN | FLAG_ACK {
                    self.rcv_nxt = seg.seq.wrapping_add(1);
                    self.snd_una = seg.ack;
                    self.state = TcpState::Established;
                    if self.sendq.is_empty() {
                        self.control(FLAG_ACK);
                    }
                    self.push_data();
                }
                return;
            }
            TcpState::SynReceived => {
                if seg.flags & FLAG_ACK == 0 {
                    return;
                }
                self.state = TcpState::Established;
            }
            TcpState::Established => {}
        }
        if seg.flags & FLAG_ACK != 0 && ack_advances(self.snd_una, seg.ack, self.snd_nxt) {
            self.snd_una = seg.ack;
        }
        if !seg.payload.is_empty() && seg.seq == self.rcv_nxt {
            self.rcv_nxt = self.rcv_nxt.wrapping_add(seg.payload.len() as u32);
            self.received.extend_from_slice(&seg.payload);
            self.unacked_in += 1;
            match self.params.ack {
                AckPolicy::PerSegment => self.send_ack(),
                AckPolicy::Delayed { every, timeout } => {
                    if self.unacked_in >= every {
                        self.send_ack();
                    } else if self.ack_deadline.is_none() {
                        self.ack_deadline = Some(now + timeout);
                    }
                }
            }
        }
        self.push_data();
    }

    fn control(&mut self, flags: u8) {
        let header_len = if flags & FLAG_SYN != 0 { self.params.syn_header_len } else { self.params.header_len };
        let ack = if flags & FLAG_ACK != 0 { self.rcv_nxt } else { 0 };
        self.outbox.push_back(TcpSegment { seq: self.snd_nxt, ack, flags, header_len, payload: Bytes::new() });
    }

    fn send_ack(&mut self) {
        self.control(FLAG_ACK);
        self.unacked_in = 0;
        self.ack_deadline = None;
    }

    /// Segments queued data; with Nagle a short tail waits until nothing is
    /// in flight.
    fn push_data(&mut self) {
        if self.state != TcpState::Established {
            return;
        }
        let mss = self.params.mss;
        let mut sent = false;
        while !self.sendq.is_empty() {
            let full = self.sendq.len() >= mss;
            if !full && self.params.nagle && self.in_flight() > 0 {
                break;
            }
            let n = self.sendq.len().min(mss);
            let payload = self.sendq.split_to(n).freeze();
            let flags = if self.sendq.is_empty() { FLAG_ACK | FLAG_PSH } else { FLAG_ACK };
            self.outbox.push_back(TcpSegment {
                seq: self.snd_nxt,
                ack: self.rcv_nxt,
                flags,
                header_len: self.params.header_len,
                payload,
            });
            self.snd_nxt = self.snd_nxt.wrapping_add(n as u32);
            sent = true;
        }
        if sent {
            // data carries the acknowledgement
            self.unacked_in = 0;
            self.ack_deadline = None;
        }
    }
}

fn ack_advances(una: u32, ack: u32, nxt: u32) -> bool {
    let ahead = ack.wrapping_sub(una);
    ahead > 0 && ahead <= nxt.wrapping_sub(una)
}
