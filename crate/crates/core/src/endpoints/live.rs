//! Daemons over real sockets: datagrams toward a local agent, or TCP straight
//! to the peer daemon.

use std::io::{ErrorKind, Read, Write};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use bytes::Bytes;
use mio::net::{TcpListener, TcpStream, UdpSocket};
use mio::{Events, Interest, Poll, Registry, Token};

use super::{Controller, ControllerCounters, EndpointError, Role, Scheme, Service, ServiceState, Switch, SwitchConfig, SwitchCounters, TransportSpec};
use crate::codec::{ControlMessage, Framer, Protocol};

const TICK: Duration = Duration::from_millis(20);
const TCP_RETRY: Duration = Duration::from_secs(1);

enum Conn {
    Udp { sock: UdpSocket, peer: Option<SocketAddr> },
    TcpClient { stream: Option<TcpStream>, retry_at: Option<Instant> },
    TcpServer { listener: TcpListener, stream: Option<TcpStream> },
}

/// One daemon channel with its socket.
pub struct LiveService {
    service: Service,
    conn: Conn,
    token: Token,
    framer: Framer,
    out: Vec<u8>,
}

/// Opens the socket for `spec`: switch roles connect toward it, controller
/// roles listen on it.
pub fn service_create(spec: TransportSpec, role: Role, registry: &Registry, token: Token) -> Result<LiveService, EndpointError> {
    let fail = |e: std::io::Error| EndpointError::BindFailure { addr: spec.addr, reason: e.to_string() };
    let conn = match (spec.scheme, role.is_switch()) {
        (Scheme::Udp, true) => {
            let any: SocketAddr = if spec.addr.is_ipv4() { "0.0.0.0:0" } else { "[::]:0" }.parse().expect("literal");
            let mut sock = UdpSocket::bind(any).map_err(fail)?;
            sock.connect(spec.addr).map_err(fail)?;
            registry.register(&mut sock, token, Interest::READABLE).map_err(fail)?;
            Conn::Udp { sock, peer: Some(spec.addr) }
        }
        (Scheme::Udp, false) => {
            let mut sock = UdpSocket::bind(spec.addr).map_err(fail)?;
            registry.register(&mut sock, token, Interest::READABLE).map_err(fail)?;
            Conn::Udp { sock, peer: None }
        }
        (Scheme::Tcp, true) => Conn::TcpClient { stream: None, retry_at: Some(Instant::now()) },
        (Scheme::Tcp, false) => {
            let mut listener = TcpListener::bind(spec.addr).map_err(fail)?;
            registry.register(&mut listener, token, Interest::READABLE).map_err(fail)?;
            Conn::TcpServer { listener, stream: None }
        }
    };
    Ok(LiveService { service: Service::new(spec, role), conn, token, framer: Framer::new(role.protocol()), out: Vec::new() })
}

impl LiveService {
    pub fn state(&self) -> ServiceState {
        self.service.state()
    }

    pub fn local_addr(&self) -> Option<SocketAddr> {
        match &self.conn {
            Conn::Udp { sock, .. } => sock.local_addr().ok(),
            Conn::TcpServer { listener, .. } => listener.local_addr().ok(),
            Conn::TcpClient { stream, .. } => stream.as_ref().and_then(|s| s.local_addr().ok()),
        }
    }

    pub fn send(&mut self, msg: &ControlMessage) {
        match &mut self.conn {
            Conn::Udp { sock, peer } => {
                let res = if self.service.role.is_switch() {
                    sock.send(&msg.payload)
                } else if let Some(p) = peer {
                    sock.send_to(&msg.payload, *p)
                } else {
                    tracing::debug!("no peer yet, dropping message");
                    return;
                };
                if let Err(e) = res {
                    tracing::debug!(error = %e, "datagram not sent");
                }
            }
            _ => {
                if self.service.state() == ServiceState::Active {
                    self.out.extend_from_slice(&msg.payload);
                    self.flush();
                }
            }
        }
    }

    fn flush(&mut self) {
        let stream = match &mut self.conn {
            Conn::TcpClient { stream: Some(s), .. } | Conn::TcpServer { stream: Some(s), .. } => s,
            _ => return,
        };
        while !self.out.is_empty() {
            match stream.write(&self.out) {
                Ok(0) => break,
                Ok(n) => {
                    self.out.drain(..n);
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                Err(e) => {
                    tracing::debug!(error = %e, "tcp write failed");
                    break;
                }
            }
        }
    }

    /// Reads everything pending. Returns complete messages and whether the
    /// channel just became ACTIVE.
    pub fn poll(&mut self, registry: &Registry, now: Instant, buf: &mut [u8]) -> (Vec<Bytes>, bool) {
        let mut msgs = Vec::new();
        let mut activated = false;
        let mut dropped = false;
        match &mut self.conn {
            Conn::Udp { sock, peer } => loop {
                match sock.recv_from(buf) {
                    Ok((n, from)) => {
                        if !self.service.role.is_switch() {
                            *peer = Some(from);
                        }
                        msgs.push(Bytes::copy_from_slice(&buf[..n]));
                    }
                    Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                    Err(e) => {
                        tracing::debug!(error = %e, "udp read");
                        break;
                    }
                }
            },
            Conn::TcpClient { stream, retry_at } => {
                if stream.is_none() && retry_at.is_some_and(|t| t <= now) {
                    *retry_at = None;
                    match TcpStream::connect(self.service.spec.addr) {
                        Ok(mut s) => {
                            let _ = s.set_nodelay(false);
                            if registry.register(&mut s, self.token, Interest::READABLE | Interest::WRITABLE).is_ok() {
                                *stream = Some(s);
                            }
                        }
                        Err(_) => *retry_at = Some(now + TCP_RETRY),
                    }
                }
                if let Some(s) = stream.as_mut() {
                    if self.service.state() == ServiceState::Connecting {
                        match (s.take_error(), s.peer_addr()) {
                            (Ok(None), Ok(_)) => {
                                self.service.on_connected();
                                activated = true;
                            }
                            (Ok(Some(_)) | Err(_), _) => dropped = true,
                            (_, Err(e)) if e.kind() != ErrorKind::NotConnected => dropped = true,
                            _ => {}
                        }
                    }
                    if self.service.state() == ServiceState::Active {
                        dropped |= read_stream(s, buf, &mut self.framer, &mut msgs);
                    }
                }
                if dropped {
                    if let Some(mut s) = stream.take() {
                        let _ = registry.deregister(&mut s);
                    }
                    *retry_at = Some(now + TCP_RETRY);
                }
            }
            Conn::TcpServer { listener, stream } => {
                while let Ok((mut s, from)) = listener.accept() {
                    tracing::info!(%from, "accepted tcp connection");
                    if registry.register(&mut s, self.token, Interest::READABLE).is_ok() {
                        if let Some(mut old) = stream.replace(s) {
                            let _ = registry.deregister(&mut old);
                        }
                        self.framer = Framer::new(self.service.role.protocol());
                        self.out.clear();
                        self.service.on_connected();
                        activated = true;
                    }
                }
                if let Some(s) = stream.as_mut() {
                    if read_stream(s, buf, &mut self.framer, &mut msgs) {
                        dropped = true;
                        if let Some(mut s) = stream.take() {
                            let _ = registry.deregister(&mut s);
                        }
                    }
                }
            }
        }
        if dropped {
            self.service.on_disconnected();
            self.framer = Framer::new(self.service.role.protocol());
            self.out.clear();
        }
        self.flush();
        (msgs, activated)
    }
}

/// Returns true when the peer closed or the stream failed.
fn read_stream(s: &mut TcpStream, buf: &mut [u8], framer: &mut Framer, msgs: &mut Vec<Bytes>) -> bool {
    loop {
        match s.read(buf) {
            Ok(0) => return true,
            Ok(n) => framer.push(&buf[..n]),
            Err(e) if e.kind() == ErrorKind::WouldBlock => break,
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(_) => return true,
        }
    }
    while let Ok(Some(m)) = framer.next_message() {
        msgs.push(m);
    }
    false
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct DaemonStatus {
    pub states: Vec<ServiceState>,
    pub switch: Option<SwitchCounters>,
    pub controller: Option<ControllerCounters>,
    pub flow_table: usize,
}

pub struct DaemonHandle {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
    status: Arc<Mutex<DaemonStatus>>,
    pub local_addrs: Vec<Option<SocketAddr>>,
}

impl DaemonHandle {
    pub fn status(&self) -> DaemonStatus {
        self.status.lock().expect("status lock").clone()
    }

    pub fn shutdown(mut self) -> DaemonStatus {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        self.status()
    }
}

impl Drop for DaemonHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn open_pair(
    specs: [(TransportSpec, Role); 2],
) -> Result<(Poll, [LiveService; 2]), EndpointError> {
    let poll = Poll::new().map_err(|e| EndpointError::BindFailure { addr: specs[0].0.addr, reason: e.to_string() })?;
    let a = service_create(specs[0].0, specs[0].1, poll.registry(), Token(0))?;
    let b = service_create(specs[1].0, specs[1].1, poll.registry(), Token(1))?;
    Ok((poll, [a, b]))
}

fn index(p: Protocol) -> usize {
    match p {
        Protocol::OpenFlow => 0,
        Protocol::Ovsdb => 1,
    }
}

/// Runs the switch pair: `controller` carries OpenFlow, `manager` OVSDB.
pub fn run_switch(controller: TransportSpec, manager: TransportSpec, cfg: SwitchConfig) -> Result<DaemonHandle, EndpointError> {
    let (mut poll, mut chans) = open_pair([(controller, Role::OpenFlowSwitch), (manager, Role::OvsdbSwitch)])?;
    let local_addrs = chans.iter().map(LiveService::local_addr).collect();
    let stop = Arc::new(AtomicBool::new(false));
    let status = Arc::new(Mutex::new(DaemonStatus::default()));
    let thread = {
        let (stop, status) = (stop.clone(), status.clone());
        std::thread::spawn(move || {
            let mut switch = Switch::new(cfg);
            let mut events = Events::with_capacity(16);
            let mut buf = vec![0u8; 65536];
            switch.start_probes(Instant::now());
            for (i, ch) in chans.iter_mut().enumerate() {
                if ch.state() == ServiceState::Active {
                    let p = if i == 0 { Protocol::OpenFlow } else { Protocol::Ovsdb };
                    let m = switch.hello(p);
                    ch.send(&m);
                }
            }
            while !stop.load(Ordering::Relaxed) {
                let _ = poll.poll(&mut events, Some(TICK));
                let now = Instant::now();
                for i in 0..2 {
                    let protocol = if i == 0 { Protocol::OpenFlow } else { Protocol::Ovsdb };
                    let (msgs, activated) = chans[i].poll(poll.registry(), now, &mut buf);
                    if activated {
                        let m = switch.hello(protocol);
                        chans[i].send(&m);
                    }
                    for m in msgs {
                        for reply in switch.handle_bytes(protocol, m) {
                            chans[index(reply.protocol)].send(&reply);
                        }
                    }
                }
                for m in switch.poll_probe(now) {
                    chans[index(m.protocol)].send(&m);
                }
                let mut st = status.lock().expect("status lock");
                st.states = chans.iter().map(LiveService::state).collect();
                st.switch = Some(switch.counters());
                st.flow_table = switch.flow_table_size();
            }
        })
    };
    Ok(DaemonHandle { stop, thread: Some(thread), status, local_addrs })
}

/// Periodic requests the controller issues on its own.
#[derive(Debug, Clone, Default)]
pub struct Workload {
    pub flow_mods_per_sec: f64,
    pub transacts_per_sec: f64,
    pub poll_interval: Option<Duration>,
}

/// Runs the controller pair listening on `ofp` (OpenFlow) and `ovsdb`.
pub fn run_controller(ofp: TransportSpec, ovsdb: TransportSpec, workload: Workload) -> Result<DaemonHandle, EndpointError> {
    let (mut poll, mut chans) = open_pair([(ofp, Role::OpenFlowController), (ovsdb, Role::OvsdbController)])?;
    let local_addrs = chans.iter().map(LiveService::local_addr).collect();
    let stop = Arc::new(AtomicBool::new(false));
    let status = Arc::new(Mutex::new(DaemonStatus::default()));
    let thread = {
        let (stop, status) = (stop.clone(), status.clone());
        std::thread::spawn(move || {
            let mut ctl = Controller::default();
            let mut events = Events::with_capacity(16);
            let mut buf = vec![0u8; 65536];
            let start = Instant::now();
            let (mut fm_sent, mut tx_sent, mut polls) = (0u64, 0u64, 0u64);
            while !stop.load(Ordering::Relaxed) {
                let _ = poll.poll(&mut events, Some(TICK));
                let now = Instant::now();
                for i in 0..2 {
                    let protocol = if i == 0 { Protocol::OpenFlow } else { Protocol::Ovsdb };
                    let (msgs, _) = chans[i].poll(poll.registry(), now, &mut buf);
                    for m in msgs {
                        for reply in ctl.handle_bytes(protocol, m) {
                            chans[i].send(&reply);
                        }
                    }
                }
                let elapsed = now.duration_since(start).as_secs_f64();
                let due = |rate: f64, sent: u64| if rate > 0.0 { ((elapsed * rate) as u64).saturating_sub(sent) } else { 0 };
                let n = due(workload.flow_mods_per_sec, fm_sent);
                if n > 0 && chans[0].state() == ServiceState::Active {
                    for m in ctl.flow_mods(n as usize, 2, 1) {
                        chans[0].send(&m);
                    }
                    fm_sent += n;
                }
                let n = due(workload.transacts_per_sec, tx_sent);
                if n > 0 && chans[1].state() == ServiceState::Active {
                    for k in 0..n {
                        let m = ctl.queue_transact(tx_sent + k, (1_000_000, 10_000_000));
                        chans[1].send(&m);
                    }
                    tx_sent += n;
                }
                if let Some(p) = workload.poll_interval {
                    let due = (elapsed / p.as_secs_f64()) as u64;
                    if due > polls && chans[0].state() == ServiceState::Active {
                        let m = ctl.stats_request();
                        chans[0].send(&m);
                        polls = due;
                    }
                }
                let mut st = status.lock().expect("status lock");
                st.states = chans.iter().map(LiveService::state).collect();
                st.controller = Some(ctl.counters());
            }
        })
    };
    Ok(DaemonHandle { stop, thread: Some(thread), status, local_addrs })
}
