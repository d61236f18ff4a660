//! Socket drivers: one mio event loop per agent on its own thread.

use std::io::ErrorKind;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use bytes::Bytes;
use mio::net::UdpSocket;
use mio::{Events, Interest, Poll, Token};

use super::{bump, AgentCounters, AgentError, ClientConfig, ClientCore, CounterSnapshot, Delivery, ServerConfig, ServerCore};
use crate::transport::{PathInfo, TransportEvent};

const QUIC: Token = Token(0);
const OPENFLOW: Token = Token(1);
const OVSDB: Token = Token(2);
const TICK: Duration = Duration::from_millis(50);

enum Command {
    Rebind(mpsc::Sender<Result<PathInfo, AgentError>>),
}

/// A running agent thread.
pub struct AgentHandle {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<Result<(), AgentError>>>,
    counters: Arc<AgentCounters>,
    commands: Option<mpsc::Sender<Command>>,
    /// Address of the QUIC socket.
    pub quic_addr: SocketAddr,
    /// Local daemon-facing sockets (OpenFlow, OVSDB).
    pub daemon_addrs: [SocketAddr; 2],
}

impl AgentHandle {
    pub fn counters(&self) -> CounterSnapshot {
        self.counters.snapshot()
    }

    pub fn is_running(&self) -> bool {
        self.thread.as_ref().is_some_and(|t| !t.is_finished())
    }

    /// Moves the client's QUIC socket to a fresh local port.
    pub fn rebind(&self) -> Result<PathInfo, AgentError> {
        let tx = self.commands.as_ref().ok_or_else(|| AgentError::Config("only the client agent rebinds".into()))?;
        let (reply, rx) = mpsc::channel();
        tx.send(Command::Rebind(reply)).map_err(|_| AgentError::Config("agent stopped".into()))?;
        rx.recv_timeout(Duration::from_secs(5)).map_err(|_| AgentError::Config("agent did not answer".into()))?
    }

    /// Stops the loop, closing the connection, and returns final counters.
    pub fn shutdown(mut self) -> Result<CounterSnapshot, AgentError> {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            t.join().map_err(|_| AgentError::Config("agent thread panicked".into()))??;
        }
        Ok(self.counters.snapshot())
    }
}

impl Drop for AgentHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn bind(addr: SocketAddr) -> Result<UdpSocket, AgentError> {
    UdpSocket::bind(addr).map_err(|e| AgentError::BindFailure(format!("{addr}: {e}")))
}

fn send_all(socket: &UdpSocket, out: impl Iterator<Item = crate::transport::Outgoing>) {
    for o in out {
        if let Err(e) = socket.send_to(&o.data, o.dst) {
            tracing::debug!(error = %e, dst = %o.dst, "datagram not sent");
        }
    }
}

/// Starts the switch-side agent and waits for the first handshake outcome.
pub fn start_client(cfg: ClientConfig) -> Result<AgentHandle, AgentError> {
    cfg.validate()?;
    let of = bind(SocketAddr::new(cfg.local_host, cfg.openflow_port))?;
    let odb = bind(SocketAddr::new(cfg.local_host, cfg.ovsdb_port))?;
    let unspecified: SocketAddr =
        if cfg.server.is_ipv4() { "0.0.0.0:0".parse().expect("literal") } else { "[::]:0".parse().expect("literal") };
    let quic = bind(unspecified)?;
    let quic_addr = quic.local_addr()?;
    let daemon_addrs = [of.local_addr()?, odb.local_addr()?];
    let local = SocketAddr::new(if cfg.server.ip().is_loopback() { cfg.server.ip() } else { quic_addr.ip() }, quic_addr.port());
    let handshake_timeout = cfg.quic.handshake_timeout;
    let mut core = ClientCore::new(cfg, local)?;
    core.connect(Instant::now())?;
    let counters = core.counters();
    let stop = Arc::new(AtomicBool::new(false));
    let (started_tx, started_rx) = mpsc::channel();
    let (cmd_tx, cmd_rx) = mpsc::channel();
    let thread = {
        let stop = stop.clone();
        std::thread::Builder::new()
            .name("quicsb-client".into())
            .spawn(move || client_loop(core, quic, [of, odb], stop, started_tx, cmd_rx))?
    };
    let handle = AgentHandle { stop, thread: Some(thread), counters, commands: Some(cmd_tx), quic_addr, daemon_addrs };
    match started_rx.recv_timeout(handshake_timeout + Duration::from_secs(1)) {
        Ok(true) => Ok(handle),
        _ => {
            drop(handle);
            Err(AgentError::HandshakeTimeout)
        }
    }
}

fn client_loop(
    mut core: ClientCore,
    mut quic: UdpSocket,
    mut locals: [UdpSocket; 2],
    stop: Arc<AtomicBool>,
    started: mpsc::Sender<bool>,
    commands: mpsc::Receiver<Command>,
) -> Result<(), AgentError> {
    let mut poll = Poll::new()?;
    poll.registry().register(&mut quic, QUIC, Interest::READABLE)?;
    poll.registry().register(&mut locals[0], OPENFLOW, Interest::READABLE)?;
    poll.registry().register(&mut locals[1], OVSDB, Interest::READABLE)?;
    let ports = [core.config().openflow_port, core.config().ovsdb_port];
    let mut peers: [Option<SocketAddr>; 2] = [None, None];
    let mut events = Events::with_capacity(64);
    let mut buf = vec![0u8; core.config().recv_buffer];
    let counters = core.counters();
    let mut announced = false;
    while !stop.load(Ordering::Relaxed) {
        let now = Instant::now();
        let wait = core.poll_timeout().map_or(TICK, |t| t.saturating_duration_since(now).min(TICK));
        if let Err(e) = poll.poll(&mut events, Some(wait)) {
            if e.kind() != ErrorKind::Interrupted {
                return Err(e.into());
            }
        }
        let now = Instant::now();
        let mut deliveries = Vec::new();
        loop {
            match quic.recv_from(&mut buf) {
                Ok((n, from)) => deliveries.extend(core.feed_data(now, from, &buf[..n])),
                Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                Err(e) => {
                    tracing::debug!(error = %e, "quic socket read");
                    break;
                }
            }
        }
        for (i, sock) in locals.iter().enumerate() {
            while !core.is_backpressured() {
                match sock.recv_from(&mut buf) {
                    Ok((n, from)) => {
                        peers[i] = Some(from);
                        let _ = core.on_local_message(ports[i], Bytes::copy_from_slice(&buf[..n]));
                    }
                    Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                    Err(e) => {
                        tracing::debug!(error = %e, "local socket read");
                        break;
                    }
                }
            }
        }
        if core.poll_timeout().is_some_and(|t| t <= now) {
            deliveries.extend(core.handle_timeout(now));
        }
        deliver(&deliveries, &ports, &locals, &peers, &counters);
        while let Ok(cmd) = commands.try_recv() {
            match cmd {
                Command::Rebind(reply) => {
                    let result = rebind(&mut core, &mut quic, &poll, now);
                    let _ = reply.send(result);
                }
            }
        }
        if let Err(e) = core.flush_streams(now) {
            tracing::warn!(error = %e, "flush failed");
        }
        send_all(&quic, std::iter::from_fn(|| core.poll_transmit(now)));
        while let Some(ev) = core.poll_event() {
            match ev {
                TransportEvent::Connected { .. } if !announced => {
                    announced = true;
                    let _ = started.send(true);
                }
                TransportEvent::HandshakeTimeout if !announced => {
                    announced = true;
                    let _ = started.send(false);
                }
                _ => {}
            }
        }
    }
    let now = Instant::now();
    core.quic_mut().close(now, "agent stopped");
    send_all(&quic, std::iter::from_fn(|| core.poll_transmit(now)));
    Ok(())
}

fn rebind(core: &mut ClientCore, quic: &mut UdpSocket, poll: &Poll, now: Instant) -> Result<PathInfo, AgentError> {
    let ip = quic.local_addr()?.ip();
    let mut fresh = bind(SocketAddr::new(ip, 0))?;
    let port = fresh.local_addr()?.port();
    poll.registry().deregister(quic)?;
    poll.registry().register(&mut fresh, QUIC, Interest::READABLE)?;
    *quic = fresh;
    let local = SocketAddr::new(core.quic().local_addr().ip(), port);
    core.migrate(now, local)
}

fn deliver(
    deliveries: &[Delivery],
    ports: &[u16; 2],
    socks: &[UdpSocket; 2],
    peers: &[Option<SocketAddr>; 2],
    counters: &AgentCounters,
) {
    for d in deliveries {
        let i = usize::from(d.port != ports[0]);
        let sent = match peers[i] {
            Some(peer) => socks[i].send_to(&d.data, peer).is_ok(),
            None => socks[i].send(&d.data).is_ok(),
        };
        if !sent {
            bump(&counters.undeliverable, 1);
        }
    }
}

/// Starts the controller-side agent with northbound sockets connected to the
/// daemons.
pub fn start_server(cfg: ServerConfig) -> Result<AgentHandle, AgentError> {
    let creds = Arc::new(cfg.load_credentials()?);
    let mut listen = bind(cfg.listen)?;
    let quic_addr = listen.local_addr()?;
    let nb_bind = SocketAddr::new(cfg.daemon_host, 0);
    let nb: [UdpSocket; 2] = [bind(nb_bind)?, bind(nb_bind)?];
    for (sock, port) in nb.iter().zip([cfg.openflow_port, cfg.ovsdb_port]) {
        sock.connect(SocketAddr::new(cfg.daemon_host, port))
            .map_err(|e| AgentError::BindFailure(format!("connect to daemon port {port}: {e}")))?;
    }
    let daemon_addrs = [nb[0].local_addr()?, nb[1].local_addr()?];
    let core = ServerCore::new(quic_addr, creds, cfg.openflow_port, cfg.ovsdb_port, cfg.quic.clone())?
        .with_queue_capacity(cfg.queue_capacity);
    let counters = core.counters();
    let stop = Arc::new(AtomicBool::new(false));
    let poll = Poll::new()?;
    poll.registry().register(&mut listen, QUIC, Interest::READABLE)?;
    let thread = {
        let stop = stop.clone();
        std::thread::Builder::new()
            .name("quicsb-server".into())
            .spawn(move || server_loop(core, poll, listen, nb, stop))?
    };
    Ok(AgentHandle { stop, thread: Some(thread), counters, commands: None, quic_addr, daemon_addrs })
}

fn server_loop(
    mut core: ServerCore,
    mut poll: Poll,
    listen: UdpSocket,
    mut nb: [UdpSocket; 2],
    stop: Arc<AtomicBool>,
) -> Result<(), AgentError> {
    poll.registry().register(&mut nb[0], OPENFLOW, Interest::READABLE)?;
    poll.registry().register(&mut nb[1], OVSDB, Interest::READABLE)?;
    let ports = [core.conn_map().port_for(crate::codec::Protocol::OpenFlow), core.conn_map().port_for(crate::codec::Protocol::Ovsdb)];
    let counters = core.counters();
    let mut events = Events::with_capacity(64);
    let mut buf = vec![0u8; super::DEFAULT_RECV_BUFFER];
    while !stop.load(Ordering::Relaxed) {
        let now = Instant::now();
        let wait = core.poll_timeout().map_or(TICK, |t| t.saturating_duration_since(now).min(TICK));
        if let Err(e) = poll.poll(&mut events, Some(wait)) {
            if e.kind() != ErrorKind::Interrupted {
                return Err(e.into());
            }
        }
        let now = Instant::now();
        let mut deliveries = Vec::new();
        loop {
            match listen.recv_from(&mut buf) {
                Ok((n, from)) => deliveries.extend(core.accept_packet(now, from, &buf[..n])),
                Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                Err(e) => {
                    tracing::debug!(error = %e, "listen socket read");
                    break;
                }
            }
        }
        for (i, sock) in nb.iter().enumerate() {
            loop {
                match sock.recv(&mut buf) {
                    Ok(n) => {
                        let _ = core.forward_northbound(now, ports[i], Bytes::copy_from_slice(&buf[..n]));
                    }
                    Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                    Err(e) => {
                        // ICMP port unreachable from a daemon that is down.
                        tracing::debug!(error = %e, "northbound socket read");
                        break;
                    }
                }
            }
        }
        if core.poll_timeout().is_some_and(|t| t <= now) {
            deliveries.extend(core.handle_timeout(now));
        }
        deliver(&deliveries, &ports, &nb, &[None, None], &counters);
        if let Err(e) = core.flush_streams(now) {
            tracing::warn!(error = %e, "flush failed");
        }
        send_all(&listen, std::iter::from_fn(|| core.poll_transmit(now)));
        while core.poll_event().is_some() {}
    }
    let now = Instant::now();
    core.quic_mut().close(now, "agent stopped");
    send_all(&listen, std::iter::from_fn(|| core.poll_transmit(now)));
    Ok(())
}
