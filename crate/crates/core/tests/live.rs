use std::net::{SocketAddr, UdpSocket};
use std::path::PathBuf;
use std::thread;
use std::time::{Duration, Instant};

use quicsb::agent::live::{start_client, start_server};
use quicsb::agent::{ClientConfig, ServerConfig};
use quicsb::endpoints::live::{run_controller, run_switch, DaemonHandle, Workload};
use quicsb::endpoints::{ServiceState, SwitchConfig, TransportSpec};

fn certs() -> (PathBuf, PathBuf) {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("certs");
    (dir.join("server.key"), dir.join("server.crt"))
}

fn free_udp_port() -> u16 {
    UdpSocket::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn spec(scheme: &str, addr: SocketAddr) -> TransportSpec {
    format!("{scheme}:{addr}").parse().unwrap()
}

fn wait_for(limit: Duration, mut done: impl FnMut() -> bool) -> bool {
    let end = Instant::now() + limit;
    while Instant::now() < end {
        if done() {
            return true;
        }
        thread::sleep(Duration::from_millis(20));
    }
    done()
}

fn controller(workload: Workload) -> (DaemonHandle, u16, u16) {
    let any: SocketAddr = "127.0.0.1:0".parse().unwrap();
    let ctl = run_controller(spec("udp", any), spec("udp", any), workload).unwrap();
    let ports = (ctl.local_addrs[0].unwrap().port(), ctl.local_addrs[1].unwrap().port());
    (ctl, ports.0, ports.1)
}

#[test]
fn daemons_talk_through_the_agents() {
    let (ctl, of_port, ovsdb_port) =
        controller(Workload { flow_mods_per_sec: 50.0, transacts_per_sec: 10.0, poll_interval: Some(Duration::from_millis(300)) });
    let (key, cert) = certs();
    let mut scfg = ServerConfig::new("127.0.0.1:0".parse().unwrap(), key, cert);
    scfg.openflow_port = of_port;
    scfg.ovsdb_port = ovsdb_port;
    let server = start_server(scfg).unwrap();

    let mut ccfg = ClientConfig::new(server.quic_addr);
    ccfg.openflow_port = free_udp_port();
    ccfg.ovsdb_port = free_udp_port();
    ccfg.pinned_cert = Some(quicsb::transport::demo_certificate());
    let client = start_client(ccfg.clone()).unwrap();
    let to = |port| spec("udp", SocketAddr::new(ccfg.local_host, port));
    let switch = run_switch(to(ccfg.openflow_port), to(ccfg.ovsdb_port), SwitchConfig::default()).unwrap();

    let ok = wait_for(Duration::from_secs(10), || {
        let s = switch.status();
        let c = ctl.status();
        let sw = s.switch.unwrap_or_default();
        let cc = c.controller.unwrap_or_default();
        sw.flow_mods >= 20 && sw.transacts >= 3 && cc.stats_replies >= 2 && cc.acks > 0
    });
    let (sw, cc) = (switch.shutdown(), ctl.shutdown());
    let (cs, ss) = (client.shutdown().unwrap(), server.shutdown().unwrap());
    assert!(ok, "switch {sw:?} controller {cc:?}");
    assert!(sw.states.iter().all(|s| *s == ServiceState::Active));
    assert!(sw.flow_table >= 20);
    assert!(cs.delivered_openflow > 0 && ss.delivered_openflow > 0 && ss.delivered_ovsdb > 0, "client {cs:?} server {ss:?}");
}

#[test]
fn wrong_pin_never_connects() {
    let (key, cert) = certs();
    let server = start_server(ServerConfig::new("127.0.0.1:0".parse().unwrap(), key, cert)).unwrap();
    let mut ccfg = ClientConfig::new(server.quic_addr);
    ccfg.openflow_port = free_udp_port();
    ccfg.ovsdb_port = free_udp_port();
    ccfg.pinned_cert = Some(b"not the certificate".to_vec());
    ccfg.quic.handshake_timeout = Duration::from_secs(1);
    assert!(start_client(ccfg).is_err());
}
