//! Real sockets on loopback: controller daemons, both agents and the switch
//! daemons, with a small flow-install and polling workload for three seconds.

use std::net::{SocketAddr, UdpSocket};
use std::path::PathBuf;
use std::time::Duration;

use quicsb::agent::live::{start_client, start_server};
use quicsb::agent::{ClientConfig, ServerConfig};
use quicsb::endpoints::live::{run_controller, run_switch, Workload};
use quicsb::endpoints::SwitchConfig;

fn main() -> anyhow::Result<()> {
    let any = "udp:127.0.0.1:0".parse()?;
    let workload =
        Workload { flow_mods_per_sec: 20.0, transacts_per_sec: 5.0, poll_interval: Some(Duration::from_secs(1)) };
    let ctl = run_controller(any, "udp:127.0.0.1:0".parse()?, workload)?;
    let port = |i: usize| ctl.local_addrs[i].map(|a| a.port()).ok_or_else(|| anyhow::anyhow!("daemon not bound"));

    let certs = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("certs");
    let mut scfg = ServerConfig::new("127.0.0.1:0".parse()?, certs.join("server.key"), certs.join("server.crt"));
    scfg.openflow_port = port(0)?;
    scfg.ovsdb_port = port(1)?;
    let server = start_server(scfg)?;
    println!("server agent on {}", server.quic_addr);

    let free = || -> anyhow::Result<u16> { Ok(UdpSocket::bind("127.0.0.1:0")?.local_addr()?.port()) };
    let mut ccfg = ClientConfig::new(server.quic_addr);
    ccfg.openflow_port = free()?;
    ccfg.ovsdb_port = free()?;
    let client = start_client(ccfg.clone())?;
    println!("client agent on {}", client.quic_addr);

    let to = |p: u16| format!("udp:{}", SocketAddr::new(ccfg.local_host, p)).parse();
    let switch = run_switch(to(ccfg.openflow_port)?, to(ccfg.ovsdb_port)?, SwitchConfig::default())?;
    std::thread::sleep(Duration::from_secs(3));

    let sw = switch.shutdown();
    let cc = ctl.shutdown();
    println!("switch: {:?}, {} flows installed", sw.switch.unwrap_or_default(), sw.flow_table);
    println!("controller: {:?}", cc.controller.unwrap_or_default());
    println!("client agent: {:?}", client.shutdown()?);
    println!("server agent: {:?}", server.shutdown()?);
    Ok(())
}
