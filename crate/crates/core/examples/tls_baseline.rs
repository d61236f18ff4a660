//! Flow install over quic, plain tcp and tcp with TLS record framing.

use quicsb::harness::{reduction_pct, run_experiment, Experiment, ExperimentConfig, TransportKind};

fn main() -> anyhow::Result<()> {
    let run = |transport, tcp_tls| {
        let cfg = ExperimentConfig { tcp_tls, ..ExperimentConfig::new(Experiment::FlowInstall, transport) };
        run_experiment(&cfg).map(|r| r.wire_bytes.median)
    };
    let quic = run(TransportKind::Quic, false)?;
    let tcp = run(TransportKind::Tcp, false)?;
    let tls = run(TransportKind::Tcp, true)?;
    println!("quic {quic:.0} B, tcp {tcp:.0} B, tcp+tls {tls:.0} B");
    println!("reduction vs tcp {:.2}%, vs tcp+tls {:.2}%", reduction_pct(tcp, quic), reduction_pct(tls, quic));
    Ok(())
}
