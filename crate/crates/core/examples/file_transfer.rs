//! Sends a 10 MB statistics reply over each transport and compares the
//! captured overhead with the analytical models.

use quicsb::harness::{run_experiment, Experiment, ExperimentConfig, TransportKind};

fn main() -> anyhow::Result<()> {
    for transport in [TransportKind::Tcp, TransportKind::Quic] {
        let report = run_experiment(&ExperimentConfig::new(Experiment::FileTransfer, transport))?;
        let run = report.representative();
        let t = &run.traffic;
        println!(
            "{transport:<4} payload {:>9} wire {:>9} overhead {:>7} packets {:>6} s={:?}",
            t.payload_bytes, t.wire_bytes, t.overhead_bytes, t.packets, run.streams_per_packet
        );
        if let Some(p) = &run.prediction {
            println!("     predicted overhead {:.0}, error {:.2}%", p.predicted_overhead, p.error_pct);
        }
    }
    Ok(())
}
