//! Runs a short stats-poll workload over quic, writes the capture to a temp
//! file and sums it again from disk.

use quicsb::harness::{analyze_capture, run_experiment_with, Experiment, ExperimentConfig, FlowFilter, TransportKind};

fn main() -> anyhow::Result<()> {
    let cfg = ExperimentConfig { duration: 3.0, ..ExperimentConfig::new(Experiment::StatsPoll, TransportKind::Quic) };
    let path = std::env::temp_dir().join("quicsb-stats-poll.pcap");
    let report = run_experiment_with(&cfg, |_, pcap| Ok(std::fs::write(&path, pcap)?))?;
    println!("wrote {}", path.display());

    let summary = analyze_capture(&std::fs::read(&path)?, &FlowFilter::any())?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    println!("report said {} wire bytes", report.representative().traffic.wire_bytes);
    Ok(())
}
