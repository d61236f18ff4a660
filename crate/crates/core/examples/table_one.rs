//! Runs the three overhead scenarios over both transports and prints the
//! comparison table. Pass `--tcp-tls` to frame the tcp baseline as TLS records.

use quicsb::harness::{compare, render_table, run_experiment, Experiment, ExperimentConfig, TransportKind};

fn main() -> anyhow::Result<()> {
    let tcp_tls = std::env::args().any(|a| a == "--tcp-tls");
    let scenarios = [
        (Experiment::FlowInstall, 10.0),
        (Experiment::FlowInstall, 100.0),
        (Experiment::FlowInstall, 1000.0),
        (Experiment::QueueConfig, 100.0),
        (Experiment::StatsPoll, 1.0),
    ];
    let mut reports = Vec::new();
    for (experiment, rate) in scenarios {
        for transport in [TransportKind::Tcp, TransportKind::Quic] {
            let cfg = ExperimentConfig { rate, tcp_tls, repeats: 3, ..ExperimentConfig::new(experiment, transport) };
            reports.push(run_experiment(&cfg)?);
        }
    }
    print!("{}", render_table(&compare(&reports)?));
    Ok(())
}
