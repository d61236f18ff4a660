//! Breaks the switch host's path halfway through a polling-driven transfer
//! and compares how much reply data each transport ends up moving.

use quicsb::harness::{run_migration, Experiment, ExperimentConfig, TransportKind};

fn main() -> anyhow::Result<()> {
    let cfg = ExperimentConfig::new(Experiment::Migration, TransportKind::Quic);
    let cmp = run_migration(&cfg)?;
    println!("file size {} bytes, break at {:?} s", cmp.file_bytes, cfg.break_at);
    for t in [&cmp.quic, &cmp.tcp] {
        println!(
            "{:<4} moved {:>10} bytes ({:.2}x) in {} attempt(s), resets {}, done at {:?} s",
            t.transport.to_string(),
            t.total_payload,
            t.ratio(),
            t.attempts,
            t.resets(),
            t.completed_at
        );
    }
    println!("quic stream offsets before {:?}", cmp.quic.offsets_before);
    println!("quic stream offsets after  {:?}", cmp.quic.offsets_after);
    Ok(())
}
