//! Two connections sharing a session file: the second sends application
//! data in its first flight.

use std::time::{Duration, Instant};

use quicsb::codec::Codec;
use quicsb::harness::sim::LinkConfig;
use quicsb::harness::southbound::{PathConfig, QuicPath, Side, Southbound};
use quicsb::transport::TransportEvent;

/// Returns whether 0-RTT was accepted and when the hello reached the controller.
fn connect_once(session_file: &std::path::Path) -> (bool, Option<Duration>) {
    let cfg = PathConfig {
        link: LinkConfig { delay: Duration::from_millis(25), ..Default::default() },
        session_file: Some(session_file.to_path_buf()),
        ..PathConfig::default()
    };
    let t0 = Instant::now();
    let mut now = t0;
    let mut path = QuicPath::new(&cfg, now);
    path.send(now, Side::Switch, &Codec::default().hello(1));
    path.start(now);
    let mut delivered = None;
    // Long enough for the session ticket to arrive and be saved.
    while now < t0 + Duration::from_secs(1) {
        now += Duration::from_millis(1);
        if path.advance(now).iter().any(|a| a.to == Side::Controller) && delivered.is_none() {
            delivered = Some(now - t0);
        }
    }
    let resumed = path.events().iter().any(|(_, e)| matches!(e, TransportEvent::Connected { resumed: true }));
    (resumed, delivered)
}

fn main() -> anyhow::Result<()> {
    let dir = std::env::temp_dir().join(format!("quicsb-0rtt-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let file = dir.join("session.bin");
    for round in 1..=2 {
        let (resumed, delivered) = connect_once(&file);
        println!("connection {round} over a 50 ms RTT: 0-RTT accepted {resumed}, hello delivered after {delivered:?}");
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
