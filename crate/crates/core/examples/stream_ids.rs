//! Stream labels: OpenFlow on multiples of three, OVSDB on the other even ids.

use quicsb::codec::Protocol;
use quicsb::mux::{classify, MuxPolicy, StreamMode};

fn main() -> anyhow::Result<()> {
    let mut per_message = MuxPolicy::new(StreamMode::PerMessage);
    let of: Vec<u64> = (0..5).map(|_| per_message.generate(Protocol::OpenFlow).map(|l| l.get())).collect::<Result<_, _>>()?;
    let odb: Vec<u64> = (0..5).map(|_| per_message.generate(Protocol::Ovsdb).map(|l| l.get())).collect::<Result<_, _>>()?;
    println!("openflow ids {of:?}");
    println!("ovsdb ids    {odb:?}");

    let mut long_lived = MuxPolicy::new(StreamMode::PerProtocol);
    let a = long_lived.label_for(Protocol::OpenFlow)?;
    let b = long_lived.label_for(Protocol::OpenFlow)?;
    println!("per-protocol mode reuses stream {} for every OpenFlow message: {}", a.get(), a == b);

    for id in [0, 4, 12, 7] {
        match classify(id) {
            Ok(p) => println!("stream {id}: {p:?}"),
            Err(e) => println!("stream {id}: {e}"),
        }
    }
    Ok(())
}
