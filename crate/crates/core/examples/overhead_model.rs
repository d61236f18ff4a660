//! Exact overhead predictions for a message set, checked against the
//! packet-by-packet oracle.

use quicsb::overhead::{o_quic, o_tcp, packetization_oracle, parse_ratio, OverheadParams, Transport};

fn main() -> anyhow::Result<()> {
    let messages = [64u64, 104, 1500, 9000, 70_000];
    let p = OverheadParams::default();
    let tcp = o_tcp(&messages, &p)?;
    println!("tcp  overhead {} (oracle {})", tcp.render(), packetization_oracle(&messages, Transport::Tcp, &p)?.render());
    for s in ["1", "3/2", "2", "4"] {
        let s = parse_ratio(s).map_err(anyhow::Error::msg)?;
        let quic = o_quic(&messages, s, &p)?;
        println!("quic overhead {} with {s} streams per packet", quic.render());
    }
    let jumbo = OverheadParams { mtu: 9000, ..p };
    println!("jumbo frames: tcp {} quic {}", o_tcp(&messages, &jumbo)?.render(), o_quic(&messages, jumbo.streams, &jumbo)?.render());
    Ok(())
}
