//! Builds and reframes the control messages the workloads use.

use quicsb::codec::{
    flow_mod_len, multipart_reply_total_len, parse_ovsdb, synth_queue_transact, Codec, Framer, Protocol,
};

fn main() -> anyhow::Result<()> {
    let codec = Codec::default();
    let fm = codec.synth_flow_mod(3, 2, 42)?;
    println!("flow mod with 3 match fields and 2 actions: {} B (expected {})", fm.len(), flow_mod_len(3, 2));

    let parts = codec.synth_multipart_reply(2000, 7);
    let total: usize = parts.iter().map(|m| m.len()).sum();
    println!("stats reply for 2000 flows: {} parts, {total} B (expected {})", parts.len(), multipart_reply_total_len(2000));

    // Glue the parts into one byte stream and cut it in odd places.
    let stream: Vec<u8> = parts.iter().flat_map(|m| m.payload.iter().copied()).collect();
    let mut framer = Framer::new(Protocol::OpenFlow);
    let mut recovered = 0;
    for chunk in stream.chunks(999) {
        framer.push(chunk);
        while framer.next_message()?.is_some() {
            recovered += 1;
        }
    }
    println!("reframed {recovered} OpenFlow messages");

    let tx = synth_queue_transact(1, (1_000_000, 10_000_000));
    let v = parse_ovsdb(&tx.payload)?;
    println!("OVSDB transact ({} B): method {}", tx.len(), v["method"]);
    Ok(())
}
