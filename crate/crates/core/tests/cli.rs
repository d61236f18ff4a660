use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn quicsb(args: &[&str], dir: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_quicsb")).args(args).current_dir(dir).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json_stdout(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn predict_matches_hand_count() {
    let dir = tempfile::tempdir().unwrap();
    // 3000 B over tcp: MSS 1448 gives 3 segments, each with a 52 B header and a 52 B ACK.
    let v = json_stdout(&quicsb(&["predict", "--messages", "3000", "--transport", "tcp"], dir.path()));
    assert_eq!(v["predicted_bytes"], 312.0);
    // 3000 B over quic: 1457 B frames, 3 packets at 43 B.
    let v = json_stdout(&quicsb(&["predict", "--messages", "3000", "--transport", "quic"], dir.path()));
    assert_eq!(v["predicted_bytes"], 129.0);
}

#[test]
fn predict_reads_sizes_from_a_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("sizes.txt"), "100\n200\n").unwrap();
    let v = json_stdout(&quicsb(&["predict", "--messages", "sizes.txt", "--transport", "tcp"], dir.path()));
    assert_eq!(v["messages"], 2);
    assert_eq!(v["payload_bytes"], 300);
}

#[test]
fn run_compare_and_analyze_agree() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for t in ["tcp", "quic"] {
        quicsb(
            &["run", "--experiment", "queue-config", "--transport", t, "--duration", "2", "--out", &format!("{t}.json"), "--pcap-out", &format!("{t}.pcap")],
            d,
        );
    }
    let out = quicsb(&["compare", "tcp.json", "quic.json", "--out", "rows.json"], d);
    assert!(String::from_utf8_lossy(&out.stdout).contains("queue-config"));
    let rows: Value = serde_json::from_slice(&std::fs::read(d.join("rows.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 1);

    let report: Value = serde_json::from_slice(&std::fs::read(d.join("quic.json")).unwrap()).unwrap();
    let analyzed = json_stdout(&quicsb(&["analyze", "--pcap", "quic.pcap"], d));
    assert_eq!(analyzed["report"]["wire_bytes"], report["runs"][0]["traffic"]["wire_bytes"]);
}

#[test]
fn migration_run_writes_both_traces() {
    let dir = tempfile::tempdir().unwrap();
    quicsb(&["run", "--experiment", "migration", "--n-flows", "500", "--duration", "2", "--break-at", "1", "--out", "m.json"], dir.path());
    let v: Value = serde_json::from_slice(&std::fs::read(dir.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(v["tcp"]["attempts"], 2);
    assert_eq!(v["quic"]["attempts"], 1);
}

#[test]
fn bad_arguments_fail() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["run", "--experiment", "flow-install", "--rate", "0"][..],
        &["predict", "--messages", "10,x", "--transport", "tcp"],
        &["compare", "missing.json"],
        &["switch", "--controller", "sctp:1.2.3.4:1", "--manager", "udp:1.2.3.4:2"],
    ] {
        let out = Command::new(env!("CARGO_BIN_EXE_quicsb")).args(args).current_dir(dir.path()).output().unwrap();
        assert!(!out.status.success(), "{args:?} should fail");
    }
}
