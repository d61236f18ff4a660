mod common;

use std::time::{Duration, Instant};

use bytes::Bytes;
use common::{connect, drive, exchange, observe_connection, rng, tagged_message};
use quicsb::agent::live::start_client;
use quicsb::agent::{AgentError, ClientConfig, ServerConfig};
use quicsb::codec::{Codec, Protocol};
use quicsb::harness::sim::LinkConfig;
use quicsb::harness::southbound::{build_path, PathConfig, QuicPath, Side, Southbound, TransportKind};
use quicsb::mux::{classify, StreamMode};
use rand::Rng;

#[test]
fn interleaved_messages_arrive_once_in_order_on_their_protocol() {
    let mut path = QuicPath::new(&PathConfig::default(), Instant::now());
    let (sent, received, _) = exchange(&mut path, 10_000, 7);
    for (key, msgs) in &sent {
        let got = received.get(key).map_or(&[][..], |v| v.as_slice());
        assert_eq!(got.len(), msgs.len(), "{key:?}");
        assert!(got == msgs.as_slice(), "{key:?} differs");
    }
    assert_eq!(received.keys().len(), sent.keys().len());
    assert_eq!(path.stats().undeliverable, 0);
}

#[test]
fn openflow_and_ovsdb_use_their_stream_classes() {
    let mut path = QuicPath::new(&PathConfig::default(), Instant::now());
    let mut rng = rng(3);
    let mut now = Instant::now();
    connect(&mut path, &mut now);
    for seq in 0..200 {
        let p = if rng.random_bool(0.5) { Protocol::OpenFlow } else { Protocol::Ovsdb };
        path.send(now, Side::Switch, &tagged_message(&mut rng, p, seq));
    }
    let got = drive(&mut path, &mut now, Duration::from_secs(1));
    assert_eq!(got.len(), 200);
    for a in got {
        let id = a.label.expect("quic arrivals carry a label").get();
        assert_eq!(classify(id).unwrap(), a.protocol);
        match a.protocol {
            Protocol::OpenFlow => assert_eq!(id % 3, 0),
            Protocol::Ovsdb => assert!(id % 2 == 0 && id % 3 != 0),
        }
    }
}

#[test]
fn per_message_streams_keep_parity_and_order() {
    let cfg = PathConfig { stream_mode: StreamMode::PerMessage, ..Default::default() };
    let mut path = QuicPath::new(&cfg, Instant::now());
    let (sent, received, labels) = exchange(&mut path, 500, 11);
    for (key, msgs) in &sent {
        if key.0 == Side::Controller {
            assert_eq!(received.get(key), Some(msgs), "{key:?}");
        }
    }
    for (protocol, id) in &labels {
        assert_eq!(classify(id.expect("quic label")).unwrap(), *protocol);
    }
    let mut distinct: Vec<u64> = labels.into_iter().filter_map(|(_, id)| id).collect();
    distinct.sort_unstable();
    distinct.dedup();
    assert!(distinct.len() > 2);
}

#[test]
fn quic_and_tcp_carry_identical_sequences() {
    let run = |kind| {
        let mut path = build_path(kind, &PathConfig::default(), Instant::now());
        let (sent, received, _) = exchange(path.as_mut(), 2_000, 5);
        assert_eq!(sent, received, "{kind}");
        received
    };
    assert_eq!(run(TransportKind::Quic), run(TransportKind::Tcp));
}

#[test]
fn second_connection_sends_data_before_server_replies() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("session.bin");
    let rtt = Duration::from_millis(50);
    let first = observe_connection(&file, rtt, 1);
    assert!(!first.resumed);
    assert!(!first.app_before_reply(), "{first:?}");
    assert!(first.first_client_app.unwrap() >= rtt);
    assert!(file.exists());
    let second = observe_connection(&file, rtt, 2);
    assert!(second.resumed);
    assert!(second.app_before_reply(), "{second:?}");
    assert_eq!(second.first_client_app, Some(Duration::ZERO));
}

#[test]
fn migration_keeps_delivering_on_the_same_streams() {
    let mut path = QuicPath::new(&PathConfig::default(), Instant::now());
    let mut now = Instant::now();
    connect(&mut path, &mut now);
    let codec = Codec::default();
    path.send(now, Side::Switch, &codec.hello(1));
    let before = drive(&mut path, &mut now, Duration::from_millis(50));
    let old = path.client_addr();
    path.path_down(now);
    drive(&mut path, &mut now, Duration::from_millis(300));
    path.path_up(now);
    assert_ne!(path.client_addr(), old);
    path.send(now, Side::Switch, &codec.hello(2));
    let after = drive(&mut path, &mut now, Duration::from_secs(2));
    assert_eq!(after.len(), 1);
    assert_eq!(after[0].label, before[0].label);
    assert_eq!(after[0].data, codec.hello(2).payload);
    assert!(path.failure().is_none());
}

#[test]
fn loss_and_jitter_do_not_break_identity() {
    let cfg = PathConfig {
        link: LinkConfig { loss: 0.02, jitter: Duration::from_millis(3), ..Default::default() },
        ..Default::default()
    };
    let mut path = QuicPath::new(&cfg, Instant::now());
    let (sent, received, _) = exchange(&mut path, 1_000, 9);
    assert_eq!(sent, received);
    assert!(path.link().dropped() > 0);
}

#[test]
fn unknown_origin_port_is_rejected() {
    let mut path = QuicPath::new(&PathConfig::default(), Instant::now());
    let mut client = quicsb::agent::ClientCore::new(
        ClientConfig::new("10.0.0.2:4433".parse().unwrap()),
        "10.0.0.1:50000".parse().unwrap(),
    )
    .unwrap();
    let err = client.on_local_message(9999, Bytes::from_static(b"x")).unwrap_err();
    assert!(matches!(err, AgentError::UnknownOrigin(9999)));
    assert_eq!(client.counters().snapshot().dropped_unknown_origin, 1);
    // The controller side holds replies until the switch opens the stream.
    let mut now = Instant::now();
    connect(&mut path, &mut now);
    path.send(now, Side::Controller, &Codec::default().hello(5));
    assert!(drive(&mut path, &mut now, Duration::from_millis(100)).is_empty());
    assert_eq!(path.server().queued(), 1);
    path.send(now, Side::Switch, &Codec::default().hello(6));
    let got = drive(&mut path, &mut now, Duration::from_millis(100));
    assert_eq!(got.len(), 2);
}

#[test]
fn equal_daemon_ports_fail_to_bind() {
    let mut cfg = ClientConfig::new("127.0.0.1:4433".parse().unwrap());
    cfg.ovsdb_port = cfg.openflow_port;
    assert!(matches!(start_client(cfg), Err(AgentError::BindFailure(_))));
}

#[test]
fn missing_key_is_bad_credentials() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ServerConfig::new("127.0.0.1:0".parse().unwrap(), dir.path().join("key.pem"), dir.path().join("cert.pem"));
    assert!(matches!(quicsb::agent::live::start_server(cfg), Err(AgentError::BadCredentials(_))));
}
