//! Experiment configuration and the virtual-time driver.

use std::net::SocketAddr;
use std::time::{Duration, Instant};

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pcap::{analyze_capture, FlowFilter};
use super::report::{ExperimentReport, Prediction, RunRecord, TrafficReport};
use super::sim::LinkConfig;
use super::southbound::{build_path, Arrival, PathConfig, Side, Southbound, TransportKind, CONTROLLER_HOST, SWITCH_HOST};
use super::tcp::{AckPolicy, TcpParams};
use super::HarnessError;
use crate::codec::{decode_openflow_header, multipart_reply_total_len, ControlMessage, Protocol, FLOW_STATS_LEN, OFPT_MULTIPART_REPLY};
use crate::endpoints::{Controller, Switch, SwitchConfig};
use crate::mux::StreamMode;
use crate::overhead::{model_error, o_quic, o_tcp, OverheadParams, Q};

/// Highest event rate accepted without `unsafe_rates`.
pub const SAFE_RATE_LIMIT: f64 = 1000.0;
const CONNECT_TIMEOUT: Duration = Duration::from_secs(15);
const SETTLE: Duration = Duration::from_millis(200);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    /// FLOW_MODs at `rate`, each answered by a barrier reply.
    FlowInstall,
    /// OVSDB queue inserts at `rate`, each answered by an update.
    QueueConfig,
    /// Flow statistics polls at `rate` against `n_flows` installed flows.
    StatsPoll,
    /// One statistics reply of `file_bytes`, sent as fast as the path allows.
    FileTransfer,
    /// Polling-driven transfer with a path break at `break_at`.
    Migration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub transport: TransportKind,
    /// Events per second.
    pub rate: f64,
    /// Seconds of workload.
    pub duration: f64,
    pub n_flows: usize,
    pub match_fields: usize,
    pub actions: usize,
    pub file_bytes: u64,
    /// Seconds after the workload starts.
    pub break_at: Option<f64>,
    /// Seconds the switch host stays unreachable.
    pub down_for: f64,
    pub repeats: usize,
    pub seed: u64,
    pub link: LinkConfig,
    /// Seconds between inactivity probes; `None` disables them.
    pub probe_interval: Option<f64>,
    /// Seconds after the workload during which replies are still counted.
    pub drain: f64,
    pub delayed_ack: bool,
    /// TLS record framing on the tcp baseline.
    pub tcp_tls: bool,
    pub stream_mode: StreamMode,
    pub unsafe_rates: bool,
}

impl ExperimentConfig {
    /// Desk-scale defaults for each experiment.
    pub fn new(experiment: Experiment, transport: TransportKind) -> Self {
        let base = Self {
            experiment,
            transport,
            rate: 10.0,
            duration: 10.0,
            n_flows: 100,
            match_fields: 1,
            actions: 1,
            file_bytes: 10_000_000,
            break_at: None,
            down_for: 0.5,
            repeats: 1,
            seed: 1,
            link: LinkConfig::default(),
            probe_interval: Some(5.0),
            drain: 1.0,
            delayed_ack: false,
            tcp_tls: false,
            stream_mode: StreamMode::PerProtocol,
            unsafe_rates: false,
        };
        match experiment {
            Experiment::FlowInstall => base,
            Experiment::QueueConfig => Self { rate: 100.0, ..base },
            Experiment::StatsPoll => Self { rate: 1.0, ..base },
            Experiment::FileTransfer => Self { rate: 1.0, duration: 1.0, probe_interval: None, ..base },
            Experiment::Migration => {
                Self { rate: 1.0, n_flows: 10_000, break_at: Some(5.0), probe_interval: None, ..base }
            }
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidConfig(m));
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return bad(format!("rate must be positive, got {}", self.rate));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        if self.rate > SAFE_RATE_LIMIT && !self.unsafe_rates {
            return bad(format!("rate {} exceeds {SAFE_RATE_LIMIT}/s; pass --unsafe-rates to allow it", self.rate));
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if self.link.mtu != 1500 {
            return bad(format!("accounting assumes a 1500 byte MTU, got {}", self.link.mtu));
        }
        if !(0.0..1.0).contains(&self.link.loss) {
            return bad(format!("loss must be in [0, 1), got {}", self.link.loss));
        }
        if self.experiment == Experiment::Migration {
            match self.break_at {
                Some(b) if b >= 0.0 && b < self.duration => {}
                Some(b) => return bad(format!("break_at {b} must lie in [0, duration {})", self.duration)),
                None => {}
            }
            if self.down_for < 0.0 {
                return bad("down_for must not be negative".into());
            }
        }
        if self.experiment == Experiment::FileTransfer && self.file_bytes == 0 {
            return bad("file_bytes must be positive".into());
        }
        Ok(())
    }

    /// Key that pairs a quic report with its tcp counterpart.
    pub fn scenario(&self) -> String {
        match self.experiment {
            Experiment::FlowInstall => format!("flow-install@{}/s", self.rate),
            Experiment::QueueConfig => format!("queue-config@{}/s", self.rate),
            Experiment::StatsPoll => format!("stats-poll@{}/s,n={}", self.rate, self.n_flows),
            Experiment::FileTransfer => format!("file-transfer,{}B", self.file_bytes),
            Experiment::Migration => format!("migration@{}/s,n={}", self.rate, self.n_flows),
        }
    }

    fn path_config(&self, seed: u64) -> PathConfig {
        let ack = if self.delayed_ack {
            AckPolicy::Delayed { every: 2, timeout: Duration::from_millis(40) }
        } else {
            AckPolicy::PerSegment
        };
        PathConfig {
            link: self.link.clone(),
            seed,
            stream_mode: self.stream_mode,
            session_file: None,
            tcp: TcpParams { ack, ..TcpParams::for_mtu(self.link.mtu) },
            tcp_tls: self.tcp_tls,
        }
    }

    fn switch_config(&self) -> SwitchConfig {
        let initial_flows = match self.experiment {
            Experiment::FileTransfer => (self.file_bytes as usize).div_ceil(FLOW_STATS_LEN),
            Experiment::StatsPoll | Experiment::Migration => self.n_flows,
            _ => 0,
        };
        SwitchConfig {
            probe_interval: self.probe_interval.map(Duration::from_secs_f64),
            initial_flows,
            ..SwitchConfig::default()
        }
    }
}

/// Both daemons and the path between them, advanced in virtual time.
pub(crate) struct Bench {
    pub path: Box<dyn Southbound>,
    pub switch: Switch,
    pub controller: Controller,
    pub now: Instant,
    pub recording: bool,
    /// Application bytes handed to the path while recording: (up, down).
    pub offered: (u64, u64),
    pub message_sizes: Vec<u64>,
    /// Multipart reply bytes that reached the controller.
    pub stats_bytes: u64,
}

impl Bench {
    pub fn new(cfg: &ExperimentConfig, transport: TransportKind, seed: u64) -> Self {
        let origin = Instant::now();
        Self {
            path: build_path(transport, &cfg.path_config(seed), origin),
            switch: Switch::new(cfg.switch_config()),
            controller: Controller::default(),
            now: origin,
            recording: false,
            offered: (0, 0),
            message_sizes: Vec::new(),
            stats_bytes: 0,
        }
    }

    /// Connects the path and lets the daemons greet each other.
    pub fn connect(&mut self) -> Result<(), HarnessError> {
        self.path.start(self.now);
        let limit = self.now + CONNECT_TIMEOUT;
        while !self.path.is_ready() {
            let Some(next) = self.path.poll_deadline() else { break };
            if next > limit {
                break;
            }
            self.run_until(next);
        }
        if !self.path.is_ready() {
            return Err(HarnessError::LaunchFailure(format!("{} path did not connect", self.path.kind())));
        }
        self.greet();
        let t = self.now + SETTLE;
        self.run_until(t);
        Ok(())
    }

    pub fn greet(&mut self) {
        for p in [Protocol::OpenFlow, Protocol::Ovsdb] {
            let hello = self.switch.hello(p);
            self.send(Side::Switch, &hello);
        }
    }

    pub fn start_recording(&mut self) {
        self.recording = true;
        self.path.link_mut().tap_mut().start();
        self.switch.start_probes(self.now);
    }

    pub fn stop_recording(&mut self) {
        self.recording = false;
        self.path.link_mut().tap_mut().stop();
    }

    pub fn send(&mut self, from: Side, msg: &ControlMessage) {
        if self.recording {
            match from {
                Side::Switch => self.offered.0 += msg.len() as u64,
                Side::Controller => self.offered.1 += msg.len() as u64,
            }
            self.message_sizes.push(msg.len() as u64);
        }
        self.path.send(self.now, from, msg);
    }

    fn dispatch(&mut self, arrivals: Vec<Arrival>) {
        for a in arrivals {
            let replies = match a.to {
                Side::Controller => {
                    if is_multipart_reply(a.protocol, &a.data) {
                        self.stats_bytes += a.data.len() as u64;
                    }
                    self.controller.handle_bytes(a.protocol, a.data)
                }
                Side::Switch => self.switch.handle_bytes(a.protocol, a.data),
            };
            for r in replies {
                self.send(a.to, &r);
            }
        }
    }

    /// Processes every event up to and including `t`, then sets the clock
    /// to `t`.
    pub fn run_until(&mut self, t: Instant) {
        let mut stalled = 0u32;
        loop {
            let next = [self.path.poll_deadline(), self.switch.next_probe()].into_iter().flatten().min();
            let Some(next) = next.filter(|n| *n <= t) else { break };
            if next <= self.now {
                stalled += 1;
                if stalled > 1000 {
                    // a timer that keeps re-arming in the past; let time move
                    self.now += Duration::from_micros(100);
                    stalled = 0;
                }
            } else {
                self.now = next;
                stalled = 0;
            }
            let arrivals = self.path.advance(self.now);
            self.dispatch(arrivals);
            let probes = self.switch.poll_probe(self.now);
            for p in probes {
                self.send(Side::Switch, &p);
            }
        }
        self.now = self.now.max(t);
        let arrivals = self.path.advance(self.now);
        self.dispatch(arrivals);
    }

    /// Closes the measurement window and accounts it.
    pub fn account(&mut self, seed: u64, duration: f64) -> Result<RunRecord, HarnessError> {
        self.stop_recording();
        let tap = self.path.link().tap();
        let filter = FlowFilter::new(vec![SocketAddr::new(SWITCH_HOST, 0), SocketAddr::new(CONTROLLER_HOST, 0)]);
        let summary = analyze_capture(tap.pcap(), &filter)?;
        let counted = tap.totals().wire_bytes;
        let gap = (counted as f64 - summary.wire_bytes as f64).abs() / (summary.wire_bytes as f64);
        if gap > 0.01 {
            return Err(HarnessError::AccountingGap { counted, captured: summary.wire_bytes });
        }
        let traffic = TrafficReport::from_capture(&summary, Some(self.offered), duration)?;
        let stats = self.path.stats();
        let streams_per_packet = match stats.stream_frames {
            Some(f) if summary.quic_short_packets > 0 => Some(f as f64 / summary.quic_short_packets as f64),
            _ => None,
        };
        let prediction = predict_run(self.path.kind(), &self.message_sizes, streams_per_packet, traffic.overhead_bytes);
        Ok(RunRecord {
            seed,
            counted_wire_bytes: counted,
            capture_wire_bytes: summary.wire_bytes,
            messages: self.message_sizes.len() as u64,
            quic_short_packets: summary.quic_short_packets,
            stream_frames: stats.stream_frames,
            streams_per_packet,
            undeliverable: stats.undeliverable,
            prediction,
            controller: self.controller.counters(),
            switch: self.switch.counters(),
            traffic,
        })
    }
}

fn is_multipart_reply(protocol: Protocol, data: &Bytes) -> bool {
    protocol == Protocol::OpenFlow && decode_openflow_header(data).is_ok_and(|h| h.msg_type == OFPT_MULTIPART_REPLY)
}

/// Streams per packet as an exact ratio, clamped to the model's domain.
pub fn streams_ratio(s: f64) -> Q {
    let milli = (s.max(1.0) * 1000.0).round() as i128;
    Q::new(milli, 1000)
}

fn predict_run(kind: TransportKind, sizes: &[u64], s: Option<f64>, observed: u64) -> Option<Prediction> {
    if sizes.is_empty() || observed == 0 {
        return None;
    }
    let p = OverheadParams::default();
    let (s, predicted) = match kind {
        TransportKind::Tcp => (1.0, o_tcp(sizes, &p).ok()?),
        TransportKind::Quic => {
            let q = streams_ratio(s.unwrap_or(1.0));
            (crate::overhead::to_f64(q), o_quic(sizes, q, &p).ok()?)
        }
    };
    let predicted = predicted.as_f64();
    Some(Prediction {
        streams_per_packet: s,
        predicted_overhead: predicted,
        observed_overhead: observed,
        error_pct: model_error(predicted, observed as f64).ok()?,
    })
}

/// Runs the workload `repeats` times with consecutive seeds.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    run_experiment_with(cfg, |_, _| Ok(()))
}

/// Like [`run_experiment`], handing each run's seed and pcap capture to
/// `on_capture`.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    mut on_capture: impl FnMut(u64, &[u8]) -> Result<(), HarnessError>,
) -> Result<ExperimentReport, HarnessError> {
    cfg.validate()?;
    if cfg.experiment == Experiment::Migration {
        return Err(HarnessError::InvalidConfig("use run_migration for the migration experiment".into()));
    }
    let mut runs = Vec::with_capacity(cfg.repeats);
    for i in 0..cfg.repeats as u64 {
        let seed = cfg.seed + i;
        let (record, bench) = run_once(cfg, seed)?;
        on_capture(seed, bench.path.link().tap().pcap())?;
        runs.push(record);
    }
    Ok(ExperimentReport::new(cfg.clone(), runs))
}

fn run_once(cfg: &ExperimentConfig, seed: u64) -> Result<(RunRecord, Bench), HarnessError> {
    let mut bench = Bench::new(cfg, cfg.transport, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    bench.connect()?;
    bench.start_recording();
    let start = bench.now;
    if cfg.experiment == Experiment::FileTransfer {
        let req = bench.controller.stats_request();
        bench.send(Side::Controller, &req);
        let expected = multipart_reply_total_len(bench.switch.flow_table_size()) as u64;
        let limit = start + Duration::from_secs(120);
        while bench.stats_bytes < expected && bench.now < limit {
            let step = bench.now + Duration::from_millis(10);
            bench.run_until(step);
        }
        if bench.stats_bytes < expected {
            return Err(HarnessError::LaunchFailure(format!(
                "file transfer stalled at {} of {expected} bytes",
                bench.stats_bytes
            )));
        }
        let elapsed = (bench.now - start).as_secs_f64();
        let end = bench.now + Duration::from_secs_f64(cfg.drain);
        bench.run_until(end);
        let record = bench.account(seed, elapsed)?;
        return Ok((record, bench));
    }
    let events = (cfg.rate * cfg.duration).round() as u64;
    for k in 0..events {
        bench.run_until(start + Duration::from_secs_f64(k as f64 / cfg.rate));
        let msgs = match cfg.experiment {
            Experiment::FlowInstall => bench.controller.flow_mods(1, cfg.match_fields, cfg.actions),
            Experiment::QueueConfig => {
                let min = rng.random_range(1_000_000u64..100_000_000);
                vec![bench.controller.queue_transact(k + 1, (min, min * 2))]
            }
            Experiment::StatsPoll => vec![bench.controller.stats_request()],
            Experiment::FileTransfer | Experiment::Migration => unreachable!("handled elsewhere"),
        };
        for m in msgs {
            bench.send(Side::Controller, &m);
        }
    }
    let end = start + Duration::from_secs_f64(cfg.duration + cfg.drain);
    bench.run_until(end);
    let record = bench.account(seed, cfg.duration)?;
    Ok((record, bench))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(experiment: Experiment, transport: TransportKind) -> ExperimentConfig {
        ExperimentConfig { duration: 1.0, ..ExperimentConfig::new(experiment, transport) }
    }

    #[test]
    fn validation_rejects_bad_settings() {
        let base = ExperimentConfig::new(Experiment::FlowInstall, TransportKind::Quic);
        let cases = [
            ExperimentConfig { rate: 0.0, ..base.clone() },
            ExperimentConfig { duration: f64::NAN, ..base.clone() },
            ExperimentConfig { rate: 5000.0, ..base.clone() },
            ExperimentConfig { repeats: 0, ..base.clone() },
            ExperimentConfig { break_at: Some(10.0), ..ExperimentConfig::new(Experiment::Migration, TransportKind::Tcp) },
        ];
        for cfg in cases {
            assert!(matches!(cfg.validate(), Err(HarnessError::InvalidConfig(_))), "{cfg:?}");
        }
        assert!(ExperimentConfig { rate: 5000.0, unsafe_rates: true, ..base }.validate().is_ok());
    }

    #[test]
    fn scenario_keys_ignore_the_transport() {
        for e in [Experiment::FlowInstall, Experiment::QueueConfig, Experiment::StatsPoll] {
            assert_eq!(short(e, TransportKind::Tcp).scenario(), short(e, TransportKind::Quic).scenario());
        }
        assert_eq!(ExperimentConfig::new(Experiment::StatsPoll, TransportKind::Tcp).scenario(), "stats-poll@1/s,n=100");
    }

    #[test]
    fn streams_ratio_is_clamped_to_one() {
        assert_eq!(streams_ratio(0.4), Q::from_integer(1));
        assert_eq!(streams_ratio(1.5), Q::new(3, 2));
    }

    #[test]
    fn counted_and_captured_bytes_agree() {
        for t in [TransportKind::Tcp, TransportKind::Quic] {
            let r = run_experiment(&short(Experiment::FlowInstall, t)).unwrap();
            let run = r.representative();
            assert_eq!(run.counted_wire_bytes, run.capture_wire_bytes);
            assert_eq!(run.messages, 20, "ten flow mods and ten barrier replies");
            assert_eq!(run.traffic.wire_bytes, run.traffic.payload_bytes + run.traffic.overhead_bytes);
            assert_eq!(run.undeliverable, 0);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = short(Experiment::QueueConfig, TransportKind::Quic);
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.representative().traffic, b.representative().traffic);
    }

    #[test]
    fn captures_are_handed_out_per_seed() {
        let cfg = ExperimentConfig { repeats: 2, seed: 7, ..short(Experiment::StatsPoll, TransportKind::Tcp) };
        let mut seen = Vec::new();
        run_experiment_with(&cfg, |seed, pcap| {
            seen.push((seed, pcap.len()));
            Ok(())
        })
        .unwrap();
        assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), vec![7, 8]);
        assert!(seen.iter().all(|s| s.1 > 24));
    }

    #[test]
    fn migration_is_not_a_plain_run() {
        let cfg = ExperimentConfig::new(Experiment::Migration, TransportKind::Quic);
        assert!(matches!(run_experiment(&cfg), Err(HarnessError::InvalidConfig(_))));
    }
}
