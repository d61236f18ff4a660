//! Report types, quartiles and the quic-versus-tcp comparison table.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, Median, OrderStatistics};

use super::experiment::ExperimentConfig;
use super::pcap::CaptureSummary;
use super::southbound::TransportKind;
use super::HarnessError;
use crate::endpoints::{ControllerCounters, SwitchCounters};

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectionSplit {
    pub packets: u64,
    pub wire_bytes: u64,
    pub payload_bytes: u64,
}

/// Bytes exchanged over one measurement window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub payload_bytes: u64,
    pub wire_bytes: u64,
    pub overhead_bytes: u64,
    pub packets: u64,
    /// Seconds.
    pub duration: f64,
    /// Switch to controller.
    pub up: DirectionSplit,
    /// Controller to switch.
    pub down: DirectionSplit,
}

impl TrafficReport {
    pub fn new(up: DirectionSplit, down: DirectionSplit, duration: f64) -> Result<Self, HarnessError> {
        let wire_bytes = up.wire_bytes + down.wire_bytes;
        let payload_bytes = up.payload_bytes + down.payload_bytes;
        if payload_bytes > wire_bytes {
            return Err(HarnessError::Accounting(format!("payload {payload_bytes} B exceeds wire {wire_bytes} B")));
        }
        Ok(Self {
            payload_bytes,
            wire_bytes,
            overhead_bytes: wire_bytes - payload_bytes,
            packets: up.packets + down.packets,
            duration,
            up,
            down,
        })
    }

    /// From a capture. Payload is the transport payload unless the
    /// application byte counts (up, down) are supplied.
    pub fn from_capture(s: &CaptureSummary, app_payload: Option<(u64, u64)>, duration: f64) -> Result<Self, HarnessError> {
        let (pu, pd) = app_payload.unwrap_or((s.forward.transport_payload_bytes, s.reverse.transport_payload_bytes));
        let up = DirectionSplit { packets: s.forward.packets, wire_bytes: s.forward.wire_bytes, payload_bytes: pu };
        let down = DirectionSplit { packets: s.reverse.packets, wire_bytes: s.reverse.wire_bytes, payload_bytes: pd };
        Self::new(up, down, duration)
    }

    pub fn wire_per_second(&self) -> f64 {
        if self.duration > 0.0 {
            self.wire_bytes as f64 / self.duration
        } else {
            0.0
        }
    }
}

/// Lower quartile, median and upper quartile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "quartiles of an empty sample");
        let mut d = Data::new(values.to_vec());
        Self { q1: d.lower_quartile(), median: d.median(), q3: d.upper_quartile() }
    }
}

/// Model prediction for the messages of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Streams per packet used for the quic model.
    pub streams_per_packet: f64,
    pub predicted_overhead: f64,
    pub observed_overhead: u64,
    pub error_pct: f64,
}

/// One run of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub traffic: TrafficReport,
    /// Wire bytes from per-packet header arithmetic at the tap.
    pub counted_wire_bytes: u64,
    /// Wire bytes from re-reading the capture.
    pub capture_wire_bytes: u64,
    pub messages: u64,
    pub quic_short_packets: u64,
    pub stream_frames: Option<u64>,
    /// Stream frames per short-header packet, from engine stats and capture.
    pub streams_per_packet: Option<f64>,
    pub undeliverable: u64,
    pub prediction: Option<Prediction>,
    pub controller: ControllerCounters,
    pub switch: SwitchCounters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema: u32,
    pub scenario: String,
    pub transport: TransportKind,
    pub config: ExperimentConfig,
    pub runs: Vec<RunRecord>,
    pub wire_bytes: Quartiles,
    pub overhead_bytes: Quartiles,
    pub payload_bytes: Quartiles,
}

impl ExperimentReport {
    pub fn new(config: ExperimentConfig, runs: Vec<RunRecord>) -> Self {
        let q = |f: &dyn Fn(&RunRecord) -> u64| Quartiles::of(&runs.iter().map(|r| f(r) as f64).collect::<Vec<_>>());
        Self {
            schema: REPORT_SCHEMA,
            scenario: config.scenario(),
            transport: config.transport,
            wire_bytes: q(&|r| r.traffic.wire_bytes),
            overhead_bytes: q(&|r| r.traffic.overhead_bytes),
            payload_bytes: q(&|r| r.traffic.payload_bytes),
            config,
            runs,
        }
    }

    /// The run whose wire total is closest to the median.
    pub fn representative(&self) -> &RunRecord {
        let m = self.wire_bytes.median;
        self.runs
            .iter()
            .min_by(|a, b| {
                let da = (a.traffic.wire_bytes as f64 - m).abs();
                let db = (b.traffic.wire_bytes as f64 - m).abs();
                da.total_cmp(&db)
            })
            .expect("at least one run")
    }
}

/// `(tcp - quic) / tcp * 100`.
pub fn reduction_pct(tcp: f64, quic: f64) -> f64 {
    if tcp == 0.0 {
        0.0
    } else {
        (tcp - quic) / tcp * 100.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub scenario: String,
    pub tcp_bytes: f64,
    pub quic_bytes: f64,
    pub reduction_pct: f64,
    pub tcp_overhead: f64,
    pub quic_overhead: f64,
    pub overhead_reduction_pct: f64,
}

/// Pairs quic and tcp reports by scenario, using median totals.
pub fn compare(reports: &[ExperimentReport]) -> Result<Vec<ComparisonRow>, HarnessError> {
    let mut by: BTreeMap<&str, (Option<&ExperimentReport>, Option<&ExperimentReport>)> = BTreeMap::new();
    for r in reports {
        let slot = by.entry(&r.scenario).or_default();
        match r.transport {
            TransportKind::Tcp => slot.0 = Some(r),
            TransportKind::Quic => slot.1 = Some(r),
        }
    }
    by.into_iter()
        .map(|(scenario, pair)| match pair {
            (Some(t), Some(q)) => Ok(ComparisonRow {
                scenario: scenario.to_string(),
                tcp_bytes: t.wire_bytes.median,
                quic_bytes: q.wire_bytes.median,
                reduction_pct: reduction_pct(t.wire_bytes.median, q.wire_bytes.median),
                tcp_overhead: t.overhead_bytes.median,
                quic_overhead: q.overhead_bytes.median,
                overhead_reduction_pct: reduction_pct(t.overhead_bytes.median, q.overhead_bytes.median),
            }),
            (t, _) => Err(HarnessError::MissingPair {
                scenario: scenario.to_string(),
                missing: if t.is_none() { TransportKind::Tcp } else { TransportKind::Quic },
            }),
        })
        .collect()
}

/// Aligned text rendering of comparison rows.
pub fn render_table(rows: &[ComparisonRow]) -> String {
    let mut out = format!(
        "{:<28} {:>14} {:>14} {:>10} {:>14} {:>14} {:>10}\n",
        "scenario", "tcp bytes", "quic bytes", "reduction", "tcp ovh", "quic ovh", "ovh red."
    );
    for r in rows {
        out += &format!(
            "{:<28} {:>14.0} {:>14.0} {:>9.2}% {:>14.0} {:>14.0} {:>9.2}%\n",
            r.scenario, r.tcp_bytes, r.quic_bytes, r.reduction_pct, r.tcp_overhead, r.quic_overhead, r.overhead_reduction_pct
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_one_reductions() {
        assert_eq!(format!("{:.2}", reduction_pct(38978.0, 29217.0)), "25.04");
        assert_eq!(reduction_pct(1234.0, 1234.0), 0.0);
        assert_eq!(format!("{:.2}", reduction_pct(391896.0, 282063.0)), "28.03");
        assert_eq!(format!("{:.2}", reduction_pct(20070.0, 13953.0)), "30.48");
        // The printed 30.77% for this column equals quic/tcp, not the reduction.
        assert_eq!(format!("{:.2}", reduction_pct(50283.0, 15472.0)), "69.23");
        assert_eq!(format!("{:.2}", 15472.0 / 50283.0 * 100.0), "30.77");
    }

    #[test]
    fn quartiles_of_small_samples() {
        let q = Quartiles::of(&[5.0]);
        assert_eq!((q.q1, q.median, q.q3), (5.0, 5.0, 5.0));
        let q = Quartiles::of(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(q.median, 3.0);
        assert!(q.q1 <= q.median && q.median <= q.q3);
    }

    #[test]
    fn accounting_identity() {
        let up = DirectionSplit { packets: 2, wire_bytes: 300, payload_bytes: 100 };
        let down = DirectionSplit { packets: 1, wire_bytes: 60, payload_bytes: 8 };
        let r = TrafficReport::new(up, down, 2.0).unwrap();
        assert_eq!(r.overhead_bytes + r.payload_bytes, r.wire_bytes);
        assert_eq!(r.wire_per_second(), 180.0);
        let bad = DirectionSplit { packets: 1, wire_bytes: 10, payload_bytes: 11 };
        assert!(TrafficReport::new(bad, DirectionSplit::default(), 1.0).is_err());
    }
}
