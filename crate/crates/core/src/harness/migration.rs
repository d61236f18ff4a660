//! Path break during a polling-driven transfer.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::experiment::{Bench, Experiment, ExperimentConfig};
use super::southbound::{Side, TransportKind};
use super::HarnessError;
use crate::codec::multipart_reply_total_len;

const SAMPLE: Duration = Duration::from_millis(50);
const READY_CHECK: Duration = Duration::from_millis(5);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    /// Seconds since the transfer started.
    pub t: f64,
    /// Reply bytes delivered to the controller in the current attempt.
    pub bytes: u64,
}

/// Stream offsets (label, sent, received) on the switch-side agent.
pub type StreamOffsets = Vec<(u64, u64, u64)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationTrace {
    pub transport: TransportKind,
    pub file_bytes: u64,
    pub points: Vec<TracePoint>,
    pub break_at: Option<f64>,
    pub resume_at: Option<f64>,
    /// Reply bytes delivered over all attempts.
    pub total_payload: u64,
    pub attempts: u32,
    pub completed_at: Option<f64>,
    pub offsets_before: StreamOffsets,
    pub offsets_after: StreamOffsets,
    pub failure: Option<String>,
}

impl MigrationTrace {
    pub fn ratio(&self) -> f64 {
        self.total_payload as f64 / self.file_bytes as f64
    }

    /// Number of times the per-attempt counter went down.
    pub fn resets(&self) -> usize {
        self.points.windows(2).filter(|w| w[1].bytes < w[0].bytes).count()
    }

    pub fn is_non_decreasing(&self) -> bool {
        self.resets() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationComparison {
    pub file_bytes: u64,
    pub quic: MigrationTrace,
    pub tcp: MigrationTrace,
}

/// Runs the transfer over both transports.
pub fn run_migration(cfg: &ExperimentConfig) -> Result<MigrationComparison, HarnessError> {
    cfg.validate()?;
    if cfg.experiment != Experiment::Migration {
        return Err(HarnessError::InvalidConfig("run_migration needs the migration experiment".into()));
    }
    let quic = migration_trace(cfg, TransportKind::Quic)?;
    if let Some(f) = &quic.failure {
        return Err(HarnessError::ResumeFailure(f.clone()));
    }
    let tcp = migration_trace(cfg, TransportKind::Tcp)?;
    Ok(MigrationComparison { file_bytes: quic.file_bytes, quic, tcp })
}

/// One transport. The controller polls `rate` times per second until it has
/// `rate * duration` complete replies of `n_flows` flows each. A tcp
/// reconnect abandons the current attempt and starts over.
pub fn migration_trace(cfg: &ExperimentConfig, transport: TransportKind) -> Result<MigrationTrace, HarnessError> {
    let mut bench = Bench::new(cfg, transport, cfg.seed);
    bench.connect()?;
    bench.start_recording();
    let start = bench.now;
    let at = |s: f64| start + Duration::from_secs_f64(s);
    let polls_total = ((cfg.rate * cfg.duration).round() as u64).max(1);
    let file_bytes = polls_total * multipart_reply_total_len(cfg.n_flows) as u64;
    let break_t = cfg.break_at.map(at);
    let up_t = cfg.break_at.map(|b| at(b + cfg.down_for));
    let limit = at(cfg.duration * 4.0 + 30.0);

    let mut trace = MigrationTrace {
        transport,
        file_bytes,
        points: vec![TracePoint { t: 0.0, bytes: 0 }],
        break_at: None,
        resume_at: None,
        total_payload: 0,
        attempts: 1,
        completed_at: None,
        offsets_before: Vec::new(),
        offsets_after: Vec::new(),
        failure: None,
    };
    let (mut broke, mut upped, mut restart_pending) = (false, false, false);
    let (mut attempt_start, mut attempt_base, mut polls_sent) = (start, 0u64, 0u64);
    let mut next_sample = start + SAMPLE;
    let since = |b: &Bench| (b.now - start).as_secs_f64();

    loop {
        if bench.stats_bytes - attempt_base >= file_bytes {
            trace.completed_at = Some(since(&bench));
            break;
        }
        if bench.now >= limit {
            break;
        }
        let next_poll = (polls_sent < polls_total && !restart_pending)
            .then(|| attempt_start + Duration::from_secs_f64(polls_sent as f64 / cfg.rate));
        let mut next = next_sample;
        for t in [next_poll, break_t.filter(|_| !broke), up_t.filter(|_| broke && !upped)].into_iter().flatten() {
            next = next.min(t);
        }
        if restart_pending {
            next = next.min(bench.now + READY_CHECK);
        }
        bench.run_until(next);

        if !broke && break_t.is_some_and(|t| t <= bench.now) {
            trace.offsets_before = bench.path.stream_offsets();
            bench.path.path_down(bench.now);
            trace.break_at = Some(since(&bench));
            broke = true;
        }
        if broke && !upped && up_t.is_some_and(|t| t <= bench.now) {
            bench.path.path_up(bench.now);
            trace.offsets_after = bench.path.stream_offsets();
            trace.resume_at = Some(since(&bench));
            upped = true;
            restart_pending = transport == TransportKind::Tcp;
        }
        if restart_pending && bench.path.is_ready() {
            bench.greet();
            bench.controller.reset_outstanding();
            trace.attempts += 1;
            attempt_start = bench.now;
            attempt_base = bench.stats_bytes;
            polls_sent = 0;
            restart_pending = false;
            trace.points.push(TracePoint { t: since(&bench), bytes: 0 });
        }
        if next_poll.is_some_and(|p| p <= bench.now) {
            let req = bench.controller.stats_request();
            bench.send(Side::Controller, &req);
            polls_sent += 1;
        }
        if bench.now >= next_sample {
            trace.points.push(TracePoint { t: since(&bench), bytes: bench.stats_bytes - attempt_base });
            next_sample += SAMPLE;
        }
        if let Some(f) = bench.path.failure() {
            trace.failure = Some(f);
            break;
        }
    }
    trace.points.push(TracePoint { t: since(&bench), bytes: bench.stats_bytes - attempt_base });
    trace.total_payload = bench.stats_bytes;
    if trace.completed_at.is_none() && trace.failure.is_none() {
        trace.failure = Some(format!(
            "transfer incomplete after {:.1} s: {} of {file_bytes} bytes in the last attempt",
            since(&bench),
            bench.stats_bytes - attempt_base
        ));
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(break_at: Option<f64>) -> ExperimentConfig {
        ExperimentConfig {
            n_flows: 1000,
            duration: 4.0,
            break_at,
            ..ExperimentConfig::new(Experiment::Migration, TransportKind::Quic)
        }
    }

    #[test]
    fn break_at_half_restarts_tcp_only() {
        let m = run_migration(&small(Some(2.0))).unwrap();
        assert_eq!(m.quic.total_payload, m.file_bytes);
        assert!(m.quic.is_non_decreasing());
        assert_eq!(m.tcp.attempts, 2);
        assert_eq!(m.tcp.resets(), 1);
        assert_eq!(m.tcp.ratio(), 1.5);
    }

    #[test]
    fn break_at_start_costs_nothing_extra() {
        let m = run_migration(&small(Some(0.0))).unwrap();
        assert_eq!(m.quic.ratio(), 1.0);
        assert_eq!(m.tcp.ratio(), 1.0);
    }

    #[test]
    fn without_a_break_both_move_the_same_payload() {
        let m = run_migration(&small(None)).unwrap();
        assert_eq!(m.quic.total_payload, m.tcp.total_payload);
        assert_eq!(m.quic.total_payload, m.file_bytes);
        assert!(m.quic.break_at.is_none() && m.tcp.attempts == 1);
    }

    #[test]
    fn rejects_other_experiments() {
        let cfg = ExperimentConfig::new(Experiment::FlowInstall, TransportKind::Quic);
        assert!(matches!(run_migration(&cfg), Err(HarnessError::InvalidConfig(_))));
    }
}
