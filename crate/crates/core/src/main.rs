use std::fs;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use quicsb::agent::live::{start_client, start_server, AgentHandle};
use quicsb::agent::{ClientConfig, ServerConfig};
use quicsb::endpoints::live::{run_controller, run_switch, DaemonHandle, Workload};
use quicsb::endpoints::{SwitchConfig, TransportSpec};
use quicsb::harness::{
    analyze_capture, compare, render_table, run_experiment_with, run_migration, Experiment, ExperimentConfig,
    ExperimentReport, FlowFilter, TrafficReport, TransportKind,
};
use quicsb::overhead::{parse_ratio, predict, OverheadParams, Transport};

#[derive(Parser)]
#[command(name = "quicsb", version, about = "OpenFlow and OVSDB over one QUIC connection")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Switch-side agent.
    Client {
        server_addr: IpAddr,
        server_port: u16,
        openflow_port: u16,
        ovsdb_port: u16,
        #[arg(long)]
        session_file: Option<PathBuf>,
        /// Rewrites agent counters as JSON here once a second.
        #[arg(long)]
        metrics_out: Option<PathBuf>,
        /// DER certificate the server must present.
        #[arg(long)]
        pin_cert: Option<PathBuf>,
        /// Seconds to run; runs until killed when absent.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Controller-side agent.
    Server {
        addr: IpAddr,
        port: u16,
        key: PathBuf,
        cert: PathBuf,
        openflow_port: u16,
        ovsdb_port: u16,
        #[arg(long)]
        metrics_out: Option<PathBuf>,
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Emulated switch daemons.
    Switch {
        /// OpenFlow controller, udp:<ip>:<port> or tcp:<ip>:<port>.
        #[arg(long)]
        controller: TransportSpec,
        /// OVSDB manager, udp:<ip>:<port> or tcp:<ip>:<port>.
        #[arg(long)]
        manager: TransportSpec,
        #[arg(long, default_value_t = 0)]
        initial_flows: usize,
        /// Seconds between inactivity probes; 0 disables them.
        #[arg(long, default_value_t = 5.0)]
        probe_interval: f64,
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Emulated controller daemons.
    Controller {
        #[arg(long, default_value_t = 6653)]
        ofp_listen_port: u16,
        #[arg(long, default_value_t = 6640)]
        ovsdb_listen_port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        listen_host: IpAddr,
        /// udp (behind the agents) or tcp (baseline).
        #[arg(long, default_value = "udp")]
        scheme: String,
        #[arg(long, default_value_t = 0.0)]
        flow_mods_per_sec: f64,
        #[arg(long, default_value_t = 0.0)]
        transacts_per_sec: f64,
        /// Seconds between flow statistics polls.
        #[arg(long)]
        poll_interval: Option<f64>,
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Runs an experiment in virtual time and writes a JSON report.
    Run(RunArgs),
    /// Sums a pcap capture.
    Analyze {
        #[arg(long)]
        pcap: PathBuf,
        /// Endpoints a:p,b:p; port 0 matches any port.
        #[arg(long)]
        filter: Option<String>,
        /// Application bytes carried (e.g. the file size); defaults to the
        /// transport payload seen in the capture.
        #[arg(long)]
        payload: Option<u64>,
    },
    /// Pairs quic and tcp reports and prints the reduction table.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Writes the rows as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predicts transport overhead for a set of message sizes.
    Predict {
        /// Comma separated sizes, or a file of sizes.
        #[arg(long)]
        messages: String,
        #[arg(long)]
        transport: Transport,
        #[arg(long, default_value_t = 1500)]
        mtu: u32,
        /// Streams per packet, e.g. 1, 3/2 or 1.25.
        #[arg(long, default_value = "1")]
        streams: String,
        #[arg(long, default_value_t = 20)]
        ip_header: u32,
        #[arg(long, default_value_t = 32)]
        tcp_header: u32,
        #[arg(long, default_value_t = 11)]
        quic_header: u32,
        #[arg(long, default_value_t = 4)]
        stream_header: u32,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long, value_enum)]
    experiment: Experiment,
    /// Ignored for migration, which always runs both.
    #[arg(long, default_value = "quic")]
    transport: TransportKind,
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    n_flows: Option<usize>,
    #[arg(long)]
    file_bytes: Option<u64>,
    #[arg(long)]
    break_at: Option<f64>,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Per-segment ACKs by default; this acks every second segment or after 40 ms.
    #[arg(long)]
    delayed_ack: bool,
    /// Frame the tcp baseline as TLS records.
    #[arg(long)]
    tcp_tls: bool,
    #[arg(long)]
    unsafe_rates: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Capture file; with several repeats the seed is added to the name.
    #[arg(long)]
    pcap_out: Option<PathBuf>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).init();
    match cli.command {
        Command::Client { server_addr, server_port, openflow_port, ovsdb_port, session_file, metrics_out, pin_cert, duration } => {
            let mut cfg = ClientConfig::new(SocketAddr::new(server_addr, server_port));
            cfg.openflow_port = openflow_port;
            cfg.ovsdb_port = ovsdb_port;
            cfg.session_file = session_file;
            if let Some(path) = pin_cert {
                cfg.pinned_cert = Some(fs::read(&path).with_context(|| format!("reading {}", path.display()))?);
            }
            let agent = start_client(cfg)?;
            eprintln!("connected from {}", agent.quic_addr);
            serve_agent(agent, metrics_out, duration)
        }
        Command::Server { addr, port, key, cert, openflow_port, ovsdb_port, metrics_out, duration } => {
            let mut cfg = ServerConfig::new(SocketAddr::new(addr, port), key, cert);
            cfg.daemon_host = addr;
            cfg.openflow_port = openflow_port;
            cfg.ovsdb_port = ovsdb_port;
            let agent = start_server(cfg)?;
            eprintln!("listening on {}", agent.quic_addr);
            serve_agent(agent, metrics_out, duration)
        }
        Command::Switch { controller, manager, initial_flows, probe_interval, duration } => {
            let cfg = SwitchConfig {
                probe_interval: (probe_interval > 0.0).then(|| Duration::from_secs_f64(probe_interval)),
                initial_flows,
                ..SwitchConfig::default()
            };
            serve_daemon(run_switch(controller, manager, cfg)?, duration)
        }
        Command::Controller {
            ofp_listen_port,
            ovsdb_listen_port,
            listen_host,
            scheme,
            flow_mods_per_sec,
            transacts_per_sec,
            poll_interval,
            duration,
        } => {
            let spec = |port: u16| -> Result<TransportSpec> {
                Ok(format!("{scheme}:{}", SocketAddr::new(listen_host, port)).parse()?)
            };
            let workload = Workload {
                flow_mods_per_sec,
                transacts_per_sec,
                poll_interval: poll_interval.map(Duration::from_secs_f64),
            };
            serve_daemon(run_controller(spec(ofp_listen_port)?, spec(ovsdb_listen_port)?, workload)?, duration)
        }
        Command::Run(args) => run(args),
        Command::Analyze { pcap, filter, payload } => {
            let bytes = fs::read(&pcap).with_context(|| format!("reading {}", pcap.display()))?;
            let filter = match filter {
                Some(f) => FlowFilter::parse(&f).with_context(|| format!("bad filter {f:?}"))?,
                None => FlowFilter::any(),
            };
            let summary = analyze_capture(&bytes, &filter)?;
            let duration = match (summary.first_ts, summary.last_ts) {
                (Some(a), Some(b)) => (b - a).as_secs_f64(),
                _ => 0.0,
            };
            let report = TrafficReport::from_capture(&summary, payload.map(|p| (p, 0)), duration)?;
            println!("{}", serde_json::to_string_pretty(&json!({"summary": summary, "report": report}))?);
            Ok(())
        }
        Command::Compare { reports, out } => {
            let reports = reports.iter().map(|p| read_report(p)).collect::<Result<Vec<_>>>()?;
            let rows = compare(&reports)?;
            if let Some(out) = out {
                fs::write(&out, serde_json::to_vec_pretty(&rows)?)?;
            } else {
                println!("{}", serde_json::to_string_pretty(&rows)?);
            }
            print!("{}", render_table(&rows));
            Ok(())
        }
        Command::Predict { messages, transport, mtu, streams, ip_header, tcp_header, quic_header, stream_header } => {
            let sizes = parse_sizes(&messages)?;
            let params = OverheadParams {
                ip: ip_header,
                tcp: tcp_header,
                udp: 8,
                quic_short: quic_header,
                quic_stream: stream_header,
                mtu,
                streams: parse_ratio(&streams).map_err(anyhow::Error::msg)?,
            };
            let predicted = predict(&sizes, transport, &params)?;
            let record = json!({
                "transport": transport.to_string(),
                "messages": sizes.len(),
                "payload_bytes": sizes.iter().sum::<u64>(),
                "predicted_bytes": predicted.as_f64(),
                "predicted": predicted.render(),
                "params": params,
            });
            println!("{}", serde_json::to_string_pretty(&record)?);
            Ok(())
        }
    }
}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::new(args.experiment, args.transport);
    if let Some(r) = args.rate {
        cfg.rate = r;
    }
    if let Some(d) = args.duration {
        cfg.duration = d;
    }
    if let Some(n) = args.n_flows {
        cfg.n_flows = n;
    }
    if let Some(b) = args.file_bytes {
        cfg.file_bytes = b;
    }
    if args.break_at.is_some() {
        cfg.break_at = args.break_at;
    }
    cfg.repeats = args.repeats;
    cfg.seed = args.seed;
    cfg.delayed_ack = args.delayed_ack;
    cfg.tcp_tls = args.tcp_tls;
    cfg.unsafe_rates = args.unsafe_rates;

    let json = if cfg.experiment == Experiment::Migration {
        let m = run_migration(&cfg)?;
        println!(
            "file {} B: quic moved {:.3}x ({} resets), tcp moved {:.3}x in {} attempts",
            m.file_bytes,
            m.quic.ratio(),
            m.quic.resets(),
            m.tcp.ratio(),
            m.tcp.attempts
        );
        serde_json::to_vec_pretty(&m)?
    } else {
        let repeats = cfg.repeats;
        let report = run_experiment_with(&cfg, |seed, pcap| {
            if let Some(path) = &args.pcap_out {
                let path = if repeats > 1 { with_seed(path, seed) } else { path.clone() };
                fs::write(path, pcap)?;
            }
            Ok(())
        })?;
        println!(
            "{} over {}: median wire {:.0} B, overhead {:.0} B, payload {:.0} B ({} runs)",
            report.scenario,
            report.transport,
            report.wire_bytes.median,
            report.overhead_bytes.median,
            report.payload_bytes.median,
            report.runs.len()
        );
        serde_json::to_vec_pretty(&report)?
    };
    if let Some(out) = args.out {
        fs::write(&out, json).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn with_seed(path: &Path, seed: u64) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}-{seed}.{}", ext.to_string_lossy()),
        None => format!("{stem}-{seed}"),
    };
    path.with_file_name(name)
}

fn read_report(path: &Path) -> Result<ExperimentReport> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let report: ExperimentReport = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    if report.schema != quicsb::harness::report::REPORT_SCHEMA {
        bail!("{} has report schema {}, expected {}", path.display(), report.schema, quicsb::harness::report::REPORT_SCHEMA);
    }
    Ok(report)
}

fn parse_sizes(text: &str) -> Result<Vec<u64>> {
    let owned;
    let list = if Path::new(text).is_file() {
        owned = fs::read_to_string(text)?;
        owned.as_str()
    } else {
        text
    };
    list.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u64>().with_context(|| format!("bad message size {s:?}")))
        .collect()
}

fn until(duration: Option<f64>) -> Option<Instant> {
    duration.map(|d| Instant::now() + Duration::from_secs_f64(d))
}

fn serve_agent(agent: AgentHandle, metrics_out: Option<PathBuf>, duration: Option<f64>) -> Result<()> {
    let end = until(duration);
    while agent.is_running() && end.is_none_or(|e| Instant::now() < e) {
        thread::sleep(Duration::from_secs(1));
        if let Some(path) = &metrics_out {
            fs::write(path, serde_json::to_vec_pretty(&agent.counters())?)?;
        }
    }
    let counters = agent.shutdown()?;
    if let Some(path) = &metrics_out {
        fs::write(path, serde_json::to_vec_pretty(&counters)?)?;
    }
    println!("{}", serde_json::to_string(&counters)?);
    Ok(())
}

fn serve_daemon(daemon: DaemonHandle, duration: Option<f64>) -> Result<()> {
    eprintln!("daemon sockets: {:?}", daemon.local_addrs);
    let end = until(duration);
    while end.is_none_or(|e| Instant::now() < e) {
        thread::sleep(Duration::from_millis(200));
    }
    println!("{}", serde_json::to_string(&daemon.shutdown())?);
    Ok(())
}
