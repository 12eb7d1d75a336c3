use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use edgepod_core::telemetry::{compute_jitter, JitterReport, PacketTrace};
use edgepod_gateway::auth::{Role, UserRecord, UsersFile};
use edgepod_gateway::{Config, Server};
use edgepod_net::loopback::{capture_loopback, DEFAULT_PAYLOAD_BYTES, DEFAULT_SPIKE_THRESHOLD_MS};
use edgepod_net::store::StoreServer;
use serde_json::json;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "edgepod", version, about = "Edge testbed pod platform")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the API gateway, tunnel gateway and orchestrator.
    Serve {
        #[arg(short, long)]
        config: Option<PathBuf>,
    },
    /// Analyze a `seq,timestamp_us` packet trace.
    Jitter {
        trace: PathBuf,
        #[arg(long, default_value_t = 10e6)]
        rate_bps: f64,
        #[arg(long, default_value_t = DEFAULT_PAYLOAD_BYTES)]
        payload_bytes: u32,
        #[arg(long, default_value_t = DEFAULT_SPIKE_THRESHOLD_MS)]
        threshold_ms: f64,
        /// Include every per-interval value in the output.
        #[arg(long)]
        full: bool,
    },
    /// Send a paced UDP stream over loopback and report its jitter.
    Loopback {
        #[arg(long, default_value_t = 10.0)]
        duration_s: f64,
        #[arg(long, default_value_t = 10e6)]
        rate_bps: f64,
        #[arg(long, default_value_t = DEFAULT_PAYLOAD_BYTES)]
        payload_bytes: u32,
        #[arg(long, default_value_t = DEFAULT_SPIKE_THRESHOLD_MS)]
        threshold_ms: f64,
        /// Write the captured trace as CSV.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Run a standalone line-protocol index store.
    StoreServer {
        #[arg(long, default_value = "127.0.0.1:7400")]
        listen: SocketAddr,
    },
    /// Print a users-file entry with a freshly salted password hash.
    HashPassword {
        user: String,
        password: String,
        #[arg(long)]
        admin: bool,
    },
}

fn summary(report: &JitterReport, full: bool) -> serde_json::Value {
    let mut v = json!({
        "intervals": report.per_interval_ms.len(),
        "nominal_interval_ms": report.nominal_interval_ms,
        "mean_ms": report.mean_ms,
        "p95_ms": report.p95_ms,
        "max_ms": report.max_ms,
        "smoothed_ms": report.smoothed_ms,
        "spike_threshold_ms": report.spike_threshold_ms,
        "spike_intervals_s": report.spike_intervals,
        "lossy": report.lossy,
    });
    if full {
        v["per_interval_ms"] = json!(report.per_interval_ms);
    }
    v
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Serve { config } => {
            let config = Config::load(config.as_deref()).map_err(|e| e.to_string())?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
            rt.block_on(async move {
                let listen = config.server.listen;
                let server = Server::build(config).await.map_err(|e| e.to_string())?;
                let listener = tokio::net::TcpListener::bind(listen)
                    .await
                    .map_err(|e| format!("bind {listen}: {e}"))?;
                tracing::info!(
                    http = %listen,
                    tunnels = %server.gateway.control_addr(),
                    "serving"
                );
                server
                    .serve(listener, async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await
                    .map_err(|e| e.to_string())
            })
        }
        Command::Jitter {
            trace,
            rate_bps,
            payload_bytes,
            threshold_ms,
            full,
        } => {
            let text = std::fs::read_to_string(&trace).map_err(|e| format!("{}: {e}", trace.display()))?;
            let trace = PacketTrace::from_csv(&text, rate_bps, payload_bytes).map_err(|e| e.to_string())?;
            let report = compute_jitter(&trace, threshold_ms).map_err(|e| e.to_string())?;
            println!("{}", serde_json::to_string_pretty(&summary(&report, full)).unwrap());
            Ok(())
        }
        Command::Loopback {
            duration_s,
            rate_bps,
            payload_bytes,
            threshold_ms,
            trace_out,
        } => {
            let duration = Duration::try_from_secs_f64(duration_s).map_err(|e| e.to_string())?;
            let capture = capture_loopback(duration, rate_bps, payload_bytes).map_err(|e| e.to_string())?;
            if let Some(path) = trace_out {
                let t0 = capture.trace.arrivals.first().copied().unwrap_or(0.0);
                let mut csv = String::from("seq,timestamp_us\n");
                for (i, t) in capture.trace.arrivals.iter().enumerate() {
                    csv.push_str(&format!("{i},{}\n", ((t - t0) * 1e6).round() as u64));
                }
                std::fs::write(&path, csv).map_err(|e| format!("{}: {e}", path.display()))?;
            }
            let mut report = compute_jitter(&capture.trace, threshold_ms).map_err(|e| e.to_string())?;
            report.lossy = capture.received * 100 < capture.sent * 99;
            let mut out = summary(&report, false);
            out["sent"] = json!(capture.sent);
            out["received"] = json!(capture.received);
            println!("{}", serde_json::to_string_pretty(&out).unwrap());
            Ok(())
        }
        Command::StoreServer { listen } => {
            let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
            rt.block_on(async move {
                let mut server = StoreServer::start(listen).await.map_err(|e| e.to_string())?;
                tracing::info!(addr = %server.addr(), "index store listening");
                server.wait().await;
                Ok(())
            })
        }
        Command::HashPassword { user, password, admin } => {
            let role = if admin { Role::Admin } else { Role::User };
            let file = UsersFile {
                users: vec![UserRecord::with_password(&user, role, &password)],
            };
            print!("{}", toml::to_string(&file).map_err(|e| e.to_string())?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("edgepod: {e}");
            ExitCode::FAILURE
        }
    }
}
