#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::Arc;
use std::time::Duration;

use edgepod_core::lifecycle::{Orchestrator, OrchestratorConfig, SimRuntime};
use edgepod_core::ports::{IndexStoreConfig, PortManager};
use edgepod_core::reservation::{Inventory, ReservationBook};
use edgepod_core::scheduler::{ResourceRequest, GIB};
use edgepod_core::telemetry::Registry;
use edgepod_core::{Clock, SimClock};
use edgepod_gateway::auth::UsersFile;
use edgepod_gateway::{
    ApiToken, AuthPolicy, Authenticator, NullBridges, Platform, PlatformParts, ReserveRequest, Role,
    UserRecord,
};

pub const INVENTORY: &str = r#"
[[labs]]
id = "x-lab"
name = "X Lab"

[[labs.testbeds]]
id = "sdr"
name = "SDR testbed"
edge_nodes = ["node-1", "node-2", "node-3"]
devices = [
  { id = "usrp-1", node = "node-1", layout = [0.1, 0.2] },
  { id = "usrp-2", node = "node-1", layout = [0.3, 0.2] },
  { id = "usrp-3", node = "node-1", layout = [0.5, 0.2] },
  { id = "usrp-4", node = "node-2", layout = [0.7, 0.2] },
  { id = "usrp-5", node = "node-2", layout = [0.1, 0.8] },
  { id = "usrp-6", node = "node-2", layout = [0.3, 0.8] },
  { id = "usrp-7", node = "node-3", layout = [0.5, 0.8] },
  { id = "usrp-8", node = "node-3", layout = [0.7, 0.8] },
]
"#;

pub const START_MS: u64 = 1_900_000_000_000;
pub const HOUR: u64 = 3600;

pub fn users() -> Vec<UserRecord> {
    vec![
        UserRecord::with_password("alice", Role::User, "alice-pw"),
        UserRecord::with_password("bob", Role::User, "bob-pw"),
        UserRecord::with_password("admin", Role::Admin, "admin-pw"),
    ]
}

pub fn users_toml() -> String {
    toml::to_string(&UsersFile { users: users() }).unwrap()
}

pub struct SimPlatform {
    pub clock: SimClock,
    pub runtime: SimRuntime,
    pub platform: Arc<Platform>,
    pub bridges: NullBridges,
}

/// Platform on a simulated clock and runtime with bookkeeping-only bridges.
pub fn sim_platform(config: OrchestratorConfig, max_index: u32) -> SimPlatform {
    let clock = SimClock::new(START_MS);
    let shared: Arc<dyn Clock> = Arc::new(clock.clone());
    let runtime = SimRuntime::new(Duration::from_millis(100));
    let ports = Arc::new(
        PortManager::new(IndexStoreConfig {
            max_index,
            ..IndexStoreConfig::default()
        })
        .unwrap(),
    );
    let orchestrator = Orchestrator::new(
        config,
        Arc::clone(&shared),
        ports,
        Box::new(runtime.clone()),
        Arc::new(Registry::default()),
    )
    .unwrap();
    let bridges = NullBridges::default();
    let mut apps = BTreeMap::new();
    apps.insert("gnuradio".to_string(), ResourceRequest::new(500, 2 * GIB));
    let platform = Arc::new(Platform::new(PlatformParts {
        auth: Authenticator::new(
            users(),
            AuthPolicy {
                token_ttl: Duration::from_secs(8 * HOUR),
                throttle: Duration::from_secs(1),
            },
            Arc::clone(&shared),
        ),
        clock: shared,
        book: ReservationBook::new(Inventory::from_toml_str(INVENTORY).unwrap()),
        orchestrator,
        bridges: Box::new(bridges.clone()),
        apps,
        uploads_dir: std::env::temp_dir().join("edgepod-test-uploads"),
        max_upload_bytes: 1024,
    }));
    SimPlatform {
        clock,
        runtime,
        platform,
        bridges,
    }
}

impl SimPlatform {
    pub fn login(&self, user: &str) -> ApiToken {
        self.platform.authenticate(user, &format!("{user}-pw")).unwrap()
    }

    /// Reserve `devices` on `node` starting now for `hours`.
    pub fn reserve_now(&self, tok: &ApiToken, node: &str, devices: &[&str], hours: u64) -> String {
        let now = self.clock.now_secs();
        self.platform
            .reserve(
                tok,
                ReserveRequest {
                    testbed_id: "sdr".into(),
                    node_id: node.into(),
                    device_ids: devices.iter().map(|d| d.to_string()).collect(),
                    start: now,
                    end: now + hours * HOUR,
                },
            )
            .unwrap()
            .reservation_id
    }
}

/// Base of `n` consecutive currently free ports.
pub fn free_range(n: u16) -> u16 {
    for attempt in 0..200u32 {
        let base = 21_000 + ((std::process::id() * 173 + attempt * 1009) % 30_000) as u16;
        let held: Vec<_> = (0..n)
            .map_while(|i| TcpListener::bind(("127.0.0.1", base + i)).ok())
            .collect();
        if held.len() == n as usize {
            return base;
        }
    }
    panic!("no free port range");
}

#[derive(Debug)]
pub struct HttpResponse {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl HttpResponse {
    pub fn json(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body)
            .unwrap_or_else(|e| panic!("non-JSON body ({e}): {}", String::from_utf8_lossy(&self.body)))
    }

    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

/// Minimal blocking HTTP/1.1 client: one request per connection.
pub fn http(
    addr: SocketAddr,
    method: &str,
    path: &str,
    token: Option<&str>,
    body: Option<&[u8]>,
) -> HttpResponse {
    let mut conn = TcpStream::connect(addr).expect("connect to API");
    conn.set_read_timeout(Some(Duration::from_secs(20))).unwrap();
    let body = body.unwrap_or_default();
    let mut head = format!(
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\nContent-Length: {}\r\n",
        body.len()
    );
    if !body.is_empty() {
        head.push_str("Content-Type: application/json\r\n");
    }
    if let Some(t) = token {
        head.push_str(&format!("Authorization: Bearer {t}\r\n"));
    }
    head.push_str("\r\n");
    conn.write_all(head.as_bytes()).unwrap();
    conn.write_all(body).unwrap();
    let mut raw = Vec::new();
    conn.read_to_end(&mut raw).unwrap();
    parse_response(&raw)
}

pub fn http_json(
    addr: SocketAddr,
    method: &str,
    path: &str,
    token: Option<&str>,
    body: &serde_json::Value,
) -> HttpResponse {
    http(addr, method, path, token, Some(body.to_string().as_bytes()))
}

fn parse_response(raw: &[u8]) -> HttpResponse {
    let split = raw
        .windows(4)
        .position(|w| w == b"\r\n\r\n")
        .expect("complete response head");
    let head = std::str::from_utf8(&raw[..split]).unwrap();
    let mut lines = head.split("\r\n");
    let status: u16 = lines.next().unwrap().split(' ').nth(1).unwrap().parse().unwrap();
    let headers: Vec<(String, String)> = lines
        .filter_map(|l| l.split_once(':'))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect();
    let rest = &raw[split + 4..];
    let chunked = headers
        .iter()
        .any(|(k, v)| k.eq_ignore_ascii_case("transfer-encoding") && v.contains("chunked"));
    let body = if chunked { dechunk(rest) } else { rest.to_vec() };
    HttpResponse { status, headers, body }
}

fn dechunk(mut data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    loop {
        let Some(eol) = data.windows(2).position(|w| w == b"\r\n") else {
            return out;
        };
        let size_line = std::str::from_utf8(&data[..eol]).unwrap();
        let size = usize::from_str_radix(size_line.split(';').next().unwrap().trim(), 16).unwrap();
        if size == 0 {
            return out;
        }
        let start = eol + 2;
        out.extend_from_slice(&data[start..start + size]);
        data = &data[start + size + 2..];
    }
}

/// Write `payload` to `port`, half-close and read until EOF.
pub fn tcp_round_trip(port: u16, payload: &[u8]) -> std::io::Result<Vec<u8>> {
    let mut conn = TcpStream::connect(("127.0.0.1", port))?;
    conn.set_read_timeout(Some(Duration::from_secs(5)))?;
    conn.write_all(payload)?;
    conn.shutdown(std::net::Shutdown::Write)?;
    let mut out = Vec::new();
    conn.read_to_end(&mut out)?;
    Ok(out)
}
