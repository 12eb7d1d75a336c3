//! Service configuration: one TOML file plus `EDGEPOD_<SECTION>__<KEY>`
//! environment overrides. Precedence is env > file > built-in default.

use std::collections::BTreeMap;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::time::Duration;

use edgepod_core::lifecycle::{OrchestratorConfig, ProbeConfig, StartupPlan};
use edgepod_core::ports::IndexStoreConfig;
use edgepod_core::scheduler::{NodeDescriptor, ResourceRequest, GIB};
use edgepod_core::sim::SimClusterSpec;
use edgepod_net::KeepalivePolicy;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_PREFIX: &str = "EDGEPOD_";
const MIB: u64 = 1024 * 1024;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse config: {0}")]
    Parse(String),
    #[error("environment override {var}: {msg}")]
    Env { var: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub server: ServerConfig,
    pub auth: AuthConfig,
    pub ports: PortsConfig,
    pub store: StoreConfig,
    pub tunnel: TunnelConfig,
    pub cluster: ClusterConfig,
    pub probes: ProbesConfig,
    pub apps: BTreeMap<String, AppConfig>,
    pub inventory: InventoryConfig,
    pub reservations: ReservationsConfig,
    pub uploads: UploadsConfig,
    pub telemetry: TelemetryConfig,
}

impl Default for Config {
    fn default() -> Self {
        let mut apps = BTreeMap::new();
        apps.insert("gnuradio".to_string(), AppConfig::default());
        Self {
            server: ServerConfig::default(),
            auth: AuthConfig::default(),
            ports: PortsConfig::default(),
            store: StoreConfig::default(),
            tunnel: TunnelConfig::default(),
            cluster: ClusterConfig::default(),
            probes: ProbesConfig::default(),
            apps,
            inventory: InventoryConfig::default(),
            reservations: ReservationsConfig::default(),
            uploads: UploadsConfig::default(),
            telemetry: TelemetryConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub listen: SocketAddr,
    /// Period of the background driver (probes, pending sweep, metrics).
    pub drive_interval_ms: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            drive_interval_ms: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuthConfig {
    pub users_file: Option<PathBuf>,
    pub token_ttl_s: u64,
    pub throttle_ms: u64,
}

impl Default for AuthConfig {
    fn default() -> Self {
        Self {
            users_file: None,
            token_ttl_s: 8 * 3600,
            throttle_ms: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PortsConfig {
    pub remote_base: u16,
    pub web_base: u16,
    pub max_index: u32,
}

impl Default for PortsConfig {
    fn default() -> Self {
        let d = IndexStoreConfig::default();
        Self {
            remote_base: d.remote_base,
            web_base: d.web_base,
            max_index: d.max_index,
        }
    }
}

impl PortsConfig {
    pub fn index_store(&self) -> IndexStoreConfig {
        IndexStoreConfig {
            remote_base: self.remote_base,
            web_base: self.web_base,
            max_index: self.max_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreConfig {
    /// Address of a line-protocol index store; unset keeps the store in memory.
    pub addr: Option<SocketAddr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TunnelConfig {
    pub bind_host: IpAddr,
    pub control_port: u16,
    pub keepalive_enabled: bool,
    pub keepalive_interval_ms: u64,
    pub keepalive_max_missed: u32,
    pub idle_timeout_ms: Option<u64>,
    pub step_timeout_ms: u64,
}

impl Default for TunnelConfig {
    fn default() -> Self {
        let k = KeepalivePolicy::default();
        Self {
            bind_host: IpAddr::V4(Ipv4Addr::LOCALHOST),
            control_port: 7000,
            keepalive_enabled: true,
            keepalive_interval_ms: k.interval.as_millis() as u64,
            keepalive_max_missed: k.max_missed,
            idle_timeout_ms: None,
            step_timeout_ms: 30_000,
        }
    }
}

impl TunnelConfig {
    pub fn keepalive(&self) -> Option<KeepalivePolicy> {
        self.keepalive_enabled.then(|| KeepalivePolicy {
            interval: Duration::from_millis(self.keepalive_interval_ms),
            max_missed: self.keepalive_max_missed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub workers: u32,
    pub worker_cpu_millicores: u64,
    pub worker_mem_gib: u64,
    pub ramp_duration_s: f64,
    pub noise_fraction: f64,
    pub pull_delay_ms: u64,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        let d = SimClusterSpec::desk_scale();
        Self {
            workers: d.workers.len() as u32,
            worker_cpu_millicores: d.workers[0].cpu_capacity_millicores,
            worker_mem_gib: d.workers[0].mem_capacity_bytes / GIB,
            ramp_duration_s: d.ramp_duration_s,
            noise_fraction: d.noise_fraction,
            pull_delay_ms: d.pull_delay_ms,
            seed: d.seed,
        }
    }
}

impl ClusterConfig {
    pub fn spec(&self) -> SimClusterSpec {
        let mem = self.worker_mem_gib * GIB;
        SimClusterSpec {
            workers: (1..=self.workers)
                .map(|i| NodeDescriptor::worker(format!("worker-{i}"), self.worker_cpu_millicores, mem))
                .collect(),
            control_plane: NodeDescriptor::control_plane("control-plane", self.worker_cpu_millicores, mem),
            ramp_duration_s: self.ramp_duration_s,
            noise_fraction: self.noise_fraction,
            pull_delay_ms: self.pull_delay_ms,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbesConfig {
    pub readiness_period_s: f64,
    pub liveness_period_s: f64,
    pub failure_threshold: u32,
}

impl Default for ProbesConfig {
    fn default() -> Self {
        let d = ProbeConfig::default();
        Self {
            readiness_period_s: d.readiness_period_s,
            liveness_period_s: d.liveness_period_s,
            failure_threshold: d.failure_threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub cpu_millicores: u64,
    pub mem_mib: u64,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            cpu_millicores: 500,
            mem_mib: 2048,
        }
    }
}

impl AppConfig {
    pub fn request(&self) -> ResourceRequest {
        ResourceRequest::new(self.cpu_millicores, self.mem_mib * MIB)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InventoryConfig {
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReservationsConfig {
    /// Append-only journal; unset keeps reservations in memory only.
    pub journal: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UploadsConfig {
    pub dir: PathBuf,
    pub max_bytes: usize,
}

impl Default for UploadsConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("uploads"),
            max_bytes: 64 * MIB as usize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TelemetryConfig {
    pub retention_s: u64,
}

impl Default for TelemetryConfig {
    fn default() -> Self {
        Self { retention_s: 3600 }
    }
}

impl Config {
    /// Load `path` (if given) and apply overrides from the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                path: p.to_path_buf(),
                source,
            })?,
            None => String::new(),
        };
        let mut config = Self::from_sources(&text, std::env::vars())?;
        if let Some(p) = path {
            config.resolve_relative(p.parent().unwrap_or(Path::new(".")));
        }
        Ok(config)
    }

    /// Merge a TOML document with `(name, value)` environment pairs. Variables
    /// without the `EDGEPOD_` prefix are ignored.
    pub fn from_sources(
        file: &str,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(file).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for (var, raw) in env {
            let Some(rest) = var.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let Some((section, key)) = rest.split_once("__") else {
                return Err(ConfigError::Env {
                    var,
                    msg: "expected EDGEPOD_<SECTION>__<KEY>".into(),
                });
            };
            let (section, key) = (section.to_ascii_lowercase(), key.to_ascii_lowercase());
            let entry = table
                .entry(section.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let Some(section_table) = entry.as_table_mut() else {
                return Err(ConfigError::Env {
                    var,
                    msg: format!("{section} is not a table"),
                });
            };
            section_table.insert(key, env_value(&raw));
        }
        let config: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if let Err(e) = self.ports.index_store().validate() {
            return invalid(e.to_string());
        }
        if let Err(e) = self.cluster.spec().validate() {
            return invalid(e.to_string());
        }
        if let Some(k) = self.tunnel.keepalive() {
            if let Err(e) = k.validate() {
                return invalid(e);
            }
        }
        if self.apps.is_empty() {
            return invalid("at least one app is required".into());
        }
        for (name, app) in &self.apps {
            if let Err(e) = app.request().validate() {
                return invalid(format!("app {name}: {e}"));
            }
        }
        if self.server.drive_interval_ms == 0 {
            return invalid("server.drive_interval_ms must be positive".into());
        }
        if self.auth.token_ttl_s == 0 {
            return invalid("auth.token_ttl_s must be positive".into());
        }
        Ok(())
    }

    /// Interpret relative file paths against the config file's directory.
    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.auth.users_file.as_mut() {
            fix(p);
        }
        if let Some(p) = self.inventory.file.as_mut() {
            fix(p);
        }
        if let Some(p) = self.reservations.journal.as_mut() {
            fix(p);
        }
        fix(&mut self.uploads.dir);
    }

    pub fn orchestrator(&self) -> OrchestratorConfig {
        OrchestratorConfig {
            cluster: self.cluster.spec(),
            plan: StartupPlan {
                step_timeout: Duration::from_millis(self.tunnel.step_timeout_ms),
                ..StartupPlan::default()
            },
            probes: ProbeConfig {
                readiness_period_s: self.probes.readiness_period_s,
                liveness_period_s: self.probes.liveness_period_s,
                failure_threshold: self.probes.failure_threshold,
            },
            default_request: self
                .apps
                .values()
                .next()
                .map(AppConfig::request)
                .unwrap_or_else(|| AppConfig::default().request()),
        }
    }

    pub fn app_requests(&self) -> BTreeMap<String, ResourceRequest> {
        self.apps.iter().map(|(k, v)| (k.clone(), v.request())).collect()
    }
}

/// Environment values are parsed as TOML scalars when possible (`8080`,
/// `true`, `"x"`), otherwise taken as a bare string.
fn env_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_are_valid() {
        let c = Config::from_sources("", Vec::new()).unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.auth.token_ttl_s, 28_800);
        assert_eq!(c.apps["gnuradio"].request(), ResourceRequest::new(500, 2 * GIB));
        assert_eq!(c.cluster.spec(), SimClusterSpec::desk_scale());
    }

    #[test]
    fn env_beats_file_beats_default() {
        let file = "[server]\nlisten = \"0.0.0.0:9000\"\n[auth]\ntoken_ttl_s = 60\n";
        let c = Config::from_sources(file, env(&[("EDGEPOD_AUTH__TOKEN_TTL_S", "120")])).unwrap();
        assert_eq!(c.server.listen, "0.0.0.0:9000".parse().unwrap());
        assert_eq!(c.auth.token_ttl_s, 120);
        assert_eq!(c.auth.throttle_ms, 1000);
    }

    #[test]
    fn env_strings_and_new_sections() {
        let c = Config::from_sources(
            "",
            env(&[
                ("EDGEPOD_STORE__ADDR", "127.0.0.1:6379"),
                ("EDGEPOD_TUNNEL__KEEPALIVE_ENABLED", "false"),
                ("PATH", "/usr/bin"),
            ]),
        )
        .unwrap();
        assert_eq!(c.store.addr, Some("127.0.0.1:6379".parse().unwrap()));
        assert_eq!(c.tunnel.keepalive(), None);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(matches!(
            Config::from_sources("", env(&[("EDGEPOD_AUTH", "x")])),
            Err(ConfigError::Env { .. })
        ));
        assert!(matches!(
            Config::from_sources("[server]\nbogus = 1\n", Vec::new()),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(
            Config::from_sources("[ports]\nremote_base = 6000\nweb_base = 6010\n", Vec::new()),
            Err(ConfigError::Invalid(_))
        ));
    }
}
