//! Wire a [`Config`] into a running service: tunnel gateway, index store,
//! orchestrator on the real runtime, HTTP router and background driver.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use edgepod_core::lifecycle::{LifecycleError, Orchestrator};
use edgepod_core::ports::{MemoryStore, PortError, PortManager};
use edgepod_core::reservation::{Inventory, Journal, ReservationBook, ReservationError};
use edgepod_core::telemetry::Registry;
use edgepod_core::{SharedClock, SystemClock};
use edgepod_net::store::RemoteStore;
use edgepod_net::{GatewayConfig, GatewayError, NetRuntime, TunnelGateway};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::runtime::Handle;
use tokio::sync::broadcast::error::RecvError;
use tokio::task::JoinHandle;

use crate::auth::{AuthError, AuthPolicy, Authenticator, UsersFile};
use crate::config::Config;
use crate::platform::{GatewayBridges, Platform, PlatformParts};

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Auth(#[from] AuthError),
    #[error(transparent)]
    Reservations(#[from] ReservationError),
    #[error(transparent)]
    Ports(#[from] PortError),
    #[error(transparent)]
    Lifecycle(#[from] LifecycleError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn read(path: &Path) -> Result<String, BuildError> {
    std::fs::read_to_string(path).map_err(|source| BuildError::Read {
        path: path.display().to_string(),
        source,
    })
}

pub struct Server {
    pub platform: Arc<Platform>,
    pub gateway: TunnelGateway,
    config: Config,
}

impl Server {
    /// Assemble the service. Must run inside a multi-threaded tokio runtime.
    pub async fn build(config: Config) -> Result<Self, BuildError> {
        let clock: SharedClock = Arc::new(SystemClock);
        let gateway = TunnelGateway::start(GatewayConfig {
            bind_host: config.tunnel.bind_host,
            control_port: config.tunnel.control_port,
            keepalive: config.tunnel.keepalive(),
            idle_timeout: config.tunnel.idle_timeout_ms.map(Duration::from_millis),
        })
        .await?;

        let store: Box<dyn edgepod_core::ports::IndexStore> = match config.store.addr {
            Some(addr) => Box::new(RemoteStore::new(addr)),
            None => Box::new(MemoryStore::new()),
        };
        let ports = Arc::new(PortManager::with_backends(
            config.ports.index_store(),
            store,
            Box::new(gateway.listener_probe()),
        )?);

        let users = match &config.auth.users_file {
            Some(p) => UsersFile::from_toml_str(&read(p)?)?.users,
            None => {
                tracing::warn!("no users file configured; every login will fail");
                Vec::new()
            }
        };
        let auth = Authenticator::new(
            users,
            AuthPolicy {
                token_ttl: Duration::from_secs(config.auth.token_ttl_s),
                throttle: Duration::from_millis(config.auth.throttle_ms),
            },
            Arc::clone(&clock),
        );

        let inventory = match &config.inventory.file {
            Some(p) => Inventory::from_toml_str(&read(p)?)?,
            None => Inventory::default(),
        };
        let book = match &config.reservations.journal {
            Some(p) => ReservationBook::with_journal(inventory, Journal::open(p)?)?,
            None => ReservationBook::new(inventory),
        };

        let handle = Handle::current();
        let runtime = NetRuntime::new(
            handle.clone(),
            gateway.clone(),
            Duration::from_millis(config.tunnel.step_timeout_ms),
        );
        let metrics = Arc::new(Registry::new(config.telemetry.retention_s * 1000));
        let orchestrator = Orchestrator::new(
            config.orchestrator(),
            Arc::clone(&clock),
            ports,
            Box::new(runtime),
            metrics,
        )?;

        let platform = Arc::new(Platform::new(PlatformParts {
            clock,
            auth,
            book,
            orchestrator,
            bridges: Box::new(GatewayBridges::new(handle, gateway.clone())),
            apps: config.app_requests(),
            uploads_dir: config.uploads.dir.clone(),
            max_upload_bytes: config.uploads.max_bytes,
        }));
        Ok(Self {
            platform,
            gateway,
            config,
        })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn router(&self) -> axum::Router {
        crate::http::router(Arc::clone(&self.platform))
    }

    /// Start the periodic driver and the tunnel event listener.
    pub fn spawn_background(&self) -> Vec<JoinHandle<()>> {
        let period = Duration::from_millis(self.config.server.drive_interval_ms);
        let driver = {
            let platform = Arc::clone(&self.platform);
            tokio::spawn(async move {
                let mut ticker = tokio::time::interval(period);
                ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
                loop {
                    ticker.tick().await;
                    let p = Arc::clone(&platform);
                    if let Err(e) = tokio::task::spawn_blocking(move || p.tick()).await {
                        tracing::error!(error = %e, "driver pass panicked");
                    }
                }
            })
        };
        let events = {
            let platform = Arc::clone(&self.platform);
            let mut rx = self.gateway.subscribe();
            tokio::spawn(async move {
                loop {
                    match rx.recv().await {
                        Ok(event) => {
                            let p = Arc::clone(&platform);
                            let _ = tokio::task::spawn_blocking(move || p.handle_tunnel_event(&event)).await;
                        }
                        Err(RecvError::Lagged(n)) => tracing::warn!(skipped = n, "tunnel events lagged"),
                        Err(RecvError::Closed) => break,
                    }
                }
            })
        };
        vec![driver, events]
    }

    /// Serve HTTP on `listener` until `shutdown` resolves.
    pub async fn serve(
        self,
        listener: TcpListener,
        shutdown: impl std::future::Future<Output = ()> + Send + 'static,
    ) -> std::io::Result<()> {
        let tasks = self.spawn_background();
        let result = axum::serve(listener, self.router())
            .with_graceful_shutdown(shutdown)
            .await;
        for t in tasks {
            t.abort();
        }
        self.gateway.shutdown();
        result
    }
}
