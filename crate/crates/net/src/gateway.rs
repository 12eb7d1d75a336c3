//! Tunnel gateway: accepts reverse tunnel registrations from pods, listens
//! on each tunnel's remote port, and bridges web-view ports onto tunnels.

use std::collections::HashMap;
use std::io;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use edgepod_core::ports::ListenerProbe;
use edgepod_core::Millis;
use thiserror::Error;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{broadcast, mpsc};
use tokio::task::{AbortHandle, JoinHandle, JoinSet};
use tokio::time::{Instant, MissedTickBehavior};

use crate::frame::{read_frame, write_frame, Frame};
use crate::keepalive::{KeepalivePolicy, KeepaliveState, Verdict};
use crate::mux::{spawn_reader, spawn_stream, spawn_writer, Streams};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("port {0} already has a registration")]
    PortTaken(u16),
    #[error("no tunnel registered on port {0}")]
    TunnelMissing(u16),
    #[error("web port {0} already bridged")]
    BridgeExists(u16),
    #[error("bind {port}: {source}")]
    Bind { port: u16, source: io::Error },
    #[error("registration rejected: {0}")]
    Rejected(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub bind_host: IpAddr,
    /// Port pods dial to register tunnels; 0 picks one.
    pub control_port: u16,
    /// `None` disables keepalive probes.
    pub keepalive: Option<KeepalivePolicy>,
    /// Drop a tunnel after this long without inbound frames, new streams or
    /// keepalive probes.
    pub idle_timeout: Option<Duration>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            bind_host: IpAddr::V4(Ipv4Addr::LOCALHOST),
            control_port: 0,
            keepalive: Some(KeepalivePolicy::default()),
            idle_timeout: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TunnelRegistration {
    pub pod_name: String,
    pub remote_port: u16,
    pub target: String,
    pub established_at: Millis,
    pub last_keepalive_at: Millis,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WebBridge {
    pub web_port: u16,
    pub remote_port: u16,
    pub session_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TunnelEventKind {
    /// Keepalive or idle-timeout expiry; the pod should be treated as failing.
    Expired(String),
    /// The pod closed its side.
    Disconnected,
    /// Removed through [`TunnelGateway::unregister`].
    Unregistered,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TunnelEvent {
    pub pod_name: String,
    pub remote_port: u16,
    pub kind: TunnelEventKind,
}

struct TunnelSlot {
    registration: TunnelRegistration,
    generation: u64,
    task: JoinHandle<()>,
}

struct BridgeSlot {
    bridge: WebBridge,
    task: JoinHandle<()>,
}

#[derive(Default)]
struct Table {
    tunnels: HashMap<u16, TunnelSlot>,
    bridges: HashMap<u16, BridgeSlot>,
    next_generation: u64,
}

impl Table {
    /// Drop the tunnel on `port` and every bridge bound to it, aborting the
    /// bridges. Returns the tunnel slot and the bridge tasks to await.
    fn remove_tunnel(&mut self, port: u16) -> Option<(TunnelSlot, Vec<JoinHandle<()>>)> {
        let slot = self.tunnels.remove(&port)?;
        let bridged: Vec<u16> = self
            .bridges
            .iter()
            .filter(|(_, b)| b.bridge.remote_port == port)
            .map(|(&web, _)| web)
            .collect();
        let tasks = bridged
            .into_iter()
            .filter_map(|web| self.bridges.remove(&web))
            .map(|b| {
                b.task.abort();
                b.task
            })
            .collect();
        Some((slot, tasks))
    }
}

struct Shared {
    config: GatewayConfig,
    table: Mutex<Table>,
    events: broadcast::Sender<TunnelEvent>,
}

impl Shared {
    fn lock(&self) -> std::sync::MutexGuard<'_, Table> {
        self.table.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn emit(&self, pod_name: &str, remote_port: u16, kind: TunnelEventKind) {
        match &kind {
            TunnelEventKind::Expired(reason) => {
                tracing::warn!(pod = pod_name, remote_port, reason = reason.as_str(), "tunnel expired")
            }
            other => tracing::info!(pod = pod_name, remote_port, event = ?other, "tunnel closed"),
        }
        let _ = self.events.send(TunnelEvent {
            pod_name: pod_name.to_string(),
            remote_port,
            kind,
        });
    }
}

pub fn unix_millis() -> Millis {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as Millis)
        .unwrap_or(0)
}

#[derive(Clone)]
pub struct TunnelGateway {
    shared: Arc<Shared>,
    control_addr: SocketAddr,
    accept_task: AbortHandle,
}

impl std::fmt::Debug for TunnelGateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TunnelGateway").field("control_addr", &self.control_addr).finish()
    }
}

impl TunnelGateway {
    /// Bind the control listener and start accepting pod registrations.
    pub async fn start(config: GatewayConfig) -> Result<Self, GatewayError> {
        if let Some(policy) = &config.keepalive {
            policy.validate().map_err(GatewayError::Rejected)?;
        }
        let listener = TcpListener::bind((config.bind_host, config.control_port))
            .await
            .map_err(|source| GatewayError::Bind {
                port: config.control_port,
                source,
            })?;
        let control_addr = listener.local_addr()?;
        let (events, _) = broadcast::channel(256);
        let shared = Arc::new(Shared {
            config,
            table: Mutex::new(Table::default()),
            events,
        });
        let accept_shared = Arc::clone(&shared);
        let accept_task = tokio::spawn(async move {
            loop {
                match listener.accept().await {
                    Ok((conn, peer)) => {
                        let shared = Arc::clone(&accept_shared);
                        tokio::spawn(async move {
                            if let Err(e) = handle_hello(shared, conn).await {
                                tracing::debug!(%peer, error = %e, "registration failed");
                            }
                        });
                    }
                    Err(e) => {
                        tracing::warn!(error = %e, "control accept failed");
                        tokio::time::sleep(Duration::from_millis(50)).await;
                    }
                }
            }
        })
        .abort_handle();
        tracing::info!(%control_addr, "tunnel gateway listening");
        Ok(Self {
            shared,
            control_addr,
            accept_task,
        })
    }

    pub fn control_addr(&self) -> SocketAddr {
        self.control_addr
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.shared.config
    }

    pub fn subscribe(&self) -> broadcast::Receiver<TunnelEvent> {
        self.shared.events.subscribe()
    }

    pub fn registration(&self, remote_port: u16) -> Option<TunnelRegistration> {
        self.shared
            .lock()
            .tunnels
            .get(&remote_port)
            .map(|s| s.registration.clone())
    }

    pub fn registrations(&self) -> Vec<TunnelRegistration> {
        let mut all: Vec<_> = self
            .shared
            .lock()
            .tunnels
            .values()
            .map(|s| s.registration.clone())
            .collect();
        all.sort_by_key(|r| r.remote_port);
        all
    }

    pub fn is_registered(&self, remote_port: u16) -> bool {
        self.shared.lock().tunnels.contains_key(&remote_port)
    }

    /// Tear down the tunnel on `remote_port` and its bridges. Returns once
    /// their listeners are closed.
    pub async fn unregister(&self, remote_port: u16) -> bool {
        let removed = self.shared.lock().remove_tunnel(remote_port);
        let Some((slot, bridges)) = removed else {
            return false;
        };
        slot.task.abort();
        let _ = slot.task.await;
        for task in bridges {
            let _ = task.await;
        }
        self.shared
            .emit(&slot.registration.pod_name, remote_port, TunnelEventKind::Unregistered);
        true
    }

    /// Listen on `web_port` and relay each connection to the tunnel's
    /// remote port.
    pub async fn open_web_bridge(
        &self,
        session_id: &str,
        web_port: u16,
        remote_port: u16,
    ) -> Result<WebBridge, GatewayError> {
        {
            let table = self.shared.lock();
            if !table.tunnels.contains_key(&remote_port) {
                return Err(GatewayError::TunnelMissing(remote_port));
            }
            if table.bridges.contains_key(&web_port) {
                return Err(GatewayError::BridgeExists(web_port));
            }
        }
        let host = self.shared.config.bind_host;
        let listener = TcpListener::bind((host, web_port))
            .await
            .map_err(|source| GatewayError::Bind { port: web_port, source })?;
        let bridge = WebBridge {
            web_port,
            remote_port,
            session_id: session_id.to_string(),
        };
        let mut table = self.shared.lock();
        if !table.tunnels.contains_key(&remote_port) {
            return Err(GatewayError::TunnelMissing(remote_port));
        }
        if table.bridges.contains_key(&web_port) {
            return Err(GatewayError::BridgeExists(web_port));
        }
        let task = tokio::spawn(run_bridge(listener, SocketAddr::new(host, remote_port)));
        table.bridges.insert(
            web_port,
            BridgeSlot {
                bridge: bridge.clone(),
                task,
            },
        );
        tracing::info!(session_id, web_port, remote_port, "web bridge open");
        Ok(bridge)
    }

    /// Close the bridge on `web_port`; returns once its listener is gone.
    pub async fn close_web_bridge(&self, web_port: u16) -> bool {
        let removed = self.shared.lock().bridges.remove(&web_port);
        match removed {
            Some(slot) => {
                slot.task.abort();
                let _ = slot.task.await;
                true
            }
            None => false,
        }
    }

    pub fn bridge(&self, web_port: u16) -> Option<WebBridge> {
        self.shared.lock().bridges.get(&web_port).map(|b| b.bridge.clone())
    }

    pub fn bridges(&self) -> Vec<WebBridge> {
        let mut all: Vec<_> = self
            .shared
            .lock()
            .bridges
            .values()
            .map(|b| b.bridge.clone())
            .collect();
        all.sort_by_key(|b| b.web_port);
        all
    }

    /// Adapter for the port manager's stale-listener reclaim.
    pub fn listener_probe(&self) -> GatewayListeners {
        GatewayListeners { gateway: self.clone() }
    }

    /// Stop accepting registrations and tear everything down.
    pub fn shutdown(&self) {
        self.accept_task.abort();
        let mut table = self.shared.lock();
        for (_, slot) in table.tunnels.drain() {
            slot.task.abort();
        }
        for (_, slot) in table.bridges.drain() {
            slot.task.abort();
        }
    }
}

async fn run_bridge(listener: TcpListener, tunnel: SocketAddr) {
    // connections live in the set so aborting the bridge drops them too
    let mut conns = JoinSet::new();
    loop {
        let accepted = tokio::select! {
            a = listener.accept() => a,
            Some(_) = conns.join_next(), if !conns.is_empty() => continue,
        };
        let Ok((mut browser, _)) = accepted else {
            continue;
        };
        conns.spawn(async move {
            match TcpStream::connect(tunnel).await {
                Ok(mut upstream) => {
                    let _ = tokio::io::copy_bidirectional(&mut browser, &mut upstream).await;
                }
                Err(e) => tracing::debug!(%tunnel, error = %e, "bridge upstream refused"),
            }
        });
    }
}

async fn handle_hello(shared: Arc<Shared>, conn: TcpStream) -> Result<(), GatewayError> {
    conn.set_nodelay(true)?;
    let (mut read_half, mut write_half) = conn.into_split();
    let hello = tokio::time::timeout(Duration::from_secs(10), read_frame(&mut read_half))
        .await
        .map_err(|_| GatewayError::Rejected("hello timeout".into()))??;
    let Some(Frame::Hello {
        remote_port,
        pod_name,
        target,
    }) = hello
    else {
        return Err(GatewayError::Rejected(format!("expected HELLO, got {hello:?}")));
    };

    let reject = |reason: String| Frame::HelloAck(Err(reason));
    if shared.lock().tunnels.contains_key(&remote_port) {
        write_frame(&mut write_half, &reject(format!("port {remote_port} already registered"))).await?;
        return Err(GatewayError::PortTaken(remote_port));
    }
    let listener = match TcpListener::bind((shared.config.bind_host, remote_port)).await {
        Ok(l) => l,
        Err(source) => {
            write_frame(&mut write_half, &reject(format!("bind {remote_port}: {source}"))).await?;
            return Err(GatewayError::Bind {
                port: remote_port,
                source,
            });
        }
    };

    let now = unix_millis();
    let registration = TunnelRegistration {
        pod_name: pod_name.clone(),
        remote_port,
        target,
        established_at: now,
        last_keepalive_at: now,
    };
    let (ack_tx, ack_rx) = tokio::sync::oneshot::channel();
    let inserted = {
        let mut table = shared.lock();
        if table.tunnels.contains_key(&remote_port) {
            false
        } else {
            let generation = table.next_generation;
            table.next_generation += 1;
            let task = tokio::spawn(run_tunnel(
                Arc::clone(&shared),
                generation,
                registration.clone(),
                listener,
                read_half,
                write_half,
                ack_rx,
            ));
            table.tunnels.insert(
                remote_port,
                TunnelSlot {
                    registration,
                    generation,
                    task,
                },
            );
            true
        }
    };
    if !inserted {
        // the loser of a registration race; its listener bind would have failed first
        return Err(GatewayError::PortTaken(remote_port));
    }
    let _ = ack_tx.send(());
    tracing::info!(pod = pod_name.as_str(), remote_port, "tunnel registered");
    Ok(())
}

async fn run_tunnel(
    shared: Arc<Shared>,
    generation: u64,
    registration: TunnelRegistration,
    listener: TcpListener,
    read_half: tokio::net::tcp::OwnedReadHalf,
    mut write_half: tokio::net::tcp::OwnedWriteHalf,
    registered: tokio::sync::oneshot::Receiver<()>,
) {
    let remote_port = registration.remote_port;
    let pod = registration.pod_name.clone();
    if registered.await.is_err() || write_frame(&mut write_half, &Frame::HelloAck(Ok(()))).await.is_err() {
        finish(&shared, generation, &pod, remote_port, TunnelEventKind::Disconnected).await;
        return;
    }

    let mut tasks = JoinSet::new();
    let (frames_tx, frames_rx) = mpsc::channel::<Frame>(256);
    spawn_writer(&mut tasks, write_half, frames_rx);
    let mut inbound = spawn_reader(&mut tasks, read_half);
    let streams = Streams::default();
    let mut next_stream: u16 = 0;

    let config = &shared.config;
    let mut keepalive = config.keepalive.map(KeepaliveState::new);
    let tick_every = config
        .keepalive
        .map(|k| k.interval)
        .or(config.idle_timeout.map(|d| d / 4))
        .unwrap_or(Duration::from_secs(3600))
        .max(Duration::from_millis(1));
    let mut ticker = tokio::time::interval_at(Instant::now() + tick_every, tick_every);
    ticker.set_missed_tick_behavior(MissedTickBehavior::Delay);
    let mut last_traffic = Instant::now();
    let mut nonce: u8 = 0;

    let outcome = loop {
        tokio::select! {
            frame = inbound.recv() => {
                let Some(frame) = frame else {
                    break TunnelEventKind::Disconnected;
                };
                last_traffic = Instant::now();
                if let Some(k) = keepalive.as_mut() {
                    k.on_inbound();
                }
                match frame {
                    Frame::Pong(_) => {
                        if let Some(slot) = shared.lock().tunnels.get_mut(&remote_port) {
                            if slot.generation == generation {
                                slot.registration.last_keepalive_at = unix_millis();
                            }
                        }
                    }
                    Frame::Ping(n) => {
                        let _ = frames_tx.send(Frame::Pong(n)).await;
                    }
                    Frame::Data(id, bytes) => {
                        if !streams.deliver(id, bytes) {
                            tracing::trace!(stream = id, "data for closed stream");
                        }
                    }
                    Frame::Close(id) => streams.close(id),
                    other => {
                        tracing::warn!(pod = pod.as_str(), frame = ?other, "unexpected frame from pod");
                    }
                }
            }
            accepted = listener.accept() => {
                let Ok((conn, _)) = accepted else { continue };
                let _ = conn.set_nodelay(true);
                let mut id = next_stream;
                while streams.contains(id) {
                    id = id.wrapping_add(1);
                }
                next_stream = id.wrapping_add(1);
                if frames_tx.send(Frame::Open(id)).await.is_err() {
                    break TunnelEventKind::Disconnected;
                }
                last_traffic = Instant::now();
                spawn_stream(&mut tasks, id, conn, frames_tx.clone(), &streams);
            }
            _ = ticker.tick() => {
                if let Some(k) = keepalive.as_mut() {
                    if k.tick() == Verdict::Expired {
                        break TunnelEventKind::Expired(format!("{} keepalives missed", k.missed()));
                    }
                    nonce = nonce.wrapping_add(1);
                    let _ = frames_tx.send(Frame::Ping(nonce)).await;
                    last_traffic = Instant::now();
                }
                if let Some(idle) = config.idle_timeout {
                    if last_traffic.elapsed() >= idle {
                        break TunnelEventKind::Expired(format!("idle for {idle:?}"));
                    }
                }
            }
            Some(_) = tasks.join_next(), if !tasks.is_empty() => {}
        }
    };
    drop(listener);
    tasks.shutdown().await;
    finish(&shared, generation, &pod, remote_port, outcome).await;
}

async fn finish(shared: &Shared, generation: u64, pod: &str, remote_port: u16, kind: TunnelEventKind) {
    let removed = {
        let mut table = shared.lock();
        let ours = table
            .tunnels
            .get(&remote_port)
            .is_some_and(|s| s.generation == generation);
        if ours {
            table.remove_tunnel(remote_port)
        } else {
            None
        }
    };
    // our own slot handle is dropped, never awaited
    if let Some((_own, bridges)) = removed {
        for task in bridges {
            let _ = task.await;
        }
        shared.emit(pod, remote_port, kind);
    }
}

/// [`ListenerProbe`] over the gateway's own listeners. Ports held by some
/// other process count as listening and cannot be shut down.
#[derive(Debug, Clone)]
pub struct GatewayListeners {
    gateway: TunnelGateway,
}

impl ListenerProbe for GatewayListeners {
    fn is_listening(&self, port: u16) -> bool {
        {
            let table = self.gateway.shared.lock();
            if table.tunnels.contains_key(&port) || table.bridges.contains_key(&port) {
                return true;
            }
        }
        let addr = SocketAddr::new(self.gateway.shared.config.bind_host, port);
        std::net::TcpStream::connect_timeout(&addr, Duration::from_millis(200)).is_ok()
    }

    /// Must run where a tokio runtime is reachable, e.g. `spawn_blocking`.
    fn shut_down(&mut self, port: u16) -> bool {
        let ours = {
            let table = self.gateway.shared.lock();
            table.tunnels.contains_key(&port) || table.bridges.contains_key(&port)
        };
        if ours {
            let Ok(handle) = tokio::runtime::Handle::try_current() else {
                return false;
            };
            let gw = self.gateway.clone();
            return handle.block_on(async move { gw.close_web_bridge(port).await || gw.unregister(port).await });
        }
        let addr = SocketAddr::new(self.gateway.shared.config.bind_host, port);
        std::net::TcpStream::connect_timeout(&addr, Duration::from_millis(200)).is_err()
    }
}
