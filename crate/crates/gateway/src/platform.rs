//! The service behind the HTTP layer: sessions tie a user's reservation to a
//! pod and its web bridge.
//!
//! Every method is synchronous and may block (the orchestrator drives real
//! sockets through its runtime), so async callers go through
//! `spawn_blocking`. Lock order is orchestrator, then sessions, then book.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use edgepod_core::lifecycle::{LifecycleError, LifecycleEvent, Orchestrator, PodPhase, PodRecord};
use edgepod_core::reservation::{
    InventoryFilter, LabView, Reservation, ReservationBook, ReservationRequest, Window,
};
use edgepod_core::scheduler::ResourceRequest;
use edgepod_core::sim::NodeStatus;
use edgepod_core::telemetry::{MetricSample, Registry};
use edgepod_core::{Millis, SharedClock};
use edgepod_net::{TunnelEvent, TunnelEventKind, TunnelGateway};
use serde::{Deserialize, Serialize};
use tokio::runtime::Handle;

use crate::auth::{ApiToken, Authenticator};
use crate::error::ApiError;

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Opens and closes the per-session web bridges.
pub trait BridgeControl: Send + Sync {
    /// Open a bridge from `web_port` to `remote_port`. Opening an identical
    /// bridge again is a no-op.
    fn open(&self, session_id: &str, web_port: u16, remote_port: u16) -> Result<(), String>;
    fn close(&self, web_port: u16);
    fn is_open(&self, web_port: u16) -> bool;
}

/// Bookkeeping-only bridges for runs without a tunnel gateway. Clones share state.
#[derive(Debug, Default, Clone)]
pub struct NullBridges {
    open: Arc<Mutex<BTreeMap<u16, u16>>>,
}

impl NullBridges {
    pub fn open_count(&self) -> usize {
        lock(&self.open).len()
    }
}

impl BridgeControl for NullBridges {
    fn open(&self, _session_id: &str, web_port: u16, remote_port: u16) -> Result<(), String> {
        let mut open = lock(&self.open);
        match open.get(&web_port) {
            Some(r) if *r != remote_port => Err(format!("web port {web_port} bridged to {r}")),
            _ => {
                open.insert(web_port, remote_port);
                Ok(())
            }
        }
    }

    fn close(&self, web_port: u16) {
        lock(&self.open).remove(&web_port);
    }

    fn is_open(&self, web_port: u16) -> bool {
        lock(&self.open).contains_key(&web_port)
    }
}

/// Bridges on a live [`TunnelGateway`]. Blocks on `handle`, so it must not be
/// called from inside an async task.
#[derive(Clone)]
pub struct GatewayBridges {
    handle: Handle,
    gateway: TunnelGateway,
}

impl GatewayBridges {
    pub fn new(handle: Handle, gateway: TunnelGateway) -> Self {
        Self { handle, gateway }
    }
}

impl BridgeControl for GatewayBridges {
    fn open(&self, session_id: &str, web_port: u16, remote_port: u16) -> Result<(), String> {
        if let Some(b) = self.gateway.bridge(web_port) {
            if b.remote_port == remote_port {
                return Ok(());
            }
            self.handle.block_on(self.gateway.close_web_bridge(web_port));
        }
        self.handle
            .block_on(self.gateway.open_web_bridge(session_id, web_port, remote_port))
            .map(|_| ())
            .map_err(|e| e.to_string())
    }

    fn close(&self, web_port: u16) {
        self.handle.block_on(self.gateway.close_web_bridge(web_port));
    }

    fn is_open(&self, web_port: u16) -> bool {
        self.gateway.bridge(web_port).is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Requested,
    Provisioning,
    Live,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionDescriptor {
    pub session_id: String,
    pub user_id: String,
    pub reservation_id: String,
    pub app: String,
    pub pod_name: Option<String>,
    pub state: SessionState,
    pub web_port: Option<u16>,
    /// Why the session is not Live yet.
    pub reason: Option<String>,
    pub created_at: Millis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectRequest {
    pub reservation_id: String,
    pub app: String,
    /// Reattach to this session instead of opening a new instance.
    #[serde(default)]
    pub session_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReserveRequest {
    pub testbed_id: String,
    pub node_id: String,
    pub device_ids: Vec<String>,
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PodSummary {
    pub name: String,
    pub app: String,
    pub phase: PodPhase,
    pub ready: bool,
    pub reason: Option<String>,
    pub memory_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterView {
    /// Node capacities and allocations; admins only.
    pub nodes: Option<Vec<NodeStatus>>,
    pub pods: Vec<PodSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PodView {
    pub pod: PodRecord,
    pub memory_bytes: Option<u64>,
    pub events: Vec<LifecycleEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadReceipt {
    pub session_id: String,
    pub pod_name: String,
    pub path: String,
    pub bytes: usize,
}

const POD_EVENT_TAIL: usize = 50;

pub struct PlatformParts {
    pub clock: SharedClock,
    pub auth: Authenticator,
    pub book: ReservationBook,
    pub orchestrator: Orchestrator,
    pub bridges: Box<dyn BridgeControl>,
    pub apps: BTreeMap<String, ResourceRequest>,
    pub uploads_dir: PathBuf,
    pub max_upload_bytes: usize,
}

pub struct Platform {
    clock: SharedClock,
    auth: Authenticator,
    book: Mutex<ReservationBook>,
    orchestrator: Mutex<Orchestrator>,
    sessions: Mutex<BTreeMap<String, SessionDescriptor>>,
    bridges: Box<dyn BridgeControl>,
    apps: BTreeMap<String, ResourceRequest>,
    metrics: Arc<Registry>,
    uploads_dir: PathBuf,
    max_upload_bytes: usize,
    next_session: AtomicU64,
}

impl std::fmt::Debug for Platform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Platform")
            .field("sessions", &lock(&self.sessions).len())
            .finish()
    }
}

impl Platform {
    pub fn new(parts: PlatformParts) -> Self {
        let metrics = Arc::clone(parts.orchestrator.metrics());
        Self {
            clock: parts.clock,
            auth: parts.auth,
            book: Mutex::new(parts.book),
            orchestrator: Mutex::new(parts.orchestrator),
            sessions: Mutex::new(BTreeMap::new()),
            bridges: parts.bridges,
            apps: parts.apps,
            metrics,
            uploads_dir: parts.uploads_dir,
            max_upload_bytes: parts.max_upload_bytes,
            next_session: AtomicU64::new(1),
        }
    }

    pub fn metrics(&self) -> &Arc<Registry> {
        &self.metrics
    }

    pub fn max_upload_bytes(&self) -> usize {
        self.max_upload_bytes
    }

    /// Run `f` with the orchestrator locked.
    pub fn with_orchestrator<R>(&self, f: impl FnOnce(&mut Orchestrator) -> R) -> R {
        f(&mut lock(&self.orchestrator))
    }

    pub fn authenticate(&self, user_id: &str, password: &str) -> Result<ApiToken, ApiError> {
        Ok(self.auth.authenticate(user_id, password)?)
    }

    pub fn authorize(&self, token: &str) -> Result<ApiToken, ApiError> {
        Ok(self.auth.validate(token)?)
    }

    pub fn inventory(&self, filter: &InventoryFilter) -> Result<Vec<LabView>, ApiError> {
        Ok(lock(&self.book).list_inventory(filter)?)
    }

    pub fn reservations(&self, tok: &ApiToken) -> Vec<Reservation> {
        lock(&self.book)
            .calendar()
            .iter()
            .filter(|r| tok.is_admin() || r.user_id == tok.user_id)
            .cloned()
            .collect()
    }

    pub fn reserve(&self, tok: &ApiToken, req: ReserveRequest) -> Result<Reservation, ApiError> {
        let request = ReservationRequest {
            user_id: tok.user_id.clone(),
            testbed_id: req.testbed_id,
            node_id: req.node_id,
            device_ids: req.device_ids.into_iter().collect(),
            window: Window::new(req.start, req.end),
        };
        Ok(lock(&self.book).create_reservation(request, self.clock.now_secs())?)
    }

    pub fn cancel_reservation(&self, tok: &ApiToken, id: &str) -> Result<(), ApiError> {
        Ok(lock(&self.book).cancel_reservation(id, &tok.user_id, tok.is_admin())?)
    }

    fn new_session_id(&self) -> String {
        let n = self.next_session.fetch_add(1, Ordering::Relaxed);
        let salt: u32 = rand::random();
        format!("s{n:05}-{salt:08x}")
    }

    /// Check the reservation gate: the caller owns `reservation_id` and now
    /// lies inside its window.
    fn gate(&self, tok: &ApiToken, reservation_id: &str) -> Result<Reservation, ApiError> {
        let now = self.clock.now_secs();
        let book = lock(&self.book);
        let reservation = book
            .calendar()
            .get(reservation_id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("reservation {reservation_id}")))?;
        if reservation.user_id != tok.user_id && !tok.is_admin() {
            return Err(ApiError::forbidden(format!(
                "reservation {reservation_id} belongs to another user"
            )));
        }
        if !reservation.window.contains(now) {
            let next_window = if reservation.window.start > now {
                Some(reservation.window)
            } else {
                book.calendar().next_window_for(&reservation.user_id, now)
            };
            return Err(ApiError::Forbidden {
                message: format!(
                    "outside reservation window [{}, {})",
                    reservation.window.start, reservation.window.end
                ),
                next_window,
            });
        }
        Ok(reservation)
    }

    /// Open a new instance, or reattach to `req.session_id`. Returns the Live
    /// descriptor, or 503 with the Provisioning descriptor when the pod is
    /// not Ready yet.
    pub fn connect(&self, tok: &ApiToken, req: ConnectRequest) -> Result<SessionDescriptor, ApiError> {
        self.gate(tok, &req.reservation_id)?;
        let request = self
            .apps
            .get(&req.app)
            .cloned()
            .ok_or_else(|| ApiError::BadRequest(format!("unknown app {}", req.app)))?;

        let mut orch = lock(&self.orchestrator);
        let mut sessions = lock(&self.sessions);
        let (session_id, pod) = match &req.session_id {
            Some(id) => {
                let s = sessions
                    .get(id)
                    .ok_or_else(|| ApiError::NotFound(format!("session {id}")))?;
                if s.user_id != tok.user_id && !tok.is_admin() {
                    return Err(ApiError::forbidden(format!("session {id} belongs to another user")));
                }
                if s.state == SessionState::Closed {
                    return Err(ApiError::Conflict {
                        message: format!("session {id} is closed"),
                        detail: None,
                    });
                }
                if s.app != req.app {
                    return Err(ApiError::BadRequest(format!("session {id} runs {}", s.app)));
                }
                let pod = orch.connect_or_reuse(id, &req.app, &request)?;
                (id.clone(), pod)
            }
            None => {
                let id = self.new_session_id();
                let pod = orch.provision(&id, &req.app, &request)?;
                sessions.insert(
                    id.clone(),
                    SessionDescriptor {
                        session_id: id.clone(),
                        user_id: tok.user_id.clone(),
                        reservation_id: req.reservation_id.clone(),
                        app: req.app.clone(),
                        pod_name: None,
                        state: SessionState::Requested,
                        web_port: None,
                        reason: None,
                        created_at: self.clock.now_ms(),
                    },
                );
                (id, pod)
            }
        };
        let session = sessions.get_mut(&session_id).expect("session just resolved");
        session.reservation_id = req.reservation_id;
        session.pod_name = Some(pod.name.clone());
        self.settle(session, &pod);
        let out = session.clone();
        drop(sessions);
        orch.sample_metrics();
        match out.state {
            SessionState::Live => Ok(out),
            _ => Err(ApiError::unavailable(
                out.reason.clone().unwrap_or_else(|| "pod not ready".into()),
                Some(out),
            )),
        }
    }

    /// Bring `session` in line with its pod: Live with an open bridge when
    /// the pod is Ready, Provisioning otherwise.
    fn settle(&self, session: &mut SessionDescriptor, pod: &PodRecord) {
        if pod.phase == PodPhase::Ready {
            match self
                .bridges
                .open(&session.session_id, pod.ports.web_port, pod.ports.remote_port)
            {
                Ok(()) => {
                    session.state = SessionState::Live;
                    session.web_port = Some(pod.ports.web_port);
                    session.reason = None;
                }
                Err(e) => {
                    session.state = SessionState::Provisioning;
                    session.web_port = None;
                    session.reason = Some(format!("web bridge: {e}"));
                }
            }
            return;
        }
        if session.state == SessionState::Live {
            self.bridges.close(pod.ports.web_port);
        }
        session.state = SessionState::Provisioning;
        session.web_port = None;
        session.reason = Some(match (&pod.phase, &pod.reason) {
            (PodPhase::Failed, Some(r)) => format!("pod failed: {r}"),
            (phase, Some(r)) => format!("{phase:?}: {r}"),
            (phase, None) => format!("{phase:?}"),
        });
    }

    /// Tear down the session's pod and bridge. Closing a closed session is a
    /// no-op success.
    pub fn disconnect(&self, tok: &ApiToken, session_id: &str) -> Result<SessionDescriptor, ApiError> {
        let mut orch = lock(&self.orchestrator);
        let mut sessions = lock(&self.sessions);
        let session = sessions
            .get_mut(session_id)
            .ok_or_else(|| ApiError::NotFound(format!("session {session_id}")))?;
        if session.user_id != tok.user_id && !tok.is_admin() {
            return Err(ApiError::forbidden(format!(
                "session {session_id} belongs to another user"
            )));
        }
        if session.state == SessionState::Closed {
            return Ok(session.clone());
        }
        if let Some(pod) = orch.pod_for_session(session_id, &session.app) {
            self.bridges.close(pod.ports.web_port);
        }
        match orch.terminate(session_id) {
            Ok(()) | Err(LifecycleError::NotFound(_)) => {}
            Err(e) => return Err(e.into()),
        }
        session.state = SessionState::Closed;
        session.web_port = None;
        session.reason = None;
        let out = session.clone();
        drop(sessions);
        orch.sample_metrics();
        Ok(out)
    }

    pub fn list_sessions(&self, tok: &ApiToken) -> Vec<SessionDescriptor> {
        lock(&self.sessions)
            .values()
            .filter(|s| tok.is_admin() || s.user_id == tok.user_id)
            .cloned()
            .collect()
    }

    pub fn session(&self, tok: &ApiToken, session_id: &str) -> Result<SessionDescriptor, ApiError> {
        let sessions = lock(&self.sessions);
        let s = sessions
            .get(session_id)
            .ok_or_else(|| ApiError::NotFound(format!("session {session_id}")))?;
        if s.user_id != tok.user_id && !tok.is_admin() {
            return Err(ApiError::forbidden(format!(
                "session {session_id} belongs to another user"
            )));
        }
        Ok(s.clone())
    }

    /// Sessions that are not Closed.
    pub fn open_session_count(&self) -> usize {
        lock(&self.sessions)
            .values()
            .filter(|s| s.state != SessionState::Closed)
            .count()
    }

    pub fn cluster(&self, tok: &ApiToken) -> ClusterView {
        let mut orch = lock(&self.orchestrator);
        let pods = orch
            .pods()
            .map(|p| PodSummary {
                name: p.name.clone(),
                app: p.app.clone(),
                phase: p.phase,
                ready: p.ready,
                reason: p.reason.clone(),
                memory_bytes: orch.pod_memory(&p.name),
            })
            .collect();
        let nodes = tok.is_admin().then(|| orch.cluster_status());
        ClusterView { nodes, pods }
    }

    pub fn pod_status(&self, tok: &ApiToken, name: &str) -> Result<PodView, ApiError> {
        let orch = lock(&self.orchestrator);
        let pod = orch
            .pod(name)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("pod {name}")))?;
        if !tok.is_admin() {
            let owned = pod.owner_session.as_ref().is_some_and(|s| {
                lock(&self.sessions)
                    .get(s)
                    .is_some_and(|d| d.user_id == tok.user_id)
            });
            if !owned {
                return Err(ApiError::forbidden(format!("pod {name} is not yours")));
            }
        }
        let mut events: Vec<LifecycleEvent> =
            orch.events().filter(|e| e.pod == name).cloned().collect();
        let skip = events.len().saturating_sub(POD_EVENT_TAIL);
        events.drain(..skip);
        Ok(PodView {
            memory_bytes: orch.pod_memory(name),
            pod,
            events,
        })
    }

    /// Store `data` as `<uploads>/<pod>/<file_name>` for a Live session.
    pub fn upload(
        &self,
        tok: &ApiToken,
        session_id: &str,
        file_name: &str,
        data: &[u8],
    ) -> Result<UploadReceipt, ApiError> {
        if data.len() > self.max_upload_bytes {
            return Err(ApiError::PayloadTooLarge(format!(
                "upload exceeds {} bytes",
                self.max_upload_bytes
            )));
        }
        if !valid_file_name(file_name) {
            return Err(ApiError::BadRequest(format!("bad file name {file_name:?}")));
        }
        let session = self.session(tok, session_id)?;
        let pod = match (&session.state, &session.pod_name) {
            (SessionState::Live, Some(pod)) => pod.clone(),
            _ => {
                return Err(ApiError::Conflict {
                    message: format!("session {session_id} is not live"),
                    detail: None,
                })
            }
        };
        let dir = self.uploads_dir.join(&pod);
        std::fs::create_dir_all(&dir).map_err(|e| ApiError::Internal(e.to_string()))?;
        std::fs::write(dir.join(file_name), data).map_err(|e| ApiError::Internal(e.to_string()))?;
        Ok(UploadReceipt {
            session_id: session_id.to_string(),
            path: format!("{pod}/{file_name}"),
            pod_name: pod,
            bytes: data.len(),
        })
    }

    /// One driver pass: probes, pending sweep and metrics, then session
    /// reconciliation.
    pub fn tick(&self) {
        let mut orch = lock(&self.orchestrator);
        orch.drive();
        for signal in orch.drain_scale_signals() {
            tracing::debug!(app = %signal.app, target = signal.target_replicas, "scale signal");
        }
        self.reconcile(&orch);
    }

    fn reconcile(&self, orch: &Orchestrator) {
        let mut sessions = lock(&self.sessions);
        for session in sessions.values_mut() {
            if session.state == SessionState::Closed {
                continue;
            }
            let Some(pod) = orch.pod_for_session(&session.session_id, &session.app) else {
                continue;
            };
            let bridged = pod.phase == PodPhase::Ready
                && session.state == SessionState::Live
                && self.bridges.is_open(pod.ports.web_port);
            if !bridged {
                let was = session.state;
                self.settle(session, pod);
                if was != session.state {
                    tracing::info!(session = %session.session_id, state = ?session.state, "session state changed");
                }
            }
        }
    }

    /// React to a tunnel dropping underneath a pod: restart it and reopen
    /// its bridge.
    pub fn handle_tunnel_event(&self, event: &TunnelEvent) {
        let reason = match &event.kind {
            TunnelEventKind::Expired(r) => r.clone(),
            TunnelEventKind::Disconnected => "tunnel disconnected".to_string(),
            TunnelEventKind::Unregistered => return,
        };
        let mut orch = lock(&self.orchestrator);
        if orch.pod(&event.pod_name).is_none() {
            return;
        }
        tracing::warn!(pod = %event.pod_name, %reason, "tunnel lost");
        if let Err(e) = orch.notify_tunnel_expired(&event.pod_name) {
            tracing::warn!(pod = %event.pod_name, error = %e, "restart after tunnel loss failed");
        }
        self.reconcile(&orch);
    }

    /// Record one served request.
    pub fn record_request(&self, route: &str, method: &str, status: u16, elapsed_ms: f64) {
        let now = self.clock.now_ms();
        let status = status.to_string();
        let labels = [("method", method), ("route", route), ("status", status.as_str())];
        let _ = self.metrics.add("http_requests_total", &labels, 1.0, now);
        let _ = self.metrics.record(MetricSample::new(
            "http_request_duration_ms",
            &[("method", method), ("route", route)],
            elapsed_ms,
            now,
        ));
    }

    pub fn scrape(&self) -> String {
        self.metrics.scrape_exposition()
    }
}

fn valid_file_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 255
        && name != "."
        && name != ".."
        && !name.contains(['/', '\\', '\0'])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_names() {
        assert!(valid_file_name("capture.iq"));
        assert!(!valid_file_name(""));
        assert!(!valid_file_name(".."));
        assert!(!valid_file_name("../etc/passwd"));
        assert!(!valid_file_name("a\\b"));
    }

    #[test]
    fn null_bridges_are_idempotent() {
        let b = NullBridges::default();
        b.open("s", 6080, 2200).unwrap();
        b.open("s", 6080, 2200).unwrap();
        assert!(b.open("t", 6080, 2201).is_err());
        assert_eq!(b.open_count(), 1);
        b.close(6080);
        assert!(!b.is_open(6080));
    }
}
