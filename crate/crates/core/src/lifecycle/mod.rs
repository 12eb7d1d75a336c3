//! Experiment pod lifecycle.
//!
//! [`Orchestrator`] owns the scheduler, the node agents and every live
//! [`PodRecord`]. A provision runs the whole pipeline synchronously against
//! the injected clock: ports from the index store, bind, image pull, the
//! ordered startup plan, and finally `Ready`. Pods keep their ordinal name and
//! ports across probe-driven restarts.

mod runtime;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Millis, SharedClock};
use crate::ports::{PortAssignment, PortError, PortManager};
use crate::scheduler::{NodeDescriptor, ResourceRequest, Scheduler, SchedulerError, GIB};
use crate::sim::{
    plan_scale, AgentConfig, LifecycleAction, NodeAgent, NodeStatus, ProbeKind, ProbeResult,
    ScaleSignal, SimClusterSpec, SimError,
};
use crate::telemetry::{MetricSample, Registry};

pub use runtime::{PodRuntime, RuntimeCall, SimRuntime};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LifecycleError {
    #[error(transparent)]
    Ports(#[from] PortError),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("session {session_id} already owns {pod}")]
    SessionBusy { session_id: String, pod: String },
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PodPhase {
    Pending,
    Binding,
    Pulling,
    Starting,
    Ready,
    Terminating,
    Failed,
}

impl std::fmt::Display for PodPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartupStep {
    EstablishReverseTunnel,
    StartDisplayServer,
    StartDesktop,
}

impl StartupStep {
    pub fn as_str(&self) -> &'static str {
        match self {
            StartupStep::EstablishReverseTunnel => "establish-reverse-tunnel",
            StartupStep::StartDisplayServer => "start-display-server",
            StartupStep::StartDesktop => "start-desktop",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartupPlan {
    pub steps: Vec<StartupStep>,
    pub step_timeout: Duration,
}

impl Default for StartupPlan {
    fn default() -> Self {
        Self {
            steps: vec![
                StartupStep::EstablishReverseTunnel,
                StartupStep::StartDisplayServer,
                StartupStep::StartDesktop,
            ],
            step_timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub readiness_period_s: f64,
    pub liveness_period_s: f64,
    pub failure_threshold: u32,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            readiness_period_s: 5.0,
            liveness_period_s: 10.0,
            failure_threshold: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PodRecord {
    pub name: String,
    pub app: String,
    pub index: u32,
    pub phase: PodPhase,
    /// Readiness condition; false while readiness probes fail.
    pub ready: bool,
    pub node_id: Option<String>,
    pub request: ResourceRequest,
    pub ports: PortAssignment,
    pub owner_session: Option<String>,
    pub created_at: Millis,
    pub ready_at: Option<Millis>,
    pub reason: Option<String>,
    pub restarts: u32,
}

impl PodRecord {
    pub fn is_live(&self) -> bool {
        self.phase == PodPhase::Ready
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EventKind {
    Phase {
        from: Option<PodPhase>,
        to: PodPhase,
        reason: String,
    },
    Step {
        step: StartupStep,
        ok: bool,
    },
    Cleanup {
        what: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifecycleEvent {
    pub timestamp_ms: Millis,
    pub pod: String,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Result of a probe tick.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProbeOutcome {
    Healthy,
    NotReady,
    BecameReady,
    Restarted,
    Failed(String),
}

#[derive(Debug, Default, Clone, Copy)]
struct ProbeCounters {
    liveness_failures: u32,
    next_readiness: Millis,
    next_liveness: Millis,
}

const EVENT_LOG_CAP: usize = 20_000;

#[derive(Debug, Clone)]
pub struct OrchestratorConfig {
    pub cluster: SimClusterSpec,
    pub plan: StartupPlan,
    pub probes: ProbeConfig,
    /// Request used when replicas are created from a scale signal.
    pub default_request: ResourceRequest,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            cluster: SimClusterSpec::desk_scale(),
            plan: StartupPlan::default(),
            probes: ProbeConfig::default(),
            default_request: ResourceRequest::new(500, 2 * GIB),
        }
    }
}

pub struct Orchestrator {
    clock: SharedClock,
    config: OrchestratorConfig,
    scheduler: Scheduler,
    agents: BTreeMap<String, NodeAgent>,
    ports: Arc<PortManager>,
    runtime: Box<dyn PodRuntime>,
    metrics: Arc<Registry>,
    pods: BTreeMap<String, PodRecord>,
    sessions: BTreeMap<(String, String), String>,
    closed_sessions: BTreeSet<String>,
    probe_state: BTreeMap<String, ProbeCounters>,
    events: VecDeque<LifecycleEvent>,
    scale_outbox: Vec<ScaleSignal>,
}

impl std::fmt::Debug for Orchestrator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Orchestrator")
            .field("pods", &self.pods.len())
            .field("sessions", &self.sessions.len())
            .finish()
    }
}

impl Orchestrator {
    pub fn new(
        config: OrchestratorConfig,
        clock: SharedClock,
        ports: Arc<PortManager>,
        runtime: Box<dyn PodRuntime>,
        metrics: Arc<Registry>,
    ) -> Result<Self, LifecycleError> {
        config.cluster.validate()?;
        let agent_config = AgentConfig::from_spec(&config.cluster);
        let agents = config
            .cluster
            .all_nodes()
            .into_iter()
            .map(|n| (n.node_id.clone(), NodeAgent::new(n.node_id, agent_config)))
            .collect();
        Ok(Self {
            scheduler: Scheduler::new(config.cluster.all_nodes()),
            clock,
            config,
            agents,
            ports,
            runtime,
            metrics,
            pods: BTreeMap::new(),
            sessions: BTreeMap::new(),
            closed_sessions: BTreeSet::new(),
            probe_state: BTreeMap::new(),
            events: VecDeque::new(),
            scale_outbox: Vec::new(),
        })
    }

    pub fn now(&self) -> Millis {
        self.clock.now_ms()
    }

    pub fn config(&self) -> &OrchestratorConfig {
        &self.config
    }

    pub fn ports(&self) -> &Arc<PortManager> {
        &self.ports
    }

    pub fn metrics(&self) -> &Arc<Registry> {
        &self.metrics
    }

    pub fn nodes(&self) -> &[NodeDescriptor] {
        self.scheduler.nodes()
    }

    pub fn pod(&self, name: &str) -> Option<&PodRecord> {
        self.pods.get(name)
    }

    pub fn pods(&self) -> impl Iterator<Item = &PodRecord> {
        self.pods.values()
    }

    pub fn pod_for_session(&self, session_id: &str, app: &str) -> Option<&PodRecord> {
        self.sessions
            .get(&(session_id.to_string(), app.to_string()))
            .and_then(|name| self.pods.get(name))
    }

    pub fn events(&self) -> impl Iterator<Item = &LifecycleEvent> {
        self.events.iter()
    }

    pub fn drain_scale_signals(&mut self) -> Vec<ScaleSignal> {
        std::mem::take(&mut self.scale_outbox)
    }

    pub fn set_node_draining(&mut self, node_id: &str, draining: bool) -> Result<(), LifecycleError> {
        self.agents
            .get_mut(node_id)
            .ok_or_else(|| LifecycleError::NotFound(format!("node {node_id}")))?
            .set_draining(draining);
        if !draining {
            self.schedule_pending();
        }
        Ok(())
    }

    /// Apply a node label or capacity change and retry pending pods.
    pub fn update_node(&mut self, node: NodeDescriptor) -> Result<(), LifecycleError> {
        self.scheduler
            .update_node(node)
            .map_err(|e| LifecycleError::NotFound(e.to_string()))?;
        self.schedule_pending();
        Ok(())
    }

    fn emit(&mut self, pod: &str, kind: EventKind) {
        let event = LifecycleEvent {
            timestamp_ms: self.clock.now_ms(),
            pod: pod.to_string(),
            kind,
        };
        match &event.kind {
            EventKind::Phase { from, to, reason } => {
                tracing::info!(
                    timestamp_ms = event.timestamp_ms,
                    pod,
                    old_phase = ?from,
                    new_phase = ?to,
                    reason = reason.as_str(),
                    "pod phase"
                );
                self.count("pod_phase_transitions_total", &[("phase", &to.to_string())]);
            }
            EventKind::Step { step, ok } => {
                tracing::debug!(pod, step = step.as_str(), ok, "startup step")
            }
            EventKind::Cleanup { what } => tracing::debug!(pod, what = what.as_str(), "cleanup"),
        }
        if self.events.len() == EVENT_LOG_CAP {
            self.events.pop_front();
        }
        self.events.push_back(event);
    }

    fn count(&self, name: &str, labels: &[(&str, &str)]) {
        if let Err(e) = self.metrics.add(name, labels, 1.0, self.clock.now_ms()) {
            tracing::debug!(error = %e, "metric dropped");
        }
    }

    fn gauge(&self, name: &str, labels: &[(&str, &str)], value: f64) {
        let sample = MetricSample::new(name, labels, value, self.clock.now_ms());
        if let Err(e) = self.metrics.record(sample) {
            tracing::debug!(error = %e, "metric dropped");
        }
    }

    fn set_phase(&mut self, pod: &str, to: PodPhase, reason: impl Into<String>) {
        let reason = reason.into();
        let Some(record) = self.pods.get_mut(pod) else {
            return;
        };
        let from = record.phase;
        record.phase = to;
        record.reason = (!reason.is_empty()).then(|| reason.clone());
        self.emit(
            pod,
            EventKind::Phase {
                from: Some(from),
                to,
                reason,
            },
        );
    }

    /// Create a pod for `session_id`, run it through the pipeline and return
    /// its record. A pod that cannot be placed comes back `Pending` with the
    /// scheduler's reason; a failed startup step comes back `Failed`.
    pub fn provision(
        &mut self,
        session_id: &str,
        app: &str,
        request: &ResourceRequest,
    ) -> Result<PodRecord, LifecycleError> {
        request
            .validate()
            .map_err(|e| LifecycleError::InvalidRequest(e.to_string()))?;
        if app.is_empty() || !app.chars().all(|c| c.is_ascii_alphanumeric() || c == '-') {
            return Err(LifecycleError::InvalidRequest(format!("bad app name {app:?}")));
        }
        let session_key = (session_id.to_string(), app.to_string());
        if let Some(existing) = self.sessions.get(&session_key) {
            return Err(LifecycleError::SessionBusy {
                session_id: session_id.to_string(),
                pod: existing.clone(),
            });
        }

        let now = self.clock.now_ms();
        let allocation = self.ports.allocate(app, session_id, now)?;
        if let Some(signal) = allocation.scale_signal.clone() {
            self.count("scale_signals_total", &[("app", app)]);
            self.scale_outbox.push(signal);
        }
        let name = allocation.key.clone();
        let record = PodRecord {
            name: name.clone(),
            app: app.to_string(),
            index: allocation.assignment.index,
            phase: PodPhase::Pending,
            ready: false,
            node_id: None,
            request: request.clone(),
            ports: allocation.assignment,
            owner_session: Some(session_id.to_string()),
            created_at: now,
            ready_at: None,
            reason: None,
            restarts: 0,
        };
        self.pods.insert(name.clone(), record);
        self.sessions.insert(session_key, name.clone());
        self.closed_sessions.remove(session_id);
        self.emit(
            &name,
            EventKind::Phase {
                from: None,
                to: PodPhase::Pending,
                reason: "created".into(),
            },
        );
        self.try_schedule(&name);
        self.gauge_pending();
        Ok(self.pods[&name].clone())
    }

    fn gauge_pending(&self) {
        let pending = self
            .pods
            .values()
            .filter(|p| p.phase == PodPhase::Pending)
            .count();
        self.gauge("scheduler_pending_pods", &[], pending as f64);
    }

    /// Bind and start a Pending pod. Returns true when it left Pending.
    fn try_schedule(&mut self, name: &str) -> bool {
        let Some(record) = self.pods.get(name).cloned() else {
            return false;
        };
        if record.phase != PodPhase::Pending {
            return false;
        }
        let now = self.clock.now_ms();
        let decision = match self.scheduler.bind(name, &record.request, now) {
            Ok(d) => d,
            Err(SchedulerError::NoFeasibleNode { reason }) => {
                if record.reason.as_deref() != Some(reason.as_str()) {
                    self.set_phase(name, PodPhase::Pending, reason);
                }
                return false;
            }
            Err(e) => {
                self.set_phase(name, PodPhase::Pending, e.to_string());
                return false;
            }
        };
        self.count("scheduler_binds_total", &[("node", &decision.node_id)]);
        self.gauge(
            "pod_scheduling_delay_ms",
            &[("pod", name)],
            decision.decided_at.saturating_sub(record.created_at) as f64,
        );
        if let Some(r) = self.pods.get_mut(name) {
            r.node_id = Some(decision.node_id.clone());
        }
        self.set_phase(
            name,
            PodPhase::Binding,
            format!("bound to {} (score {:.4})", decision.node_id, decision.score),
        );

        self.set_phase(name, PodPhase::Pulling, format!("pulling {}:latest", record.app));
        let clock = Arc::clone(&self.clock);
        let agent = self
            .agents
            .get_mut(&decision.node_id)
            .expect("agent per scheduler node");
        match agent.accept_bind(&decision, &record.app, &record.request, clock.as_ref()) {
            Ok(_) => {}
            Err(e) => {
                self.scheduler.unbind(name);
                if let Some(r) = self.pods.get_mut(name) {
                    r.node_id = None;
                }
                self.set_phase(name, PodPhase::Pending, e.to_string());
                return false;
            }
        }
        self.start_pod(name, "started");
        true
    }

    /// Start container processes and run the startup plan. The pod must be
    /// hosted by its node agent.
    fn start_pod(&mut self, name: &str, reason: &str) {
        let node = self.pods[name].node_id.clone().expect("bound pod");
        let now = self.clock.now_ms();
        if let Some(agent) = self.agents.get_mut(&node) {
            let _ = agent.start_container(name, now);
        }
        self.set_phase(name, PodPhase::Starting, reason);
        for step in self.config.plan.steps.clone() {
            let record = self.pods[name].clone();
            let outcome = self.runtime.run_step(&record, step);
            let failure = match outcome {
                Ok(took) if took > self.config.plan.step_timeout => {
                    if self.runtime.charges_clock() {
                        self.clock.sleep(self.config.plan.step_timeout);
                    }
                    Some(format!(
                        "startup-timeout: {} exceeded {:?}",
                        step.as_str(),
                        self.config.plan.step_timeout
                    ))
                }
                Ok(took) => {
                    if self.runtime.charges_clock() {
                        self.clock.sleep(took);
                    }
                    None
                }
                Err(msg) => Some(format!("{} failed: {msg}", step.as_str())),
            };
            self.emit(
                name,
                EventKind::Step {
                    step,
                    ok: failure.is_none(),
                },
            );
            if let Some(reason) = failure {
                self.fail_pod(name, reason);
                return;
            }
        }
        let now = self.clock.now_ms();
        if let Some(agent) = self.agents.get_mut(&node) {
            let _ = agent.set_ready(name, true);
        }
        if let Some(r) = self.pods.get_mut(name) {
            r.ready = true;
            r.ready_at = Some(now);
        }
        let periods = self.config.probes;
        self.probe_state.insert(
            name.to_string(),
            ProbeCounters {
                liveness_failures: 0,
                next_readiness: now + (periods.readiness_period_s * 1000.0) as u64,
                next_liveness: now + (periods.liveness_period_s * 1000.0) as u64,
            },
        );
        self.set_phase(name, PodPhase::Ready, "startup plan complete");
    }

    /// Stop a pod's processes and release its node, keeping its index.
    fn fail_pod(&mut self, name: &str, reason: String) {
        let record = self.pods[name].clone();
        self.runtime.stop_processes(&record);
        self.runtime.close_tunnel(&record);
        if let Some(node) = &record.node_id {
            self.scheduler.unbind(name);
            if let Some(agent) = self.agents.get_mut(node) {
                agent.remove_pod(name);
            }
        }
        self.probe_state.remove(name);
        if let Some(r) = self.pods.get_mut(name) {
            r.node_id = None;
            r.ready = false;
        }
        self.set_phase(name, PodPhase::Failed, reason);
        self.schedule_pending();
    }

    /// Return the session's live pod for `app`, or provision one. A Failed
    /// pod is cleaned up and replaced.
    pub fn connect_or_reuse(
        &mut self,
        session_id: &str,
        app: &str,
        request: &ResourceRequest,
    ) -> Result<PodRecord, LifecycleError> {
        if let Some(pod) = self.pod_for_session(session_id, app).cloned() {
            if pod.phase != PodPhase::Failed {
                return Ok(pod);
            }
            self.terminate_pod(&pod.name);
        }
        self.provision(session_id, app, request)
    }

    /// Tear down every pod owned by `session_id`. Terminating an already
    /// closed session is a no-op.
    pub fn terminate(&mut self, session_id: &str) -> Result<(), LifecycleError> {
        let owned: Vec<String> = self
            .sessions
            .iter()
            .filter(|((s, _), _)| s == session_id)
            .map(|(_, pod)| pod.clone())
            .collect();
        if owned.is_empty() {
            return if self.closed_sessions.contains(session_id) {
                Ok(())
            } else {
                Err(LifecycleError::NotFound(format!("session {session_id}")))
            };
        }
        for pod in owned {
            self.terminate_pod(&pod);
        }
        self.closed_sessions.insert(session_id.to_string());
        self.schedule_pending();
        Ok(())
    }

    fn terminate_pod(&mut self, name: &str) {
        let Some(record) = self.pods.get(name).cloned() else {
            return;
        };
        self.set_phase(name, PodPhase::Terminating, "terminate requested");
        if record.node_id.is_some() {
            self.runtime.stop_processes(&record);
            self.emit(name, EventKind::Cleanup { what: "processes-stopped".into() });
            self.runtime.close_tunnel(&record);
            self.emit(name, EventKind::Cleanup { what: "tunnel-closed".into() });
        }
        if let Some(node) = self.scheduler.unbind(name) {
            if let Some(agent) = self.agents.get_mut(&node) {
                agent.remove_pod(name);
            }
            self.emit(name, EventKind::Cleanup { what: "allocation-released".into() });
        }
        match self.ports.release(name) {
            Ok(()) => {
                self.emit(name, EventKind::Cleanup { what: "index-released".into() });
                self.emit(name, EventKind::Cleanup { what: "ports-returned".into() });
            }
            Err(e) => tracing::warn!(pod = name, error = %e, "index release failed"),
        }
        self.probe_state.remove(name);
        self.pods.remove(name);
        if let Some(session) = &record.owner_session {
            self.sessions.remove(&(session.clone(), record.app.clone()));
        }
        self.gauge("pod_memory_bytes", &[("pod", name)], 0.0);
        self.gauge_pending();
    }

    /// Retry Pending pods in creation order. Returns how many were placed.
    pub fn schedule_pending(&mut self) -> usize {
        let mut pending: Vec<(Millis, String)> = self
            .pods
            .values()
            .filter(|p| p.phase == PodPhase::Pending)
            .map(|p| (p.created_at, p.name.clone()))
            .collect();
        pending.sort();
        let placed = pending
            .into_iter()
            .filter(|(_, name)| self.try_schedule(name))
            .count();
        if placed > 0 {
            self.gauge_pending();
        }
        placed
    }

    /// Run readiness then liveness probes on one pod.
    pub fn probe_tick(&mut self, name: &str) -> Result<ProbeOutcome, LifecycleError> {
        let outcome = self.probe_one(name, ProbeKind::Readiness)?;
        if outcome != ProbeOutcome::Healthy && outcome != ProbeOutcome::BecameReady {
            if outcome != ProbeOutcome::NotReady {
                return Ok(outcome);
            }
            let live = self.probe_one(name, ProbeKind::Liveness)?;
            return Ok(if live == ProbeOutcome::Healthy { ProbeOutcome::NotReady } else { live });
        }
        let live = self.probe_one(name, ProbeKind::Liveness)?;
        Ok(if live == ProbeOutcome::Healthy { outcome } else { live })
    }

    fn probe_one(&mut self, name: &str, kind: ProbeKind) -> Result<ProbeOutcome, LifecycleError> {
        let record = self
            .pods
            .get(name)
            .cloned()
            .ok_or_else(|| LifecycleError::NotFound(format!("pod {name}")))?;
        if !matches!(record.phase, PodPhase::Ready | PodPhase::Starting) {
            return Err(LifecycleError::InvalidRequest(format!(
                "pod {name} is {}, probes need Ready or Starting",
                record.phase
            )));
        }
        let ok = self.runtime.probe(&record, kind);
        let now = self.clock.now_ms();
        if let Some(node) = &record.node_id {
            if let Some(agent) = self.agents.get_mut(node) {
                let _ = agent.record_probe(name, ProbeResult { kind, ok, at: now });
            }
        }
        match kind {
            ProbeKind::Readiness => {
                if ok == record.ready {
                    return Ok(if ok { ProbeOutcome::Healthy } else { ProbeOutcome::NotReady });
                }
                if let Some(r) = self.pods.get_mut(name) {
                    r.ready = ok;
                }
                if let Some(agent) = record.node_id.as_ref().and_then(|n| self.agents.get_mut(n)) {
                    let _ = agent.set_ready(name, ok);
                }
                Ok(if ok { ProbeOutcome::BecameReady } else { ProbeOutcome::NotReady })
            }
            ProbeKind::Liveness => {
                let threshold = self.config.probes.failure_threshold.max(1);
                let counters = self.probe_state.entry(name.to_string()).or_default();
                if ok {
                    counters.liveness_failures = 0;
                    return Ok(ProbeOutcome::Healthy);
                }
                counters.liveness_failures += 1;
                if counters.liveness_failures < threshold {
                    return Ok(ProbeOutcome::Healthy);
                }
                let failures = counters.liveness_failures;
                Ok(self.restart(name, format!("liveness failed {failures} times")))
            }
        }
    }

    /// Re-run the startup plan on the same node, keeping name, index and ports.
    fn restart(&mut self, name: &str, reason: String) -> ProbeOutcome {
        let record = self.pods[name].clone();
        self.runtime.stop_processes(&record);
        self.runtime.close_tunnel(&record);
        if let Some(r) = self.pods.get_mut(name) {
            r.restarts += 1;
            r.ready = false;
        }
        self.count("pod_restarts_total", &[("pod", name)]);
        self.start_pod(name, &format!("restart: {reason}"));
        match self.pods.get(name) {
            Some(p) if p.phase == PodPhase::Ready => ProbeOutcome::Restarted,
            Some(p) => ProbeOutcome::Failed(p.reason.clone().unwrap_or_default()),
            None => ProbeOutcome::Failed("pod vanished".into()),
        }
    }

    /// Tunnel keepalive expiry; handled like a liveness failure past threshold.
    pub fn notify_tunnel_expired(&mut self, name: &str) -> Result<ProbeOutcome, LifecycleError> {
        let phase = self
            .pods
            .get(name)
            .map(|p| p.phase)
            .ok_or_else(|| LifecycleError::NotFound(format!("pod {name}")))?;
        if phase != PodPhase::Ready {
            return Ok(ProbeOutcome::Healthy);
        }
        Ok(self.restart(name, "tunnel keepalive expired".into()))
    }

    /// Periodic work: due probes, pending sweep and memory gauges.
    pub fn drive(&mut self) {
        let now = self.clock.now_ms();
        let due: Vec<(String, bool, bool)> = self
            .probe_state
            .iter()
            .map(|(n, c)| (n.clone(), now >= c.next_readiness, now >= c.next_liveness))
            .collect();
        let probes = self.config.probes;
        for (name, readiness, liveness) in due {
            if readiness {
                let _ = self.probe_one(&name, ProbeKind::Readiness);
                if let Some(c) = self.probe_state.get_mut(&name) {
                    c.next_readiness = now + (probes.readiness_period_s * 1000.0) as u64;
                }
            }
            if liveness {
                let _ = self.probe_one(&name, ProbeKind::Liveness);
                if let Some(c) = self.probe_state.get_mut(&name) {
                    c.next_liveness = now + (probes.liveness_period_s * 1000.0) as u64;
                }
            }
        }
        self.schedule_pending();
        self.sample_metrics();
    }

    /// Record current memory per pod and node.
    pub fn sample_metrics(&mut self) {
        let now = self.clock.now_ms();
        let mut samples = Vec::new();
        for agent in self.agents.values_mut() {
            let status = agent.report_status(now);
            for pod in &status.pods {
                samples.push(MetricSample::new(
                    "pod_memory_bytes",
                    &[("pod", &pod.name)],
                    pod.measured_mem_bytes as f64,
                    now,
                ));
            }
            samples.push(MetricSample::new(
                "node_memory_bytes",
                &[("node", &status.node_id)],
                status.measured_mem_bytes as f64,
                now,
            ));
            samples.push(MetricSample::new(
                "node_allocated_memory_bytes",
                &[("node", &status.node_id)],
                status.allocated_mem_bytes as f64,
                now,
            ));
        }
        for s in samples {
            if let Err(e) = self.metrics.record(s) {
                tracing::debug!(error = %e, "metric dropped");
            }
        }
    }

    /// Measured memory of a pod right now.
    pub fn pod_memory(&self, name: &str) -> Option<u64> {
        let pod = self.pods.get(name)?;
        let node = pod.node_id.as_ref()?;
        self.agents.get(node)?.memory_of(name, self.clock.now_ms())
    }

    pub fn cluster_status(&mut self) -> Vec<NodeStatus> {
        let now = self.clock.now_ms();
        self.agents.values_mut().map(|a| a.report_status(now)).collect()
    }

    pub fn node_status(&mut self, node_id: &str) -> Option<NodeStatus> {
        let now = self.clock.now_ms();
        self.agents.get_mut(node_id).map(|a| a.report_status(now))
    }

    /// Reconcile the live replica count of `signal.app` toward the target.
    pub fn apply_scale(&mut self, signal: &ScaleSignal) -> Result<Vec<LifecycleAction>, LifecycleError> {
        let live: BTreeSet<u32> = self
            .pods
            .values()
            .filter(|p| p.app == signal.app && p.phase != PodPhase::Failed)
            .map(|p| p.index)
            .collect();
        let actions = plan_scale(signal, &live);
        let request = self.config.default_request.clone();
        for action in &actions {
            match action {
                LifecycleAction::Provision { app, ordinal } => {
                    let session = format!("replica/{app}-{ordinal}");
                    let pod = self.provision(&session, app, &request)?;
                    if pod.index != *ordinal {
                        tracing::warn!(expected = ordinal, got = pod.index, "replica ordinal drift");
                    }
                }
                LifecycleAction::Terminate { app, ordinal } => {
                    let name = crate::ports::entry_key(app, *ordinal);
                    let session = self.pods.get(&name).and_then(|p| p.owner_session.clone());
                    match session {
                        Some(s) => self.terminate(&s)?,
                        None => self.terminate_pod(&name),
                    }
                }
            }
        }
        Ok(actions)
    }
}
