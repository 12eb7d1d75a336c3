//! Simulated edge cluster: per-node agents with an image cache, memory ramp
//! model, probe history, and replica-count reconciliation planning.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, Millis};
use crate::scheduler::{BindDecision, NodeDescriptor, NodeRole, ResourceRequest, GIB};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("node {0} is draining")]
    NodeDraining(String),
    #[error("bind decision targets {target}, not {node}")]
    WrongNode { target: String, node: String },
    #[error("pod {0} is not hosted here")]
    UnknownPod(String),
    #[error("invalid cluster spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimClusterSpec {
    pub workers: Vec<NodeDescriptor>,
    pub control_plane: NodeDescriptor,
    pub ramp_duration_s: f64,
    pub noise_fraction: f64,
    pub pull_delay_ms: u64,
    pub seed: u64,
}

impl SimClusterSpec {
    /// Three 4-core / 32 GiB workers and one control-plane node.
    pub fn desk_scale() -> Self {
        Self {
            workers: (1..=3)
                .map(|i| NodeDescriptor::worker(format!("worker-{i}"), 4000, 32 * GIB))
                .collect(),
            control_plane: NodeDescriptor::control_plane("control-plane", 4000, 32 * GIB),
            ramp_duration_s: 120.0,
            noise_fraction: 0.02,
            pull_delay_ms: 2000,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.workers.is_empty() {
            return Err(SimError::InvalidSpec("at least one worker is required".into()));
        }
        if self.workers.iter().any(|w| w.role != NodeRole::Worker) {
            return Err(SimError::InvalidSpec("workers must have the worker role".into()));
        }
        if self.control_plane.role != NodeRole::ControlPlane {
            return Err(SimError::InvalidSpec("control plane node has the wrong role".into()));
        }
        if !(0.0..0.1).contains(&self.noise_fraction) {
            return Err(SimError::InvalidSpec("noise_fraction must lie in [0, 0.1)".into()));
        }
        if self.ramp_duration_s <= 0.0 {
            return Err(SimError::InvalidSpec("ramp_duration_s must be positive".into()));
        }
        Ok(())
    }

    /// Every node the scheduler sees, control plane included.
    pub fn all_nodes(&self) -> Vec<NodeDescriptor> {
        let mut nodes = self.workers.clone();
        nodes.push(self.control_plane.clone());
        nodes
    }
}

/// `mem(t) = R · min(1, (t − t0) / T) · (1 + ε)` with ε uniform in ±noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemRampModel {
    pub request_bytes: u64,
    pub ramp_duration_ms: u64,
    pub start_ms: Millis,
    pub noise_fraction: f64,
    pub seed: u64,
}

impl MemRampModel {
    /// Noise-free expectation.
    pub fn expected(&self, t: Millis) -> f64 {
        if t <= self.start_ms {
            return 0.0;
        }
        let progress = ((t - self.start_ms) as f64 / self.ramp_duration_ms as f64).min(1.0);
        self.request_bytes as f64 * progress
    }

    /// Measured sample at `t`; deterministic in (seed, t).
    pub fn sample(&self, t: Millis) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ t.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let eps = if self.noise_fraction > 0.0 {
            rng.gen_range(-self.noise_fraction..=self.noise_fraction)
        } else {
            0.0
        };
        (self.expected(t) * (1.0 + eps)).round().max(0.0) as u64
    }
}

pub fn pod_seed(cluster_seed: u64, pod_name: &str) -> u64 {
    // FNV-1a
    pod_name.bytes().fold(0xcbf2_9ce4_8422_2325 ^ cluster_seed, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSignal {
    pub app: String,
    pub target_replicas: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case")]
pub enum LifecycleAction {
    Provision { app: String, ordinal: u32 },
    Terminate { app: String, ordinal: u32 },
}

/// Actions that bring the live ordinal set to `signal.target_replicas`:
/// new replicas take the lowest free ordinals, removals start from the highest.
pub fn plan_scale(signal: &ScaleSignal, live: &BTreeSet<u32>) -> Vec<LifecycleAction> {
    let target = signal.target_replicas as usize;
    let app = signal.app.clone();
    if live.len() < target {
        (0u32..)
            .filter(|o| !live.contains(o))
            .take(target - live.len())
            .map(|ordinal| LifecycleAction::Provision {
                app: app.clone(),
                ordinal,
            })
            .collect()
    } else {
        live.iter()
            .rev()
            .take(live.len() - target)
            .map(|&ordinal| LifecycleAction::Terminate {
                app: app.clone(),
                ordinal,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeKind {
    Readiness,
    Liveness,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub kind: ProbeKind,
    pub ok: bool,
    pub at: Millis,
}

const PROBE_HISTORY: usize = 16;

#[derive(Debug, Clone)]
struct HostedPod {
    app: String,
    request: ResourceRequest,
    ramp: Option<MemRampModel>,
    ready: bool,
    probes: VecDeque<ProbeResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PodStatus {
    pub name: String,
    pub app: String,
    pub ready: bool,
    pub running: bool,
    pub request_mem_bytes: u64,
    pub measured_mem_bytes: u64,
    pub probes: Vec<ProbeResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeStatus {
    pub node_id: String,
    pub timestamp_ms: Millis,
    pub draining: bool,
    pub allocated_mem_bytes: u64,
    pub allocated_cpu_millicores: u64,
    pub measured_mem_bytes: u64,
    pub cached_images: Vec<String>,
    pub pods: Vec<PodStatus>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentConfig {
    pub pull_delay: Duration,
    pub ramp_duration: Duration,
    pub noise_fraction: f64,
    pub seed: u64,
}

impl AgentConfig {
    pub fn from_spec(spec: &SimClusterSpec) -> Self {
        Self {
            pull_delay: Duration::from_millis(spec.pull_delay_ms),
            ramp_duration: Duration::from_secs_f64(spec.ramp_duration_s),
            noise_fraction: spec.noise_fraction,
            seed: spec.seed,
        }
    }
}

/// Kubelet analog for one node. Owns node-local state only.
#[derive(Debug, Clone)]
pub struct NodeAgent {
    node_id: String,
    config: AgentConfig,
    draining: bool,
    images: BTreeSet<String>,
    pods: BTreeMap<String, HostedPod>,
    last_snapshot: Option<Millis>,
}

impl NodeAgent {
    pub fn new(node_id: impl Into<String>, config: AgentConfig) -> Self {
        Self {
            node_id: node_id.into(),
            config,
            draining: false,
            images: BTreeSet::new(),
            pods: BTreeMap::new(),
            last_snapshot: None,
        }
    }

    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    pub fn set_draining(&mut self, draining: bool) {
        self.draining = draining;
    }

    pub fn hosts(&self, pod: &str) -> bool {
        self.pods.contains_key(pod)
    }

    /// Take a bound pod and pull its image. Returns the pull latency, which
    /// the caller's clock has already been advanced by.
    pub fn accept_bind(
        &mut self,
        decision: &BindDecision,
        app: &str,
        request: &ResourceRequest,
        clock: &dyn Clock,
    ) -> Result<Duration, SimError> {
        if decision.node_id != self.node_id {
            return Err(SimError::WrongNode {
                target: decision.node_id.clone(),
                node: self.node_id.clone(),
            });
        }
        if self.draining {
            return Err(SimError::NodeDraining(self.node_id.clone()));
        }
        let pull = self.pull_image(app, clock);
        self.pods.insert(
            decision.pod_name.clone(),
            HostedPod {
                app: app.to_string(),
                request: request.clone(),
                ramp: None,
                ready: false,
                probes: VecDeque::new(),
            },
        );
        Ok(pull)
    }

    fn pull_image(&mut self, app: &str, clock: &dyn Clock) -> Duration {
        let image = format!("{app}:latest");
        if self.images.contains(&image) {
            return Duration::ZERO;
        }
        clock.sleep(self.config.pull_delay);
        self.images.insert(image);
        self.config.pull_delay
    }

    /// Start (or restart) the container processes; the memory ramp begins now.
    pub fn start_container(&mut self, pod: &str, now: Millis) -> Result<(), SimError> {
        let config = self.config;
        let hosted = self
            .pods
            .get_mut(pod)
            .ok_or_else(|| SimError::UnknownPod(pod.to_string()))?;
        hosted.ready = false;
        hosted.ramp = Some(MemRampModel {
            request_bytes: hosted.request.mem_bytes,
            ramp_duration_ms: config.ramp_duration.as_millis().max(1) as u64,
            start_ms: now,
            noise_fraction: config.noise_fraction,
            seed: pod_seed(config.seed, pod),
        });
        Ok(())
    }

    pub fn set_ready(&mut self, pod: &str, ready: bool) -> Result<(), SimError> {
        self.pods
            .get_mut(pod)
            .map(|p| p.ready = ready)
            .ok_or_else(|| SimError::UnknownPod(pod.to_string()))
    }

    pub fn record_probe(&mut self, pod: &str, result: ProbeResult) -> Result<(), SimError> {
        let hosted = self
            .pods
            .get_mut(pod)
            .ok_or_else(|| SimError::UnknownPod(pod.to_string()))?;
        if hosted.probes.len() == PROBE_HISTORY {
            hosted.probes.pop_front();
        }
        hosted.probes.push_back(result);
        Ok(())
    }

    pub fn remove_pod(&mut self, pod: &str) -> bool {
        self.pods.remove(pod).is_some()
    }

    pub fn memory_of(&self, pod: &str, now: Millis) -> Option<u64> {
        let hosted = self.pods.get(pod)?;
        Some(hosted.ramp.map_or(0, |r| r.sample(now)))
    }

    pub fn ramp_of(&self, pod: &str) -> Option<MemRampModel> {
        self.pods.get(pod)?.ramp
    }

    /// Node and pod snapshot. Timestamps strictly increase across calls.
    pub fn report_status(&mut self, now: Millis) -> NodeStatus {
        let ts = match self.last_snapshot {
            Some(prev) if now <= prev => prev + 1,
            _ => now,
        };
        self.last_snapshot = Some(ts);
        let pods: Vec<PodStatus> = self
            .pods
            .iter()
            .map(|(name, p)| PodStatus {
                name: name.clone(),
                app: p.app.clone(),
                ready: p.ready,
                running: p.ramp.is_some(),
                request_mem_bytes: p.request.mem_bytes,
                measured_mem_bytes: p.ramp.map_or(0, |r| r.sample(now)),
                probes: p.probes.iter().copied().collect(),
            })
            .collect();
        NodeStatus {
            node_id: self.node_id.clone(),
            timestamp_ms: ts,
            draining: self.draining,
            allocated_mem_bytes: self.pods.values().map(|p| p.request.mem_bytes).sum(),
            allocated_cpu_millicores: self.pods.values().map(|p| p.request.cpu_millicores).sum(),
            measured_mem_bytes: pods.iter().map(|p| p.measured_mem_bytes).sum(),
            cached_images: self.images.iter().cloned().collect(),
            pods,
        }
    }
}
