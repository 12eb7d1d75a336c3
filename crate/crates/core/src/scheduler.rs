//! Filter → rank → bind placement of experiment pods onto worker nodes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Millis;

pub const GIB: u64 = 1 << 30;

#[derive(Debug, Error, PartialEq)]
pub enum SchedulerError {
    #[error("no feasible node: {reason}")]
    NoFeasibleNode { reason: String },
    #[error("pod {0} is already bound")]
    AlreadyBound(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeRole {
    ControlPlane,
    Worker,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeDescriptor {
    pub node_id: String,
    pub role: NodeRole,
    pub cpu_capacity_millicores: u64,
    pub mem_capacity_bytes: u64,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
    #[serde(default)]
    pub allocated_cpu_millicores: u64,
    #[serde(default)]
    pub allocated_mem_bytes: u64,
}

impl NodeDescriptor {
    pub fn worker(node_id: impl Into<String>, cpu_millicores: u64, mem_bytes: u64) -> Self {
        Self {
            node_id: node_id.into(),
            role: NodeRole::Worker,
            cpu_capacity_millicores: cpu_millicores,
            mem_capacity_bytes: mem_bytes,
            labels: BTreeMap::new(),
            allocated_cpu_millicores: 0,
            allocated_mem_bytes: 0,
        }
    }

    pub fn control_plane(node_id: impl Into<String>, cpu_millicores: u64, mem_bytes: u64) -> Self {
        Self {
            role: NodeRole::ControlPlane,
            ..Self::worker(node_id, cpu_millicores, mem_bytes)
        }
    }

    pub fn with_label(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.labels.insert(key.into(), value.into());
        self
    }

    pub fn free_cpu(&self) -> u64 {
        self.cpu_capacity_millicores.saturating_sub(self.allocated_cpu_millicores)
    }

    pub fn free_mem(&self) -> u64 {
        self.mem_capacity_bytes.saturating_sub(self.allocated_mem_bytes)
    }

    pub fn fits(&self, request: &ResourceRequest) -> bool {
        self.role == NodeRole::Worker
            && self.free_cpu() >= request.cpu_millicores
            && self.free_mem() >= request.mem_bytes
            && request
                .node_selector
                .iter()
                .all(|(k, v)| self.labels.get(k) == Some(v))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceRequest {
    pub cpu_millicores: u64,
    pub mem_bytes: u64,
    #[serde(default)]
    pub node_selector: BTreeMap<String, String>,
}

impl ResourceRequest {
    pub fn new(cpu_millicores: u64, mem_bytes: u64) -> Self {
        Self {
            cpu_millicores,
            mem_bytes,
            node_selector: BTreeMap::new(),
        }
    }

    pub fn with_selector(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.node_selector.insert(key.into(), value.into());
        self
    }

    pub fn validate(&self) -> Result<(), SchedulerError> {
        if self.cpu_millicores == 0 || self.mem_bytes == 0 {
            return Err(SchedulerError::InvalidRequest(
                "cpu and memory requests must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BindDecision {
    pub pod_name: String,
    pub node_id: String,
    pub score: f64,
    pub decided_at: Millis,
}

/// Ranking policy. Higher scores are preferred.
pub trait ScoringPolicy: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, request: &ResourceRequest, node: &NodeDescriptor) -> f64;
}

/// Mean free fraction of cpu and memory after hypothetically placing the pod.
#[derive(Debug, Default, Clone, Copy)]
pub struct LeastAllocated;

impl ScoringPolicy for LeastAllocated {
    fn name(&self) -> &str {
        "least-allocated"
    }

    fn score(&self, request: &ResourceRequest, node: &NodeDescriptor) -> f64 {
        let free_cpu = node.free_cpu().saturating_sub(request.cpu_millicores) as f64;
        let free_mem = node.free_mem().saturating_sub(request.mem_bytes) as f64;
        (free_cpu / node.cpu_capacity_millicores as f64 + free_mem / node.mem_capacity_bytes as f64)
            / 2.0
    }
}

/// Worker nodes that can host `request`, in input order.
pub fn filter_nodes<'a>(request: &ResourceRequest, nodes: &'a [NodeDescriptor]) -> Vec<&'a NodeDescriptor> {
    nodes.iter().filter(|n| n.fits(request)).collect()
}

/// Scores in descending order, ties broken by ascending node id.
pub fn rank_nodes(
    policy: &dyn ScoringPolicy,
    request: &ResourceRequest,
    candidates: &[&NodeDescriptor],
) -> Vec<(String, f64)> {
    let mut ranked: Vec<(String, f64)> = candidates
        .iter()
        .map(|n| (n.node_id.clone(), policy.score(request, n)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}

/// Explains why no node was feasible, kube-scheduler style.
fn unschedulable_reason(request: &ResourceRequest, nodes: &[NodeDescriptor]) -> String {
    let (mut control, mut cpu, mut mem, mut selector) = (0, 0, 0, 0);
    for node in nodes {
        if node.role != NodeRole::Worker {
            control += 1;
        } else if !request
            .node_selector
            .iter()
            .all(|(k, v)| node.labels.get(k) == Some(v))
        {
            selector += 1;
        } else {
            if node.free_cpu() < request.cpu_millicores {
                cpu += 1;
            }
            if node.free_mem() < request.mem_bytes {
                mem += 1;
            }
        }
    }
    let mut parts = Vec::new();
    if cpu > 0 {
        parts.push(format!("{cpu} insufficient cpu"));
    }
    if mem > 0 {
        parts.push(format!("{mem} insufficient memory"));
    }
    if selector > 0 {
        parts.push(format!("{selector} didn't match node selector"));
    }
    if control > 0 {
        parts.push(format!("{control} control-plane"));
    }
    format!("0/{} nodes are available: {}", nodes.len(), parts.join(", "))
}

#[derive(Debug, Clone, PartialEq)]
struct Binding {
    node_id: String,
    request: ResourceRequest,
}

/// Cluster view owned by the scheduling loop.
pub struct Scheduler {
    policy: Box<dyn ScoringPolicy>,
    nodes: Vec<NodeDescriptor>,
    bindings: BTreeMap<String, Binding>,
}

impl std::fmt::Debug for Scheduler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scheduler")
            .field("policy", &self.policy.name())
            .field("nodes", &self.nodes)
            .field("bindings", &self.bindings.len())
            .finish()
    }
}

impl Scheduler {
    pub fn new(nodes: Vec<NodeDescriptor>) -> Self {
        Self::with_policy(nodes, Box::new(LeastAllocated))
    }

    pub fn with_policy(mut nodes: Vec<NodeDescriptor>, policy: Box<dyn ScoringPolicy>) -> Self {
        nodes.sort_by(|a, b| a.node_id.cmp(&b.node_id));
        Self {
            policy,
            nodes,
            bindings: BTreeMap::new(),
        }
    }

    pub fn nodes(&self) -> &[NodeDescriptor] {
        &self.nodes
    }

    pub fn node(&self, node_id: &str) -> Option<&NodeDescriptor> {
        self.nodes.iter().find(|n| n.node_id == node_id)
    }

    pub fn binding(&self, pod_name: &str) -> Option<&str> {
        self.bindings.get(pod_name).map(|b| b.node_id.as_str())
    }

    pub fn bound_pods(&self) -> impl Iterator<Item = (&str, &str)> {
        self.bindings
            .iter()
            .map(|(pod, b)| (pod.as_str(), b.node_id.as_str()))
    }

    /// Pick a node for `pod_name` and charge its request to that node.
    pub fn bind(
        &mut self,
        pod_name: &str,
        request: &ResourceRequest,
        now: Millis,
    ) -> Result<BindDecision, SchedulerError> {
        request.validate()?;
        if self.bindings.contains_key(pod_name) {
            return Err(SchedulerError::AlreadyBound(pod_name.to_string()));
        }
        let candidates = filter_nodes(request, &self.nodes);
        let ranked = rank_nodes(self.policy.as_ref(), request, &candidates);
        let Some((node_id, score)) = ranked.into_iter().next() else {
            return Err(SchedulerError::NoFeasibleNode {
                reason: unschedulable_reason(request, &self.nodes),
            });
        };
        let node = self
            .nodes
            .iter_mut()
            .find(|n| n.node_id == node_id)
            .expect("ranked node exists");
        node.allocated_cpu_millicores += request.cpu_millicores;
        node.allocated_mem_bytes += request.mem_bytes;
        self.bindings.insert(
            pod_name.to_string(),
            Binding {
                node_id: node_id.clone(),
                request: request.clone(),
            },
        );
        Ok(BindDecision {
            pod_name: pod_name.to_string(),
            node_id,
            score,
            decided_at: now,
        })
    }

    /// Release the allocation held by `pod_name`. Returns the node it was on.
    pub fn unbind(&mut self, pod_name: &str) -> Option<String> {
        let binding = self.bindings.remove(pod_name)?;
        if let Some(node) = self.nodes.iter_mut().find(|n| n.node_id == binding.node_id) {
            node.allocated_cpu_millicores -= binding.request.cpu_millicores;
            node.allocated_mem_bytes -= binding.request.mem_bytes;
        }
        Some(binding.node_id)
    }

    /// Replace a node's labels or capacity. Allocations are kept.
    pub fn update_node(&mut self, update: NodeDescriptor) -> Result<(), SchedulerError> {
        let node = self
            .nodes
            .iter_mut()
            .find(|n| n.node_id == update.node_id)
            .ok_or_else(|| SchedulerError::UnknownNode(update.node_id.clone()))?;
        node.labels = update.labels;
        node.role = update.role;
        node.cpu_capacity_millicores = update.cpu_capacity_millicores.max(node.allocated_cpu_millicores);
        node.mem_capacity_bytes = update.mem_capacity_bytes.max(node.allocated_mem_bytes);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn workers(n: usize) -> Vec<NodeDescriptor> {
        (1..=n)
            .map(|i| NodeDescriptor::worker(format!("w-{i}"), 4000, 32 * GIB))
            .collect()
    }

    #[test]
    fn filter_capacity_and_labels() {
        let nodes = workers(3);
        let req = ResourceRequest::new(500, 2 * GIB);
        assert_eq!(filter_nodes(&req, &nodes).len(), 3);

        let gpu = req.clone().with_selector("gpu", "true");
        assert!(filter_nodes(&gpu, &nodes).is_empty());

        let mut tight = NodeDescriptor::worker("w-x", 4000, 32 * GIB);
        tight.allocated_cpu_millicores = 3600;
        assert!(filter_nodes(&req, std::slice::from_ref(&tight)).is_empty());

        let control = NodeDescriptor::control_plane("cp", 64_000, 256 * GIB);
        assert!(filter_nodes(&req, &[control]).is_empty());

        let labeled = vec![
            NodeDescriptor::worker("a", 4000, 32 * GIB),
            NodeDescriptor::worker("b", 4000, 32 * GIB).with_label("gpu", "true"),
        ];
        let picked: Vec<_> = filter_nodes(&gpu, &labeled).iter().map(|n| n.node_id.clone()).collect();
        assert_eq!(picked, ["b"]);
    }

    #[test]
    fn rank_prefers_emptier_node_and_breaks_ties_by_id() {
        let req = ResourceRequest::new(500, 2 * GIB);
        let empty = NodeDescriptor::worker("w-z", 4000, 32 * GIB);
        let mut half = NodeDescriptor::worker("w-a", 4000, 32 * GIB);
        half.allocated_cpu_millicores = 2000;
        half.allocated_mem_bytes = 16 * GIB;
        let ranked = rank_nodes(&LeastAllocated, &req, &[&half, &empty]);
        assert_eq!(ranked[0].0, "w-z");

        let b = NodeDescriptor::worker("w-b", 4000, 32 * GIB);
        let a = NodeDescriptor::worker("w-a", 4000, 32 * GIB);
        let ranked = rank_nodes(&LeastAllocated, &req, &[&b, &a]);
        assert_eq!(ranked[0].0, "w-a");
    }

    #[test]
    fn rank_matches_hand_computed_scores() {
        // Hand oracle, request 500m / 2 GiB on 4000m / 32 GiB nodes:
        //   n-1 (1000m, 4 GiB used): cpu 2500/4000 = 0.625, mem 26/32 = 0.8125 -> 0.71875
        //   n-2 ( 500m, 8 GiB used): cpu 3000/4000 = 0.75,  mem 22/32 = 0.6875 -> 0.71875
        // Equal scores, so the lexicographic tie-break decides.
        let req = ResourceRequest::new(500, 2 * GIB);
        let mut n1 = NodeDescriptor::worker("n-1", 4000, 32 * GIB);
        n1.allocated_cpu_millicores = 1000;
        n1.allocated_mem_bytes = 4 * GIB;
        let mut n2 = NodeDescriptor::worker("n-2", 4000, 32 * GIB);
        n2.allocated_cpu_millicores = 500;
        n2.allocated_mem_bytes = 8 * GIB;
        let ranked = rank_nodes(&LeastAllocated, &req, &[&n2, &n1]);
        assert_eq!(ranked, vec![("n-1".to_string(), 0.71875), ("n-2".to_string(), 0.71875)]);
    }

    #[test]
    fn five_pods_spread_two_two_one() {
        let mut sched = Scheduler::new(workers(3));
        let req = ResourceRequest::new(500, 2 * GIB);
        let placed: Vec<String> = (0..5)
            .map(|i| sched.bind(&format!("gnuradio-{i}"), &req, 0).unwrap().node_id)
            .collect();
        assert_eq!(placed, ["w-1", "w-2", "w-3", "w-1", "w-2"]);
    }

    #[test]
    fn bind_when_full_reports_reason() {
        let mut sched = Scheduler::new(vec![NodeDescriptor::worker("w-1", 1000, 4 * GIB)]);
        let req = ResourceRequest::new(500, 2 * GIB);
        sched.bind("p0", &req, 0).unwrap();
        sched.bind("p1", &req, 0).unwrap();
        let err = sched.bind("p2", &req, 0).unwrap_err();
        assert_eq!(
            err,
            SchedulerError::NoFeasibleNode {
                reason: "0/1 nodes are available: 1 insufficient cpu, 1 insufficient memory".into()
            }
        );
    }

    #[test]
    fn unbind_restores_allocations() {
        let mut sched = Scheduler::new(workers(2));
        let before = sched.nodes().to_vec();
        let req = ResourceRequest::new(700, 3 * GIB);
        sched.bind("p", &req, 5).unwrap();
        assert_ne!(sched.nodes(), before.as_slice());
        assert_eq!(sched.unbind("p").as_deref(), Some("w-1"));
        assert_eq!(sched.nodes(), before.as_slice());
        assert_eq!(sched.unbind("p"), None);
    }

    #[test]
    fn rejects_double_bind_and_zero_request() {
        let mut sched = Scheduler::new(workers(1));
        let req = ResourceRequest::new(500, GIB);
        sched.bind("p", &req, 0).unwrap();
        assert_eq!(sched.bind("p", &req, 0), Err(SchedulerError::AlreadyBound("p".into())));
        assert!(matches!(
            sched.bind("q", &ResourceRequest::new(0, GIB), 0),
            Err(SchedulerError::InvalidRequest(_))
        ));
    }

    proptest! {
        #[test]
        fn filter_is_sound_and_complete(
            caps in prop::collection::vec((1u64..8000, 1u64..64, 0u64..8000, 0u64..64, any::<bool>(), any::<bool>()), 0..8),
            req_cpu in 1u64..4000,
            req_mem in 1u64..32,
            want_gpu in any::<bool>(),
        ) {
            let nodes: Vec<NodeDescriptor> = caps.iter().enumerate().map(|(i, &(c, m, ac, am, gpu, cp))| {
                let mut n = if cp {
                    NodeDescriptor::control_plane(format!("n{i}"), c, m * GIB)
                } else {
                    NodeDescriptor::worker(format!("n{i}"), c, m * GIB)
                };
                n.allocated_cpu_millicores = ac.min(c);
                n.allocated_mem_bytes = (am * GIB).min(m * GIB);
                if gpu { n = n.with_label("gpu", "true"); }
                n
            }).collect();
            let mut req = ResourceRequest::new(req_cpu, req_mem * GIB);
            if want_gpu { req = req.with_selector("gpu", "true"); }
            let got: Vec<&str> = filter_nodes(&req, &nodes).iter().map(|n| n.node_id.as_str()).collect();
            let oracle: Vec<&str> = nodes.iter().filter(|n| {
                n.role == NodeRole::Worker
                    && n.cpu_capacity_millicores - n.allocated_cpu_millicores >= req_cpu
                    && n.mem_capacity_bytes - n.allocated_mem_bytes >= req_mem * GIB
                    && (!want_gpu || n.labels.get("gpu").map(String::as_str) == Some("true"))
            }).map(|n| n.node_id.as_str()).collect();
            prop_assert_eq!(got, oracle);
        }
    }
}
