//! Pod-side process control used by the orchestrator.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::{PodRecord, StartupStep};
use crate::sim::ProbeKind;

/// Processes inside a pod: the reverse tunnel, the display server and the
/// desktop. `run_step` returns how long the step took; past the plan's step
/// timeout the pod fails. Simulated runtimes have that time charged to the
/// orchestrator clock, real ones report wall time already spent.
pub trait PodRuntime: Send {
    fn run_step(&mut self, pod: &PodRecord, step: StartupStep) -> Result<Duration, String>;
    fn charges_clock(&self) -> bool {
        true
    }
    fn stop_processes(&mut self, pod: &PodRecord);
    fn close_tunnel(&mut self, pod: &PodRecord);
    fn probe(&mut self, _pod: &PodRecord, _kind: ProbeKind) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RuntimeCall {
    Step(String, StartupStep),
    StopProcesses(String),
    CloseTunnel(String),
}

#[derive(Debug, Default)]
struct SimState {
    step_latency: Duration,
    latency_overrides: BTreeMap<(String, StartupStep), Duration>,
    failures: BTreeMap<(String, StartupStep), String>,
    probe_script: BTreeMap<(String, ProbeKind), VecDeque<bool>>,
    calls: Vec<RuntimeCall>,
}

/// Scriptable runtime. Clones share state so a test can keep a handle
/// after boxing one into the orchestrator.
#[derive(Debug, Clone, Default)]
pub struct SimRuntime {
    state: Arc<Mutex<SimState>>,
}

impl SimRuntime {
    pub fn new(step_latency: Duration) -> Self {
        let rt = Self::default();
        rt.lock().step_latency = step_latency;
        rt
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, SimState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn set_step_latency(&self, pod: &str, step: StartupStep, latency: Duration) {
        self.lock().latency_overrides.insert((pod.to_string(), step), latency);
    }

    pub fn fail_step(&self, pod: &str, step: StartupStep, message: &str) {
        self.lock().failures.insert((pod.to_string(), step), message.to_string());
    }

    pub fn clear_failures(&self) {
        self.lock().failures.clear();
    }

    /// Queue probe results for a pod; once drained, probes pass.
    pub fn script_probes(&self, pod: &str, kind: ProbeKind, results: &[bool]) {
        self.lock()
            .probe_script
            .entry((pod.to_string(), kind))
            .or_default()
            .extend(results.iter().copied());
    }

    pub fn calls(&self) -> Vec<RuntimeCall> {
        self.lock().calls.clone()
    }

    pub fn calls_for(&self, pod: &str) -> Vec<RuntimeCall> {
        self.calls()
            .into_iter()
            .filter(|c| match c {
                RuntimeCall::Step(p, _) | RuntimeCall::StopProcesses(p) | RuntimeCall::CloseTunnel(p) => p == pod,
            })
            .collect()
    }
}

impl PodRuntime for SimRuntime {
    fn run_step(&mut self, pod: &PodRecord, step: StartupStep) -> Result<Duration, String> {
        let mut s = self.lock();
        s.calls.push(RuntimeCall::Step(pod.name.clone(), step));
        let key = (pod.name.clone(), step);
        if let Some(msg) = s.failures.get(&key) {
            return Err(msg.clone());
        }
        Ok(s.latency_overrides.get(&key).copied().unwrap_or(s.step_latency))
    }

    fn stop_processes(&mut self, pod: &PodRecord) {
        self.lock().calls.push(RuntimeCall::StopProcesses(pod.name.clone()));
    }

    fn close_tunnel(&mut self, pod: &PodRecord) {
        self.lock().calls.push(RuntimeCall::CloseTunnel(pod.name.clone()));
    }

    fn probe(&mut self, pod: &PodRecord, kind: ProbeKind) -> bool {
        self.lock()
            .probe_script
            .get_mut(&(pod.name.clone(), kind))
            .and_then(|q| q.pop_front())
            .unwrap_or(true)
    }
}
