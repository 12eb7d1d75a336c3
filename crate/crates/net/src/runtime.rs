//! [`PodRuntime`] backed by real sockets: each pod gets a tunnel client that
//! registers with the gateway and a stub display server behind it.
//!
//! Methods block on the tokio runtime, so call the orchestrator from a
//! blocking context (`spawn_blocking` or a plain thread).

use std::collections::HashMap;
use std::time::{Duration, Instant};

use edgepod_core::lifecycle::{PodRecord, PodRuntime, StartupStep};
use edgepod_core::sim::ProbeKind;
use tokio::runtime::Handle;

use crate::agent::{DisplayServer, TargetSlot, TunnelClient};
use crate::gateway::TunnelGateway;

#[derive(Default)]
struct Sandbox {
    target: TargetSlot,
    tunnel: Option<TunnelClient>,
    display: Option<DisplayServer>,
    desktop: bool,
}

pub struct NetRuntime {
    handle: Handle,
    gateway: TunnelGateway,
    step_timeout: Duration,
    pods: HashMap<String, Sandbox>,
}

impl std::fmt::Debug for NetRuntime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NetRuntime").field("pods", &self.pods.len()).finish()
    }
}

impl NetRuntime {
    pub fn new(handle: Handle, gateway: TunnelGateway, step_timeout: Duration) -> Self {
        Self {
            handle,
            gateway,
            step_timeout,
            pods: HashMap::new(),
        }
    }

    fn timed<T>(
        &self,
        fut: impl std::future::Future<Output = std::io::Result<T>>,
    ) -> Result<(T, Duration), String> {
        let started = Instant::now();
        let out = self
            .handle
            .block_on(async { tokio::time::timeout(self.step_timeout, fut).await });
        match out {
            Ok(Ok(v)) => Ok((v, started.elapsed())),
            Ok(Err(e)) => Err(e.to_string()),
            // report the overrun so the orchestrator classifies it as a timeout
            Err(_) => Err(format!("no response within {:?}", self.step_timeout)),
        }
    }
}

impl PodRuntime for NetRuntime {
    fn run_step(&mut self, pod: &PodRecord, step: StartupStep) -> Result<Duration, String> {
        let sandbox_target = self.pods.entry(pod.name.clone()).or_default().target.clone();
        match step {
            StartupStep::EstablishReverseTunnel => {
                let gateway = self.gateway.control_addr();
                let (client, took) = self.timed(TunnelClient::connect(
                    gateway,
                    &pod.name,
                    pod.ports.remote_port,
                    sandbox_target,
                ))?;
                self.pods.get_mut(&pod.name).expect("sandbox").tunnel = Some(client);
                Ok(took)
            }
            StartupStep::StartDisplayServer => {
                let (display, took) = self.timed(DisplayServer::start(&pod.name))?;
                sandbox_target.set(Some(display.addr()));
                self.pods.get_mut(&pod.name).expect("sandbox").display = Some(display);
                Ok(took)
            }
            StartupStep::StartDesktop => {
                let sandbox = self.pods.get_mut(&pod.name).expect("sandbox");
                if sandbox.display.is_none() {
                    return Err("display server not running".into());
                }
                sandbox.desktop = true;
                Ok(Duration::ZERO)
            }
        }
    }

    fn charges_clock(&self) -> bool {
        false
    }

    fn stop_processes(&mut self, pod: &PodRecord) {
        if let Some(sandbox) = self.pods.get_mut(&pod.name) {
            sandbox.desktop = false;
            sandbox.target.set(None);
            if let Some(display) = sandbox.display.take() {
                display.stop();
            }
        }
    }

    fn close_tunnel(&mut self, pod: &PodRecord) {
        if let Some(mut sandbox) = self.pods.remove(&pod.name) {
            if let Some(tunnel) = sandbox.tunnel.take() {
                tunnel.close();
            }
        }
        let gateway = self.gateway.clone();
        let port = pod.ports.remote_port;
        self.handle.block_on(async move { gateway.unregister(port).await });
    }

    fn probe(&mut self, pod: &PodRecord, kind: ProbeKind) -> bool {
        let Some(sandbox) = self.pods.get(&pod.name) else {
            return false;
        };
        let display_up = sandbox.display.as_ref().is_some_and(|d| d.is_running());
        match kind {
            ProbeKind::Readiness => display_up && sandbox.desktop,
            ProbeKind::Liveness => {
                display_up
                    && sandbox.tunnel.as_ref().is_some_and(|t| t.is_running())
                    && self.gateway.is_registered(pod.ports.remote_port)
            }
        }
    }
}

impl NetRuntime {
    /// Make the pod's tunnel client stop answering, for fault injection.
    pub fn freeze_tunnel(&self, pod_name: &str) -> bool {
        match self.pods.get(pod_name).and_then(|s| s.tunnel.as_ref()) {
            Some(t) => {
                t.freeze();
                true
            }
            None => false,
        }
    }
}
