//! Orchestrator driving real tunnels and display stubs.

mod common;

use std::sync::Arc;
use std::time::Duration;

use common::*;
use edgepod_core::lifecycle::{Orchestrator, OrchestratorConfig, PodPhase};
use edgepod_core::ports::{IndexStoreConfig, MemoryStore, PortManager};
use edgepod_core::scheduler::{ResourceRequest, GIB};
use edgepod_core::telemetry::Registry;
use edgepod_core::SystemClock;
use edgepod_net::{GatewayConfig, NetRuntime, TunnelGateway};
use tokio::io::{AsyncReadExt, AsyncWriteExt};

#[tokio::test(flavor = "multi_thread")]
async fn pods_get_live_tunnels_and_release_them() {
    let gw = TunnelGateway::start(GatewayConfig::default()).await.unwrap();
    let base = free_range(4);
    let ports = Arc::new(
        PortManager::with_backends(
            IndexStoreConfig { remote_base: base, web_base: base + 2, max_index: 2 },
            Box::new(MemoryStore::new()),
            Box::new(gw.listener_probe()),
        )
        .unwrap(),
    );
    let mut config = OrchestratorConfig::default();
    config.cluster.pull_delay_ms = 0;
    let runtime = NetRuntime::new(tokio::runtime::Handle::current(), gw.clone(), Duration::from_secs(5));
    let orch = Orchestrator::new(
        config,
        Arc::new(SystemClock),
        ports,
        Box::new(runtime),
        Arc::new(Registry::default()),
    )
    .unwrap();
    let orch = Arc::new(std::sync::Mutex::new(orch));

    let o = Arc::clone(&orch);
    let pod = tokio::task::spawn_blocking(move || {
        o.lock().unwrap().provision("s1", "gnuradio", &ResourceRequest::new(500, 2 * GIB)).unwrap()
    })
    .await
    .unwrap();
    assert_eq!(pod.phase, PodPhase::Ready, "{:?}", pod.reason);
    assert_eq!(pod.ports.remote_port, base);
    assert!(gw.is_registered(base));

    gw.open_web_bridge("s1", base + 2, base).await.unwrap();
    let mut conn = tokio::net::TcpStream::connect(addr(base + 2)).await.unwrap();
    conn.write_all(b"GET / HTTP/1.0\r\n\r\n").await.unwrap();
    let mut text = String::new();
    conn.read_to_string(&mut text).await.unwrap();
    assert!(text.contains("edgepod display gnuradio-0"));

    let o = Arc::clone(&orch);
    let outcome = tokio::task::spawn_blocking(move || o.lock().unwrap().probe_tick("gnuradio-0").unwrap())
        .await
        .unwrap();
    assert_eq!(outcome, edgepod_core::lifecycle::ProbeOutcome::Healthy);

    let o = Arc::clone(&orch);
    tokio::task::spawn_blocking(move || o.lock().unwrap().terminate("s1").unwrap())
        .await
        .unwrap();
    assert!(!gw.is_registered(base));
    assert!(refused(base).await);
    assert!(refused(base + 2).await);
}
