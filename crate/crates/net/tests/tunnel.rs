mod common;

use std::time::{Duration, Instant};

use common::*;
use edgepod_core::ports::{IndexStoreConfig, ListenerProbe, MemoryStore, PortManager};
use edgepod_net::{
    DisplayServer, GatewayConfig, KeepalivePolicy, TargetSlot, TunnelClient, TunnelEventKind, TunnelGateway,
};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;

async fn gateway(config: GatewayConfig) -> TunnelGateway {
    TunnelGateway::start(config).await.unwrap()
}

async fn pod(gw: &TunnelGateway, name: &str, port: u16) -> (TunnelClient, DisplayServer) {
    let display = DisplayServer::start(name).await.unwrap();
    let client = TunnelClient::connect(gw.control_addr(), name, port, TargetSlot::new(Some(display.addr())))
        .await
        .unwrap();
    (client, display)
}

#[tokio::test]
async fn echo_round_trip() {
    let gw = gateway(GatewayConfig::default()).await;
    let port = free_port();
    let (_client, display) = pod(&gw, "gnuradio-0", port).await;
    let reg = gw.registration(port).unwrap();
    assert_eq!(reg.pod_name, "gnuradio-0");
    assert_eq!(reg.target, display.addr().to_string());
    assert!(reg.last_keepalive_at >= reg.established_at);
    let payload: Vec<u8> = (0..10_000u32).map(|i| (i % 251) as u8).collect();
    assert_eq!(round_trip(port, &payload).await.unwrap(), payload);
    // sequential connections over the same tunnel
    assert_eq!(round_trip(port, b"again").await.unwrap(), b"again");
}

#[tokio::test]
async fn concurrent_tunnels_do_not_cross_talk() {
    let gw = gateway(GatewayConfig::default()).await;
    let base = free_range(5);
    let mut pods = Vec::new();
    for i in 0..5 {
        pods.push(pod(&gw, &format!("gnuradio-{i}"), base + i).await);
    }
    let runs = (0..5u16).map(|i| {
        tokio::spawn(async move {
            let nonce = format!("nonce-{i}-{:x};", 0x9e37_79b9u32.wrapping_mul(i as u32 + 1));
            let payload = nonce.repeat(4000);
            let echoed = round_trip(base + i, payload.as_bytes()).await.unwrap();
            (i, nonce, String::from_utf8(echoed).unwrap())
        })
    });
    let results: Vec<_> = futures_join(runs.collect()).await;
    for (i, nonce, echoed) in &results {
        assert_eq!(echoed, &nonce.repeat(4000));
        for (j, other, _) in &results {
            if i != j {
                assert!(!echoed.contains(other.as_str()));
            }
        }
    }
}

async fn futures_join<T>(handles: Vec<tokio::task::JoinHandle<T>>) -> Vec<T> {
    let mut out = Vec::new();
    for h in handles {
        out.push(h.await.unwrap());
    }
    out
}

#[tokio::test]
async fn duplicate_port_rejected() {
    let gw = gateway(GatewayConfig::default()).await;
    let port = free_port();
    let (_a, _d) = pod(&gw, "gnuradio-0", port).await;
    let err = TunnelClient::connect(gw.control_addr(), "gnuradio-9", port, TargetSlot::default())
        .await
        .unwrap_err();
    assert!(err.to_string().contains("already registered"), "{err}");
    assert_eq!(gw.registrations().len(), 1);
}

#[tokio::test]
async fn stream_before_display_is_refused_then_works() {
    let gw = gateway(GatewayConfig::default()).await;
    let port = free_port();
    let target = TargetSlot::default();
    let _client = TunnelClient::connect(gw.control_addr(), "gnuradio-0", port, target.clone())
        .await
        .unwrap();
    assert_eq!(round_trip(port, b"x").await.unwrap(), b"");
    let display = DisplayServer::start("gnuradio-0").await.unwrap();
    target.set(Some(display.addr()));
    assert_eq!(round_trip(port, b"x").await.unwrap(), b"x");
}

fn fast_keepalive() -> KeepalivePolicy {
    KeepalivePolicy {
        interval: Duration::from_millis(40),
        max_missed: 3,
    }
}

#[tokio::test]
async fn healthy_idle_tunnel_survives() {
    let gw = gateway(GatewayConfig {
        keepalive: Some(fast_keepalive()),
        idle_timeout: Some(Duration::from_millis(100)),
        ..Default::default()
    })
    .await;
    let port = free_port();
    let (_client, _display) = pod(&gw, "gnuradio-0", port).await;
    let before = gw.registration(port).unwrap().last_keepalive_at;
    tokio::time::sleep(Duration::from_millis(400)).await;
    let reg = gw.registration(port).expect("still registered");
    assert!(reg.last_keepalive_at > before);
    assert_eq!(round_trip(port, b"after idle").await.unwrap(), b"after idle");
}

#[tokio::test]
async fn frozen_peer_expires_and_ports_close() {
    let policy = fast_keepalive();
    let gw = gateway(GatewayConfig {
        keepalive: Some(policy),
        ..Default::default()
    })
    .await;
    let mut events = gw.subscribe();
    let remote = free_port();
    let web = free_port();
    let (client, _display) = pod(&gw, "gnuradio-0", remote).await;
    gw.open_web_bridge("s1", web, remote).await.unwrap();
    let frozen_at = Instant::now();
    client.freeze();
    let event = tokio::time::timeout(Duration::from_secs(2), events.recv())
        .await
        .unwrap()
        .unwrap();
    let lag = frozen_at.elapsed();
    assert!(matches!(event.kind, TunnelEventKind::Expired(_)), "{event:?}");
    assert_eq!(event.pod_name, "gnuradio-0");
    // (max_missed - 1, max_missed + 1] intervals plus scheduling slack
    assert!(lag >= policy.interval * (policy.max_missed - 1), "{lag:?}");
    assert!(lag <= policy.interval * (policy.max_missed + 1) + Duration::from_millis(100), "{lag:?}");
    assert!(gw.registration(remote).is_none());
    assert!(gw.bridge(web).is_none());
    assert!(refused(remote).await);
    assert!(refused(web).await);
}

#[tokio::test]
async fn idle_timeout_without_keepalive_drops() {
    let gw = gateway(GatewayConfig {
        keepalive: None,
        idle_timeout: Some(Duration::from_millis(100)),
        ..Default::default()
    })
    .await;
    let port = free_port();
    let (_client, _display) = pod(&gw, "gnuradio-0", port).await;
    assert!(wait_until(|| !gw.is_registered(port), Duration::from_secs(2)).await);
    assert!(round_trip(port, b"lost").await.is_err() || refused(port).await);
}

#[tokio::test]
async fn web_bridge_serves_banner_and_tears_down() {
    let gw = gateway(GatewayConfig::default()).await;
    let remote = free_port();
    let web = free_port();
    let (_client, _display) = pod(&gw, "gnuradio-3", remote).await;
    assert!(gw.open_web_bridge("s1", web, free_port()).await.is_err());
    let bridge = gw.open_web_bridge("s1", web, remote).await.unwrap();
    assert_eq!(bridge.remote_port, remote);
    for _ in 0..3 {
        let mut conn = TcpStream::connect(addr(web)).await.unwrap();
        conn.write_all(b"GET / HTTP/1.1\r\nhost: x\r\n\r\n").await.unwrap();
        let mut text = String::new();
        conn.read_to_string(&mut text).await.unwrap();
        assert!(text.starts_with("HTTP/1.1 200 OK"));
        assert!(text.ends_with("edgepod display gnuradio-3\n"), "{text}");
    }
    assert!(gw.unregister(remote).await);
    assert!(!gw.unregister(remote).await);
    assert!(refused(remote).await);
    assert!(refused(web).await);
}

#[tokio::test]
async fn reclaim_stale_listener_through_port_manager() {
    let gw = gateway(GatewayConfig::default()).await;
    let base = free_range(4);
    let config = IndexStoreConfig {
        remote_base: base,
        web_base: base + 2,
        max_index: 2,
    };
    // a crashed pod left its tunnel up on index 0 without an index entry
    let (_stale, _display) = pod(&gw, "gnuradio-0", base).await;
    let probe = gw.listener_probe();
    assert!(probe.is_listening(base));
    let pm = PortManager::with_backends(config, Box::new(MemoryStore::new()), Box::new(probe)).unwrap();
    let got = tokio::task::spawn_blocking(move || pm.allocate("gnuradio", "s1", 0).unwrap())
        .await
        .unwrap();
    assert_eq!(got.assignment.index, 0);
    assert!(!gw.is_registered(base));
    assert!(refused(base).await);
}

#[tokio::test]
async fn foreign_listener_is_not_reclaimable() {
    let gw = gateway(GatewayConfig::default()).await;
    let foreign = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = foreign.local_addr().unwrap().port();
    let mut probe = gw.listener_probe();
    let verdict = tokio::task::spawn_blocking(move || (probe.is_listening(port), probe.shut_down(port)))
        .await
        .unwrap();
    assert_eq!(verdict, (true, false));
}
