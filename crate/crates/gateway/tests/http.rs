mod common;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use common::{http, http_json, sim_platform, SimPlatform, HOUR};
use edgepod_core::lifecycle::OrchestratorConfig;
use edgepod_core::Clock;
use serde_json::json;

struct Api {
    sim: SimPlatform,
    addr: SocketAddr,
    _rt: tokio::runtime::Runtime,
}

fn serve() -> Api {
    let sim = sim_platform(OrchestratorConfig::default(), 64);
    let rt = tokio::runtime::Runtime::new().unwrap();
    let router = edgepod_gateway::http::router(Arc::clone(&sim.platform));
    let listener = rt
        .block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))
        .unwrap();
    let addr = listener.local_addr().unwrap();
    rt.spawn(async move { axum::serve(listener, router).await });
    Api { sim, addr, _rt: rt }
}

impl Api {
    fn login(&self, user: &str) -> String {
        let r = http_json(
            self.addr,
            "POST",
            "/auth",
            None,
            &json!({"user_id": user, "password": format!("{user}-pw")}),
        );
        assert_eq!(r.status, 200, "{}", r.text());
        r.json()["token"].as_str().unwrap().to_string()
    }

    fn reserve(&self, token: &str, node: &str, devices: &[&str]) -> serde_json::Value {
        let now = self.sim.clock.now_secs();
        let r = http_json(
            self.addr,
            "POST",
            "/reservations",
            Some(token),
            &json!({
                "testbed_id": "sdr",
                "node_id": node,
                "device_ids": devices,
                "start": now,
                "end": now + HOUR,
            }),
        );
        assert_eq!(r.status, 201, "{}", r.text());
        r.json()
    }
}

#[test]
fn auth_status_codes_and_throttle() {
    let api = serve();
    let bad = http_json(api.addr, "POST", "/auth", None, &json!({"user_id": "alice", "password": "x"}));
    assert_eq!(bad.status, 401);
    assert_eq!(bad.json()["error"], "unauthorized");

    let t0 = api.sim.clock.now_ms();
    for _ in 0..4 {
        http_json(api.addr, "POST", "/auth", None, &json!({"user_id": "alice", "password": "x"}));
    }
    assert!(api.sim.clock.now_ms() - t0 >= 4000, "five failed attempts must cost 4 s");

    let token = api.login("alice");
    let me = http(api.addr, "GET", "/sessions", Some(&token), None);
    assert_eq!(me.status, 200);
    assert_eq!(me.json(), json!([]));
}

#[test]
fn protected_routes_reject_missing_and_forged_tokens() {
    let api = serve();
    let routes = [
        ("GET", "/inventory"),
        ("GET", "/reservations"),
        ("POST", "/reservations"),
        ("DELETE", "/reservations/r-1"),
        ("GET", "/sessions"),
        ("POST", "/sessions"),
        ("DELETE", "/sessions/s1"),
        ("GET", "/cluster"),
        ("GET", "/pods/gnuradio-0"),
        ("POST", "/sessions/s1/files/a.txt"),
    ];
    let alice = api.login("alice");
    api.sim.clock.advance(Duration::from_secs(8 * HOUR));
    for (method, path) in routes {
        for token in [None, Some("forged"), Some(alice.as_str())] {
            let body = if method == "POST" { Some(&b"{}"[..]) } else { None };
            let r = http(api.addr, method, path, token, body);
            assert_eq!(r.status, 401, "{method} {path} with {token:?}: {}", r.text());
        }
    }
    assert_eq!(http(api.addr, "GET", "/metrics", None, None).status, 200);
}

#[test]
fn reservation_and_session_flow() {
    let api = serve();
    let alice = api.login("alice");
    let bob = api.login("bob");

    let inv = http(api.addr, "GET", "/inventory?lab=x-lab", Some(&alice), None);
    assert_eq!(inv.status, 200);
    assert_eq!(inv.json()[0]["testbeds"][0]["devices"].as_array().unwrap().len(), 8);
    assert_eq!(http(api.addr, "GET", "/inventory?lab=nope", Some(&alice), None).status, 404);

    let r = api.reserve(&alice, "node-1", &["usrp-1", "usrp-2"]);
    let rid = r["reservation_id"].as_str().unwrap();
    let now = api.sim.clock.now_secs();
    let clash = http_json(
        api.addr,
        "POST",
        "/reservations",
        Some(&bob),
        &json!({"testbed_id": "sdr", "node_id": "node-1", "device_ids": ["usrp-3"], "start": now, "end": now + 60}),
    );
    assert_eq!(clash.status, 409);
    assert_eq!(clash.json()["detail"]["blocking"], rid);

    let denied = http_json(api.addr, "POST", "/sessions", Some(&bob), &json!({"reservation_id": rid, "app": "gnuradio"}));
    assert_eq!(denied.status, 403);

    let s = http_json(api.addr, "POST", "/sessions", Some(&alice), &json!({"reservation_id": rid, "app": "gnuradio"}));
    assert_eq!(s.status, 200, "{}", s.text());
    let s = s.json();
    assert_eq!(s["state"], "live");
    assert_eq!(s["pod_name"], "gnuradio-0");
    let sid = s["session_id"].as_str().unwrap();

    let again = http_json(
        api.addr,
        "POST",
        "/sessions",
        Some(&alice),
        &json!({"reservation_id": rid, "app": "gnuradio", "session_id": sid}),
    );
    assert_eq!(again.json()["pod_name"], "gnuradio-0");

    let pod = http(api.addr, "GET", "/pods/gnuradio-0", Some(&alice), None);
    assert_eq!(pod.status, 200);
    assert_eq!(pod.json()["pod"]["phase"], "Ready");
    assert_eq!(http(api.addr, "GET", "/pods/gnuradio-0", Some(&bob), None).status, 403);

    let cluster = http(api.addr, "GET", "/cluster", Some(&alice), None).json();
    assert!(cluster["nodes"].is_null());
    let admin = api.login("admin");
    let cluster = http(api.addr, "GET", "/cluster", Some(&admin), None).json();
    assert_eq!(cluster["nodes"].as_array().unwrap().len(), 4);

    let up = http(api.addr, "POST", &format!("/sessions/{sid}/files/run.grc"), Some(&alice), Some(b"abc"));
    assert_eq!(up.status, 201, "{}", up.text());
    let too_big = http(
        api.addr,
        "POST",
        &format!("/sessions/{sid}/files/big.bin"),
        Some(&alice),
        Some(&[7u8; 4096]),
    );
    assert_eq!(too_big.status, 413);

    let metrics = http(api.addr, "GET", "/metrics", None, None).text();
    assert!(metrics.contains("pod_memory_bytes{pod=\"gnuradio-0\"}"), "{metrics}");
    assert!(metrics.contains("http_requests_total{"), "{metrics}");

    let d = http(api.addr, "DELETE", &format!("/sessions/{sid}"), Some(&alice), None);
    assert_eq!(d.status, 200);
    assert_eq!(d.json()["state"], "closed");
    let d2 = http(api.addr, "DELETE", &format!("/sessions/{sid}"), Some(&alice), None);
    assert_eq!(d2.status, 200);
    assert_eq!(http(api.addr, "DELETE", "/sessions/nope", Some(&alice), None).status, 404);

    assert_eq!(http(api.addr, "DELETE", &format!("/reservations/{rid}"), Some(&bob), None).status, 403);
    assert_eq!(http(api.addr, "DELETE", &format!("/reservations/{rid}"), Some(&alice), None).status, 204);
    let outside = http_json(api.addr, "POST", "/sessions", Some(&alice), &json!({"reservation_id": rid, "app": "gnuradio"}));
    assert_eq!(outside.status, 404);
}

#[test]
fn outside_window_gets_next_window_hint() {
    let api = serve();
    let alice = api.login("alice");
    let now = api.sim.clock.now_secs();
    let r = http_json(
        api.addr,
        "POST",
        "/reservations",
        Some(&alice),
        &json!({"testbed_id": "sdr", "node_id": "node-3", "device_ids": ["usrp-7"], "start": now + HOUR, "end": now + 2 * HOUR}),
    )
    .json();
    let c = http_json(
        api.addr,
        "POST",
        "/sessions",
        Some(&alice),
        &json!({"reservation_id": r["reservation_id"], "app": "gnuradio"}),
    );
    assert_eq!(c.status, 403);
    assert_eq!(c.json()["next_window"]["start"], now + HOUR);
}

#[test]
fn pending_connect_is_503_with_retry_after() {
    let api = serve();
    let alice = api.login("alice");
    let r = api.reserve(&alice, "node-1", &["usrp-1"]);
    let rid = r["reservation_id"].as_str().unwrap();
    for _ in 0..24 {
        let s = http_json(api.addr, "POST", "/sessions", Some(&alice), &json!({"reservation_id": rid, "app": "gnuradio"}));
        assert_eq!(s.status, 200);
    }
    let s = http_json(api.addr, "POST", "/sessions", Some(&alice), &json!({"reservation_id": rid, "app": "gnuradio"}));
    assert_eq!(s.status, 503);
    assert_eq!(s.header("retry-after"), Some("5"));
    let body = s.json();
    assert_eq!(body["session"]["state"], "provisioning");
    assert!(body["message"].as_str().unwrap().contains("insufficient cpu"));
}

#[test]
fn shipped_example_configs_load() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config");
    let config = edgepod_gateway::Config::load(Some(&dir.join("edgepod.toml"))).unwrap();
    let users = std::fs::read_to_string(config.auth.users_file.as_ref().unwrap()).unwrap();
    let users = edgepod_gateway::auth::UsersFile::from_toml_str(&users).unwrap().users;
    assert!(users.iter().any(|u| u.id == "admin"));
    let inventory = std::fs::read_to_string(config.inventory.file.as_ref().unwrap()).unwrap();
    edgepod_core::reservation::Inventory::from_toml_str(&inventory).unwrap();
}
