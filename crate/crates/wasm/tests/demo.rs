use edgepod_wasm::{analyze_jitter, schedule, simulate_memory};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn memory_series_ramp_to_request() {
    let v = parse(simulate_memory(3, 2.0, 150.0, 5.0, 600.0));
    let t = v["t_s"].as_array().unwrap();
    assert!(t.len() > 100);
    let gib = (1u64 << 30) as f64;
    for i in 0..3 {
        let s = v["series"][format!("gnuradio-{i}")].as_array().unwrap();
        assert_eq!(s.len(), t.len());
        let last = s.last().unwrap().as_f64().unwrap();
        assert!((last - 2.0 * gib).abs() < 0.05 * 2.0 * gib, "{last}");
    }
    // the third pod does not exist at t = 0
    assert!(v["series"]["gnuradio-2"][0].is_null());
}

#[test]
fn memory_rejects_bad_arguments() {
    assert!(parse(simulate_memory(0, 2.0, 1.0, 1.0, 1.0))["error"].is_string());
    assert!(parse(simulate_memory(1, 2.0, 1.0, 0.0, 1.0))["error"].is_string());
}

#[test]
fn synthetic_jitter_profile() {
    let v = parse(analyze_jitter("", 10e6, 1250, 1.75));
    assert!((v["mean_ms"].as_f64().unwrap() - 0.6).abs() < 0.05);
    assert_eq!(v["spike_intervals_s"].as_array().unwrap().len(), 2);
    assert_eq!(v["t_s"].as_array().unwrap().len(), v["per_interval_ms"].as_array().unwrap().len());
}

#[test]
fn jitter_from_csv_and_errors() {
    let v = parse(analyze_jitter("seq,timestamp_us\n0,0\n1,1000\n2,2500\n", 10e6, 1250, 1.75));
    assert_eq!(v["per_interval_ms"], serde_json::json!([0.0, 0.5]));
    assert!(parse(analyze_jitter("0,0\n", 10e6, 1250, 1.75))["error"].is_string());
    assert!(parse(analyze_jitter("x", 10e6, 1250, 1.75))["error"].is_string());
}

#[test]
fn five_pods_spread_two_two_one() {
    let v = parse(schedule(5, 3, 500, 2.0));
    assert_eq!(v["per_node"], serde_json::json!({"worker-1": 2, "worker-2": 2, "worker-3": 1}));
    let full = parse(schedule(10, 1, 500, 2.0));
    assert!(full["placements"][8].is_null());
}
