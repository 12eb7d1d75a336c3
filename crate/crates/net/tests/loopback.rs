use std::time::Duration;

use edgepod_net::loopback::{capture_loopback, measure_loopback_jitter, LoopbackError};

#[test]
fn ten_seconds_at_ten_megabits() {
    let report = measure_loopback_jitter(Duration::from_secs(10), 10e6).unwrap();
    assert_eq!(report.nominal_interval_ms, 1.0);
    println!(
        "loopback: mean {:.3} ms, p95 {:.3} ms, max {:.3} ms, lossy {}",
        report.mean_ms, report.p95_ms, report.max_ms, report.lossy
    );
    assert!(report.p95_ms < 5.0, "p95 {}", report.p95_ms);
    assert!(!report.lossy);
}

#[test]
fn zero_rate_rejected() {
    assert!(matches!(
        measure_loopback_jitter(Duration::from_secs(1), 0.0),
        Err(LoopbackError::InvalidRate)
    ));
}

#[test]
fn interval_count_follows_packet_count() {
    // 200 ms at 1 ms spacing
    let capture = capture_loopback(Duration::from_millis(200), 10e6, 1250).unwrap();
    assert_eq!(capture.sent, 200);
    let report = edgepod_core::telemetry::compute_jitter(&capture.trace, 1.75).unwrap();
    assert_eq!(report.per_interval_ms.len() as u64, capture.received - 1);
}
