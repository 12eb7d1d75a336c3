//! Browser bindings for three pieces of the core crate. Every export takes
//! plain numbers or text and returns a JSON string, so the page needs no
//! generated type glue beyond `wasm-bindgen`'s.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use edgepod_core::lifecycle::{Orchestrator, OrchestratorConfig, SimRuntime};
use edgepod_core::ports::{IndexStoreConfig, PortManager};
use edgepod_core::scheduler::{NodeDescriptor, ResourceRequest, Scheduler, GIB};
use edgepod_core::telemetry::{compute_jitter, synthesize_trace, PacketTrace, Registry, SpikeSpec, SyntheticTraceSpec};
use edgepod_core::SimClock;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn error(msg: impl std::fmt::Display) -> String {
    json!({ "error": msg.to_string() }).to_string()
}

/// Deploy `pods` pods of `mem_gib` GiB, `gap_s` apart, on the three-worker
/// simulated cluster and sample memory every `step_s` until `duration_s`.
///
/// Returns `{"t_s": [...], "series": {"gnuradio-0": [bytes...], ...}}`;
/// a pod's series is `null` before it exists.
#[wasm_bindgen]
pub fn simulate_memory(pods: u32, mem_gib: f64, gap_s: f64, step_s: f64, duration_s: f64) -> String {
    match run_memory(pods, mem_gib, gap_s, step_s, duration_s) {
        Ok(v) => v.to_string(),
        Err(e) => error(e),
    }
}

fn run_memory(pods: u32, mem_gib: f64, gap_s: f64, step_s: f64, duration_s: f64) -> Result<Value, String> {
    if pods == 0 || pods > 64 {
        return Err("pods must be between 1 and 64".into());
    }
    if !(step_s > 0.0 && gap_s >= 0.0 && duration_s > 0.0 && mem_gib > 0.0) {
        return Err("times and memory must be positive".into());
    }
    if duration_s / step_s > 20_000.0 {
        return Err("too many samples; raise step_s".into());
    }
    let clock = SimClock::new(0);
    let mut orch = Orchestrator::new(
        OrchestratorConfig::default(),
        Arc::new(clock.clone()),
        Arc::new(PortManager::new(IndexStoreConfig::default()).map_err(|e| e.to_string())?),
        Box::new(SimRuntime::new(Duration::from_millis(100))),
        Arc::new(Registry::default()),
    )
    .map_err(|e| e.to_string())?;
    let request = ResourceRequest::new(500, (mem_gib * GIB as f64) as u64);
    let step = Duration::from_secs_f64(step_s);
    let end_ms = (duration_s * 1000.0) as u64;
    let mut deployed = 0u32;
    let mut times = Vec::new();
    let mut series: BTreeMap<String, Vec<Value>> = BTreeMap::new();
    let mut now = 0u64;
    while now <= end_ms {
        while deployed < pods && now as f64 >= deployed as f64 * gap_s * 1000.0 {
            orch.provision(&format!("demo-{deployed}"), "gnuradio", &request)
                .map_err(|e| e.to_string())?;
            deployed += 1;
        }
        times.push(json!(now as f64 / 1000.0));
        for i in 0..pods {
            let name = format!("gnuradio-{i}");
            let v = orch.pod_memory(&name).map_or(Value::Null, |b| json!(b));
            series.entry(name).or_default().push(v);
        }
        clock.advance(step);
        orch.drive();
        now = orch.now();
    }
    Ok(json!({ "t_s": times, "series": series }))
}

/// Jitter report for a `seq,timestamp_us` CSV trace. An empty trace
/// analyzes a synthetic 40 s, 10 Mbit/s stream with two short spikes.
#[wasm_bindgen]
pub fn analyze_jitter(csv: &str, rate_bps: f64, payload_bytes: u32, threshold_ms: f64) -> String {
    let trace = if csv.trim().is_empty() {
        Ok(synthesize_trace(&SyntheticTraceSpec {
            duration_s: 40.0,
            rate_bps,
            payload_bytes,
            deviation_min_ms: 0.4,
            deviation_max_ms: 0.8,
            spikes: vec![
                SpikeSpec { at_s: 4.5, magnitude_ms: 2.0, intervals: 3 },
                SpikeSpec { at_s: 36.5, magnitude_ms: 2.0, intervals: 3 },
            ],
            seed: 7,
        }))
    } else {
        PacketTrace::from_csv(csv, rate_bps, payload_bytes)
    };
    let report = trace.and_then(|t| {
        let report = compute_jitter(&t, threshold_ms)?;
        Ok((t, report))
    });
    match report {
        Ok((trace, r)) => {
            let origin = trace.arrivals[0];
            let t_s: Vec<f64> = trace.arrivals[1..].iter().map(|a| a - origin).collect();
            json!({
                "mean_ms": r.mean_ms,
                "p95_ms": r.p95_ms,
                "max_ms": r.max_ms,
                "nominal_interval_ms": r.nominal_interval_ms,
                "spike_intervals_s": r.spike_intervals,
                "t_s": t_s,
                "per_interval_ms": r.per_interval_ms,
            })
            .to_string()
        }
        Err(e) => error(e),
    }
}

/// Place `pods` identical pods on `workers` empty workers under the
/// least-allocated policy. Returns the node chosen for each pod in order
/// plus per-node counts; pods that fit nowhere map to `null`.
#[wasm_bindgen]
pub fn schedule(pods: u32, workers: u32, cpu_millicores: u32, mem_gib: f64) -> String {
    if workers == 0 || workers > 32 || pods > 1024 {
        return error("workers must be 1..=32 and pods at most 1024");
    }
    let nodes = (1..=workers)
        .map(|i| NodeDescriptor::worker(format!("worker-{i}"), 4000, 32 * GIB))
        .collect();
    let mut sched = Scheduler::new(nodes);
    let request = ResourceRequest::new(cpu_millicores as u64, (mem_gib * GIB as f64) as u64);
    let mut placements = Vec::new();
    let mut counts: BTreeMap<String, u32> = (1..=workers).map(|i| (format!("worker-{i}"), 0)).collect();
    for i in 0..pods {
        match sched.bind(&format!("pod-{i}"), &request, 0) {
            Ok(d) => {
                *counts.entry(d.node_id.clone()).or_default() += 1;
                placements.push(json!(d.node_id));
            }
            Err(e) => {
                if placements.is_empty() {
                    return error(e);
                }
                placements.push(Value::Null);
            }
        }
    }
    json!({ "placements": placements, "per_node": counts }).to_string()
}
