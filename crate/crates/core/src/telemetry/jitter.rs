//! Interarrival jitter of a constant-rate packet stream.
//!
//! The nominal interval is `payload_bytes · 8 / rate_bps`; the jitter of
//! interval `i` is `|(t_i − t_{i−1}) − nominal|` in milliseconds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JitterError {
    #[error("need at least 2 arrivals, got {0}")]
    TooFewSamples(usize),
    #[error("arrival {index} is not after its predecessor")]
    NonIncreasing { index: usize },
    #[error("nominal rate must be positive")]
    InvalidRate,
    #[error("payload must be positive")]
    InvalidPayload,
    #[error("trace line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketTrace {
    /// Arrival times in seconds.
    pub arrivals: Vec<f64>,
    pub nominal_rate_bps: f64,
    pub payload_bytes: u32,
}

impl PacketTrace {
    /// Parse `seq,timestamp_us` lines. Blank lines and a `seq,...` header are skipped.
    pub fn from_csv(text: &str, nominal_rate_bps: f64, payload_bytes: u32) -> Result<Self, JitterError> {
        let mut arrivals = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || (n == 0 && line.starts_with("seq")) {
                continue;
            }
            let parse = |msg: &str| JitterError::Parse {
                line: n + 1,
                msg: msg.to_string(),
            };
            let (seq, ts) = line.split_once(',').ok_or_else(|| parse("expected seq,timestamp_us"))?;
            seq.trim().parse::<u64>().map_err(|_| parse("bad sequence number"))?;
            let us: u64 = ts.trim().parse().map_err(|_| parse("bad timestamp"))?;
            arrivals.push(us as f64 / 1e6);
        }
        Ok(Self {
            arrivals,
            nominal_rate_bps,
            payload_bytes,
        })
    }

    pub fn nominal_interval_s(&self) -> f64 {
        self.payload_bytes as f64 * 8.0 / self.nominal_rate_bps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JitterReport {
    pub nominal_interval_ms: f64,
    pub per_interval_ms: Vec<f64>,
    pub mean_ms: f64,
    /// Nearest-rank 95th percentile.
    pub p95_ms: f64,
    pub max_ms: f64,
    pub spike_threshold_ms: f64,
    /// Windows of consecutive above-threshold intervals, in seconds since the first arrival.
    pub spike_intervals: Vec<(f64, f64)>,
    /// RFC 3550 style smoothed estimate (gain 1/16) over the same deviations.
    pub smoothed_ms: f64,
    /// Set by live measurements when more than 1% of packets were lost.
    #[serde(default)]
    pub lossy: bool,
}

/// Value at rank `ceil(p · n)` of an ascending slice.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn compute_jitter(trace: &PacketTrace, spike_threshold_ms: f64) -> Result<JitterReport, JitterError> {
    if trace.nominal_rate_bps <= 0.0 || !trace.nominal_rate_bps.is_finite() {
        return Err(JitterError::InvalidRate);
    }
    if trace.payload_bytes == 0 {
        return Err(JitterError::InvalidPayload);
    }
    let arrivals = &trace.arrivals;
    if arrivals.len() < 2 {
        return Err(JitterError::TooFewSamples(arrivals.len()));
    }
    if let Some(i) = (1..arrivals.len()).find(|&i| arrivals[i] <= arrivals[i - 1]) {
        return Err(JitterError::NonIncreasing { index: i });
    }

    let nominal = trace.nominal_interval_s();
    let per_interval_ms: Vec<f64> = arrivals
        .windows(2)
        .map(|w| ((w[1] - w[0]) - nominal).abs() * 1000.0)
        .collect();

    let n = per_interval_ms.len() as f64;
    let mean_ms = per_interval_ms.iter().sum::<f64>() / n;
    let mut sorted = per_interval_ms.clone();
    sorted.sort_by(f64::total_cmp);
    let p95_ms = nearest_rank(&sorted, 0.95);
    let max_ms = *sorted.last().expect("non-empty");

    let origin = arrivals[0];
    let mut spike_intervals: Vec<(f64, f64)> = Vec::new();
    let mut open: Option<(f64, f64)> = None;
    for (i, &j) in per_interval_ms.iter().enumerate() {
        if j > spike_threshold_ms {
            let (start, end) = (arrivals[i] - origin, arrivals[i + 1] - origin);
            open = Some(open.map_or((start, end), |(s, _)| (s, end)));
        } else if let Some(window) = open.take() {
            spike_intervals.push(window);
        }
    }
    spike_intervals.extend(open);

    let smoothed_ms = per_interval_ms
        .iter()
        .fold(0.0, |j, &d| j + (d - j) / 16.0);

    Ok(JitterReport {
        nominal_interval_ms: nominal * 1000.0,
        per_interval_ms,
        mean_ms,
        p95_ms,
        max_ms,
        spike_threshold_ms,
        spike_intervals,
        smoothed_ms,
        lossy: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikeSpec {
    /// Offset of the first spiking interval, seconds from stream start.
    pub at_s: f64,
    pub magnitude_ms: f64,
    /// Number of consecutive spiking intervals.
    pub intervals: u32,
}

/// Constant-rate stream whose interval deviations are drawn uniformly from
/// `[deviation_min_ms, deviation_max_ms]` with alternating sign, so arrivals
/// never drift far from the nominal grid. Timestamps are whole microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTraceSpec {
    pub duration_s: f64,
    pub rate_bps: f64,
    pub payload_bytes: u32,
    pub deviation_min_ms: f64,
    pub deviation_max_ms: f64,
    pub spikes: Vec<SpikeSpec>,
    pub seed: u64,
}

pub fn synthesize_trace(spec: &SyntheticTraceSpec) -> PacketTrace {
    let nominal_us = (spec.payload_bytes as f64 * 8.0 / spec.rate_bps * 1e6).round() as i64;
    let lo = (spec.deviation_min_ms * 1000.0).round() as i64;
    let hi = ((spec.deviation_max_ms * 1000.0).round() as i64)
        .max(lo)
        .min(nominal_us - 1);
    let lo = lo.min(hi);
    let intervals = (spec.duration_s * 1e6 / nominal_us as f64).round().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut spike_at: Vec<(usize, usize, i64)> = spec
        .spikes
        .iter()
        .map(|s| {
            let first = (s.at_s * 1e6 / nominal_us as f64).round() as usize;
            (first, first + s.intervals as usize, (s.magnitude_ms * 1000.0).round() as i64)
        })
        .collect();
    spike_at.sort();

    let mut t: i64 = 0;
    let mut arrivals = Vec::with_capacity(intervals + 1);
    arrivals.push(0.0);
    let mut sign = 1;
    for i in 0..intervals {
        let gap = match spike_at.iter().find(|(a, b, _)| (*a..*b).contains(&i)) {
            Some(&(_, _, mag)) => nominal_us + mag,
            None => {
                let d = rng.gen_range(lo..=hi);
                sign = -sign;
                nominal_us + sign * d
            }
        };
        t += gap.max(1);
        arrivals.push(t as f64 / 1e6);
    }
    PacketTrace {
        arrivals,
        nominal_rate_bps: spec.rate_bps,
        payload_bytes: spec.payload_bytes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn periodic(n: usize, dt: f64) -> PacketTrace {
        PacketTrace {
            arrivals: (0..n).map(|i| i as f64 * dt).collect(),
            nominal_rate_bps: 10e6,
            payload_bytes: 1250,
        }
    }

    #[test]
    fn periodic_stream_has_zero_jitter() {
        let report = compute_jitter(&periodic(1000, 0.001), 1.75).unwrap();
        assert_eq!(report.nominal_interval_ms, 1.0);
        assert_eq!(report.per_interval_ms.len(), 999);
        assert!(report.max_ms < 1e-9);
        assert!(report.mean_ms < 1e-9);
        assert!(report.spike_intervals.is_empty());
    }

    #[test]
    fn errors() {
        assert_eq!(
            compute_jitter(&periodic(1, 0.001), 1.0),
            Err(JitterError::TooFewSamples(1))
        );
        let mut t = periodic(4, 0.001);
        t.arrivals[2] = t.arrivals[1];
        assert_eq!(compute_jitter(&t, 1.0), Err(JitterError::NonIncreasing { index: 2 }));
        let mut t = periodic(4, 0.001);
        t.nominal_rate_bps = 0.0;
        assert_eq!(compute_jitter(&t, 1.0), Err(JitterError::InvalidRate));
    }

    #[test]
    fn nearest_rank_p95_of_hundred() {
        let values: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(nearest_rank(&values, 0.95), 95.0);
        assert_eq!(nearest_rank(&values[..1], 0.95), 1.0);
        assert_eq!(nearest_rank(&values[..20], 0.95), 19.0);
    }

    #[test]
    fn spikes_merge_into_windows() {
        // 1 ms nominal; intervals 3..=5 and 8 are 3 ms long
        let mut t = 0.0;
        let mut arrivals = vec![0.0];
        for i in 0..12 {
            t += if (3..=5).contains(&i) || i == 8 { 0.003 } else { 0.001 };
            arrivals.push(t);
        }
        let report = compute_jitter(
            &PacketTrace {
                arrivals: arrivals.clone(),
                nominal_rate_bps: 10e6,
                payload_bytes: 1250,
            },
            1.75,
        )
        .unwrap();
        assert_eq!(report.spike_intervals.len(), 2);
        let (s, e) = report.spike_intervals[0];
        assert!((s - arrivals[3]).abs() < 1e-12 && (e - arrivals[6]).abs() < 1e-12);
        let (s, e) = report.spike_intervals[1];
        assert!((s - arrivals[8]).abs() < 1e-12 && (e - arrivals[9]).abs() < 1e-12);
        assert!((report.max_ms - 2.0).abs() < 1e-9);
    }

    #[test]
    fn trailing_spike_is_closed() {
        let arrivals = vec![0.0, 0.001, 0.002, 0.006];
        let report = compute_jitter(
            &PacketTrace {
                arrivals,
                nominal_rate_bps: 10e6,
                payload_bytes: 1250,
            },
            1.75,
        )
        .unwrap();
        assert_eq!(report.spike_intervals.len(), 1);
    }

    #[test]
    fn csv_import() {
        let text = "seq,timestamp_us\n0,1000\n1,2000\n\n2,3500\n";
        let trace = PacketTrace::from_csv(text, 10e6, 1250).unwrap();
        assert_eq!(trace.arrivals, vec![0.001, 0.002, 0.0035]);
        assert!(matches!(
            PacketTrace::from_csv("0;12\n", 1.0, 1),
            Err(JitterError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn synthetic_trace_shape() {
        let spec = SyntheticTraceSpec {
            duration_s: 2.0,
            rate_bps: 10e6,
            payload_bytes: 1250,
            deviation_min_ms: 0.4,
            deviation_max_ms: 0.8,
            spikes: vec![SpikeSpec { at_s: 1.0, magnitude_ms: 2.0, intervals: 2 }],
            seed: 1,
        };
        let trace = synthesize_trace(&spec);
        assert_eq!(trace.arrivals.len(), 2001);
        let report = compute_jitter(&trace, 1.75).unwrap();
        assert_eq!(report.spike_intervals.len(), 1);
        assert!((report.spike_intervals[0].0 - 1.0).abs() < 0.01);
        assert_eq!(synthesize_trace(&spec), trace);
    }
}
