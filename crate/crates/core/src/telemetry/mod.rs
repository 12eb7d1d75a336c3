//! Metrics registry with time-bounded retention and a text scrape format,
//! plus offline packet-interarrival jitter analysis.

mod exposition;
pub mod jitter;

use std::collections::{BTreeMap, VecDeque};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Millis;

pub use exposition::{escape_label_value, format_value, render_series};
pub use jitter::{
    compute_jitter, synthesize_trace, JitterError, JitterReport, PacketTrace, SpikeSpec,
    SyntheticTraceSpec,
};

pub type Labels = BTreeMap<String, String>;

pub const DEFAULT_RETENTION_MS: Millis = 60 * 60 * 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TelemetryError {
    #[error("timestamp {got} precedes last sample {last} of series {series}")]
    TimestampRegression { series: String, last: Millis, got: Millis },
    #[error("invalid metric name {0:?}")]
    InvalidName(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub name: String,
    pub labels: Labels,
    pub value: f64,
    pub timestamp_ms: Millis,
}

impl MetricSample {
    pub fn new(name: impl Into<String>, labels: &[(&str, &str)], value: f64, timestamp_ms: Millis) -> Self {
        Self {
            name: name.into(),
            labels: labels
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            value,
            timestamp_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct SeriesKey {
    name: String,
    labels: Labels,
}

/// One stored series returned by [`Registry::query`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub labels: Labels,
    /// `(timestamp_ms, value)`, oldest first.
    pub points: Vec<(Millis, f64)>,
}

fn valid_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == ':')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == ':')
}

#[derive(Debug)]
pub struct Registry {
    retention_ms: Millis,
    series: RwLock<BTreeMap<SeriesKey, VecDeque<(Millis, f64)>>>,
}

impl Default for Registry {
    fn default() -> Self {
        Self::new(DEFAULT_RETENTION_MS)
    }
}

impl Registry {
    pub fn new(retention_ms: Millis) -> Self {
        Self {
            retention_ms,
            series: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn record(&self, sample: MetricSample) -> Result<(), TelemetryError> {
        if !valid_name(&sample.name) {
            return Err(TelemetryError::InvalidName(sample.name));
        }
        for key in sample.labels.keys() {
            if !valid_name(key) || key.contains(':') {
                return Err(TelemetryError::InvalidName(key.clone()));
            }
        }
        let key = SeriesKey {
            name: sample.name,
            labels: sample.labels,
        };
        let mut all = self.series.write().unwrap_or_else(|e| e.into_inner());
        let points = all.entry(key.clone()).or_default();
        if let Some(&(last, _)) = points.back() {
            if sample.timestamp_ms < last {
                return Err(TelemetryError::TimestampRegression {
                    series: render_series(&key.name, &key.labels),
                    last,
                    got: sample.timestamp_ms,
                });
            }
        }
        points.push_back((sample.timestamp_ms, sample.value));
        let horizon = sample.timestamp_ms.saturating_sub(self.retention_ms);
        while points.front().is_some_and(|&(t, _)| t < horizon) {
            points.pop_front();
        }
        Ok(())
    }

    /// Add `delta` to the latest value of a counter-like series.
    pub fn add(&self, name: &str, labels: &[(&str, &str)], delta: f64, now: Millis) -> Result<(), TelemetryError> {
        let sample = MetricSample::new(name, labels, delta, now);
        let current = self.latest_value(&sample.name, &sample.labels).unwrap_or(0.0);
        self.record(MetricSample {
            value: current + delta,
            ..sample
        })
    }

    pub fn latest_value(&self, name: &str, labels: &Labels) -> Option<f64> {
        let all = self.series.read().unwrap_or_else(|e| e.into_inner());
        all.get(&SeriesKey {
            name: name.to_string(),
            labels: labels.clone(),
        })
        .and_then(|p| p.back().map(|&(_, v)| v))
    }

    /// Series named `name` whose labels include every pair in `filter`.
    pub fn query(&self, name: &str, filter: &Labels) -> Vec<Series> {
        let all = self.series.read().unwrap_or_else(|e| e.into_inner());
        all.iter()
            .filter(|(k, _)| k.name == name && filter.iter().all(|(fk, fv)| k.labels.get(fk) == Some(fv)))
            .map(|(k, points)| Series {
                name: k.name.clone(),
                labels: k.labels.clone(),
                points: points.iter().copied().collect(),
            })
            .collect()
    }

    /// Most recent sample of every series.
    pub fn latest(&self) -> Vec<MetricSample> {
        let all = self.series.read().unwrap_or_else(|e| e.into_inner());
        all.iter()
            .filter_map(|(k, points)| {
                points.back().map(|&(t, v)| MetricSample {
                    name: k.name.clone(),
                    labels: k.labels.clone(),
                    value: v,
                    timestamp_ms: t,
                })
            })
            .collect()
    }

    /// Text exposition: one `name{label="value",...} value timestamp_ms` line
    /// per series, lexicographically ordered, newline terminated.
    pub fn scrape_exposition(&self) -> String {
        exposition::render(&self.latest())
    }
}
