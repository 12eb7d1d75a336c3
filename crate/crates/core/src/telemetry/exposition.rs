//! Text exposition rendering.
//!
//! ```text
//! document = { line "\n" }
//! line     = series " " value " " timestamp_ms
//! series   = name [ "{" label { "," label } "}" ]
//! label    = lname "=\"" escaped "\""      (labels sorted by lname)
//! escaped  = value with \ → \\, " → \", newline → \n
//! value    = shortest round-trip decimal | "NaN" | "+Inf" | "-Inf"
//! ```

use super::{Labels, MetricSample};

pub fn escape_label_value(v: &str) -> String {
    let mut out = String::with_capacity(v.len());
    for c in v.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '"' => out.push_str("\\\""),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

pub fn format_value(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v == f64::INFINITY {
        "+Inf".into()
    } else if v == f64::NEG_INFINITY {
        "-Inf".into()
    } else {
        v.to_string()
    }
}

pub fn render_series(name: &str, labels: &Labels) -> String {
    if labels.is_empty() {
        return name.to_string();
    }
    let body: Vec<String> = labels
        .iter()
        .map(|(k, v)| format!("{k}=\"{}\"", escape_label_value(v)))
        .collect();
    format!("{name}{{{}}}", body.join(","))
}

pub(super) fn render(samples: &[MetricSample]) -> String {
    let mut lines: Vec<String> = samples
        .iter()
        .map(|s| {
            format!(
                "{} {} {}",
                render_series(&s.name, &s.labels),
                format_value(s.value),
                s.timestamp_ms
            )
        })
        .collect();
    lines.sort();
    let mut doc = lines.join("\n");
    if !doc.is_empty() {
        doc.push('\n');
    }
    doc
}
