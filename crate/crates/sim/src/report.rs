//! Metrics report and its canonical serialization: sorted keys, floats with
//! six decimals, no insignificant whitespace.

use serde::Serialize;
use serde_json::Value;

pub const FLOAT_DECIMALS: usize = 6;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DecisionCounts {
    pub issue: u64,
    pub aggregate: u64,
    pub suppress: u64,
    pub safeguard: u64,
    pub dedup: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ConservationReport {
    pub alerts: u64,
    pub issued: u64,
    pub digest_members: u64,
    pub suppressed: u64,
    pub waiting_in_windows: u64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssertionResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub scenario: Option<String>,
    pub mode: String,
    pub seed: u64,
    pub users: u64,
    pub days: f64,
    pub events: u64,
    pub alerts: u64,
    pub critical_alerts: u64,
    pub decisions: DecisionCounts,
    pub notifications: u64,
    pub digests: u64,
    pub dispatched: u64,
    pub sends: u64,
    pub feedback: u64,
    pub missed_critical_rate: f64,
    pub interruptions_per_user_day: f64,
    pub mean_response_delay_minutes: f64,
    pub suppressed_fraction: f64,
    /// Alerts delivered inside digests over all delivered alerts.
    pub digest_ratio: f64,
    pub negative_feedback_rate: f64,
    pub conservation: ConservationReport,
    pub assertions: Vec<AssertionResult>,
    pub passed: bool,
}

impl MetricsReport {
    pub fn to_canonical(&self) -> String {
        canonical_json(&serde_json::to_value(self).expect("report serializes"))
    }
}

pub fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn canonical_json(v: &Value) -> String {
    let mut out = String::new();
    write_value(v, &mut out);
    out
}

fn write_value(v: &Value, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                let f = n.as_f64().expect("f64 number");
                // Avoid a "-0.000000" that would differ from "0.000000".
                let f = if f == 0.0 { 0.0 } else { f };
                out.push_str(&format!("{f:.FLOAT_DECIMALS$}"));
            } else {
                out.push_str(&n.to_string());
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("string serializes")),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("key serializes"));
                out.push(':');
                write_value(&map[k], out);
            }
            out.push('}');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_sorted_and_floats_fixed() {
        let v = json!({"b": 1.0, "a": [0.1234567, -0.0, 3], "c": {"z": "x\"y", "y": null}});
        assert_eq!(
            canonical_json(&v),
            r#"{"a":[0.123457,0.000000,3],"b":1.000000,"c":{"y":null,"z":"x\"y"}}"#
        );
    }

    #[test]
    fn default_report_is_stable() {
        let r = MetricsReport::default();
        assert_eq!(r.to_canonical(), r.clone().to_canonical());
        assert!(r.to_canonical().contains("\"missed_critical_rate\":0.000000"));
    }

    #[test]
    fn ratio_guards_zero() {
        assert_eq!(ratio(3, 0), 0.0);
        assert_eq!(ratio(1, 4), 0.25);
    }
}
