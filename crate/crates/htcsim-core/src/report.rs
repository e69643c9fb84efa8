//! Scalar run summaries and run-to-run comparison.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// The headline numbers of one run; written as `summary.json`.
///
/// Field names are a stable contract: `time_ms,metric,value` rows in
/// `metrics.csv` and these keys in `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario_name: String,
    pub scenario_hash: String,
    pub seed: u64,
    pub duration_ms: u64,
    pub utilization_mean: f64,
    pub htc_tasks_generated: u64,
    pub htc_tasks_completed: u64,
    pub htc_core_hours: f64,
    pub hpc_core_hours: f64,
    pub mean_task_wait_s: f64,
    pub preemption_count: u64,
    pub backlog_min_nodes: u64,
    pub pilots_registered: u64,
    pub wrappers_submitted: u64,
    /// Job starts later than the reservation recorded when the job first
    /// became head of the queue. The EASY guarantee keeps this at zero.
    pub reservation_delays: u64,
    pub credential_pauses: u64,
    /// Completed transfers whose rate integral missed their size by more
    /// than one millisecond quantum. Must be zero.
    pub flow_violations: u64,
    pub executed_task_hours: f64,
    pub wasted_task_hours: f64,
}

impl RunSummary {
    /// Internal consistency: utilization is a fraction and accounted
    /// core-hours cannot exceed capacity.
    pub fn check(&self, capacity_core_hours: f64) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.utilization_mean) {
            return Err(format!("utilization_mean {} outside [0,1]", self.utilization_mean));
        }
        let accounted = self.htc_core_hours + self.hpc_core_hours;
        if accounted > capacity_core_hours * (1.0 + 1e-9) {
            return Err(format!(
                "htc + hpc core-hours {accounted} exceed capacity {capacity_core_hours}"
            ));
        }
        Ok(())
    }

    /// Numeric fields as a name -> value map, for generic comparison.
    pub fn numeric_fields(&self) -> BTreeMap<String, f64> {
        let value = serde_json::to_value(self).expect("summary serializes");
        let mut out = BTreeMap::new();
        if let serde_json::Value::Object(map) = value {
            for (k, v) in map {
                if let Some(n) = v.as_f64() {
                    out.insert(k, n);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub a: f64,
    pub b: f64,
    pub abs: f64,
    /// Relative delta (b - a) / |a|; absent when `a` is zero.
    pub rel: Option<f64>,
}

/// Per-metric deltas between two runs of comparable scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub run_a: String,
    pub run_b: String,
    pub metrics: BTreeMap<String, MetricDelta>,
}

pub fn compare(a: &RunSummary, b: &RunSummary) -> CompareReport {
    let fa = a.numeric_fields();
    let fb = b.numeric_fields();
    let mut metrics = BTreeMap::new();
    for (name, &va) in &fa {
        let Some(&vb) = fb.get(name) else { continue };
        let rel = (va != 0.0).then(|| (vb - va) / va.abs());
        metrics.insert(name.clone(), MetricDelta { a: va, b: vb, abs: vb - va, rel });
    }
    CompareReport { run_a: a.scenario_hash.clone(), run_b: b.scenario_hash.clone(), metrics }
}

/// Leaf key paths on which two TOML documents differ (present in one side
/// or unequal), dotted.
pub fn toml_diff_paths(a: &toml::Value, b: &toml::Value) -> Vec<String> {
    let mut out = Vec::new();
    diff_into(a, b, String::new(), &mut out);
    out.sort();
    out.dedup();
    out
}

fn diff_into(a: &toml::Value, b: &toml::Value, path: String, out: &mut Vec<String>) {
    match (a, b) {
        (toml::Value::Table(ta), toml::Value::Table(tb)) => {
            for key in ta.keys().chain(tb.keys()) {
                let sub = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
                match (ta.get(key), tb.get(key)) {
                    (Some(va), Some(vb)) => diff_into(va, vb, sub, out),
                    _ => out.push(sub),
                }
            }
        }
        _ => {
            if a != b {
                out.push(path);
            }
        }
    }
}
