//! Named time series and scalar summaries collected during a run.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::time::SimTime;

/// One named series of `(time, value)` samples.
///
/// Sample times are nondecreasing; several samples may share the same
/// instant when they are produced by one event batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSeries {
    pub name: String,
    pub samples: Vec<(SimTime, f64)>,
}

/// Registry of metric series, in registration order.
#[derive(Debug, Clone, Default)]
pub struct MetricsHub {
    series: Vec<MetricSeries>,
    index: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown metric `{0}`")]
pub struct UnknownMetric(pub String);

impl MetricsHub {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a series; re-registering an existing name is a no-op.
    pub fn register(&mut self, name: &str) {
        if !self.index.contains_key(name) {
            self.index.insert(name.to_string(), self.series.len());
            self.series.push(MetricSeries { name: name.to_string(), samples: Vec::new() });
        }
    }

    pub fn sample(&mut self, name: &str, at: SimTime, value: f64) -> Result<(), UnknownMetric> {
        let idx = *self.index.get(name).ok_or_else(|| UnknownMetric(name.to_string()))?;
        let series = &mut self.series[idx];
        if let Some((last, _)) = series.samples.last() {
            assert!(*last <= at, "metric `{name}` sampled at {at} after {last}");
        }
        series.samples.push((at, value));
        Ok(())
    }

    pub fn series(&self) -> &[MetricSeries] {
        &self.series
    }
}

/// Everything measured in one run: the full series plus scalar summaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReport {
    pub clock_ms: u64,
    pub series: Vec<MetricSeries>,
    pub scalars: BTreeMap<String, f64>,
}

impl SimReport {
    /// Writes the series as CSV with header `time_ms,metric,value`, grouped
    /// by series in registration order. Byte-stable for identical runs.
    pub fn write_metrics_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "time_ms,metric,value")?;
        for series in &self.series {
            for (t, v) in &series.samples {
                writeln!(w, "{},{},{}", t.as_ms(), series.name, v)?;
            }
        }
        Ok(())
    }
}
