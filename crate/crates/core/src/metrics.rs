//! Exact per-flow measurements and CSV output.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("percentile of an empty sample set")]
    Empty,
    #[error("quantile must be in (0, 1], got {0}")]
    BadQuantile(f64),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The `ceil(q*n)`-th smallest sample.
pub fn exact_percentile<T: Ord + Copy>(samples: &[T], q: f64) -> Result<T, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(MetricsError::BadQuantile(q));
    }
    let mut v = samples.to_vec();
    v.sort_unstable();
    Ok(v[rank(v.len(), q)])
}

/// Same as [`exact_percentile`] for data already sorted ascending.
pub fn sorted_percentile<T: Copy>(sorted: &[T], q: f64) -> Option<T> {
    if sorted.is_empty() {
        return None;
    }
    Some(sorted[rank(sorted.len(), q)])
}

fn rank(n: usize, q: f64) -> usize {
    // nudge so that e.g. 0.99 * 100 does not round up to 100
    let r = (q * n as f64 - 1e-9).ceil() as usize;
    r.clamp(1, n) - 1
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub flow_id: String,
    pub app_id: String,
    pub flow_type: String,
    pub achieved_bandwidth_gbps: f64,
    pub message_rate_mops: f64,
    pub latency_p50_us: Option<f64>,
    pub latency_p99_us: Option<f64>,
    pub sample_count: u64,
    pub cpu_te_fraction: f64,
}

pub const METRICS_COLUMNS: [&str; 9] = [
    "flow_id",
    "app_id",
    "flow_type",
    "achieved_bandwidth_gbps",
    "message_rate_mops",
    "latency_p50_us",
    "latency_p99_us",
    "sample_count",
    "cpu_te_fraction",
];

pub fn write_metrics<W: Write>(out: W, rows: &[MetricsRecord]) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(METRICS_COLUMNS)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeseriesRow {
    pub time_us: f64,
    pub safe_util_gbps: f64,
    pub current99_us: Option<f64>,
    pub mode: String,
    pub bandwidth_gbps: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Timeseries {
    pub flow_ids: Vec<String>,
    pub rows: Vec<TimeseriesRow>,
}

impl Timeseries {
    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["time_us", "safe_util_gbps", "current99_us", "mode"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend(self.flow_ids.iter().cloned());
        h
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header())?;
        for r in &self.rows {
            let mut rec = vec![
                format!("{}", r.time_us),
                format!("{:.6}", r.safe_util_gbps),
                r.current99_us.map(|v| format!("{v:.3}")).unwrap_or_default(),
                r.mode.clone(),
            ];
            rec.extend(r.bandwidth_gbps.iter().map(|b| format!("{b:.6}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}
