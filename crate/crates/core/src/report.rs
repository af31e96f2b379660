//! Run reports and their aggregation.
//!
//! A [`RunReport`] captures everything one optimizer run produced: the
//! learned parameters, safeness bookkeeping, metrics and the configuration
//! echo. Reports serialize to JSON with a stable field order; the canonical
//! form zeroes the wall clock, which is the only field allowed to differ
//! between identical reruns.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::types::LabelTransition;

/// Serializable dump of a label transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionDump {
    Classification(Vec<Vec<f64>>),
    Regression(Vec<f64>),
}

impl From<&LabelTransition> for TransitionDump {
    fn from(t: &LabelTransition) -> Self {
        match t {
            LabelTransition::Classification(q) => {
                TransitionDump::Classification(q.rows().into_iter().map(|r| r.to_vec()).collect())
            }
            LabelTransition::Regression(q) => TransitionDump::Regression(q.to_vec()),
        }
    }
}

/// Optimizer-side diagnostics attached to a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Upper objective before each outer step, plus the final value.
    pub objective_trace: Vec<f64>,
    /// Stationarity residual of the final retrained model.
    pub final_kkt_residual: f64,
    /// True when Hessian-vector products were finite-difference approximations.
    pub hvp_approximate: bool,
    pub upper_iters_run: usize,
}

/// Full record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub seed: u64,
    pub weights: Vec<f64>,
    pub transition: TransitionDump,
    pub theta: Vec<f64>,
    /// Baseline validation losses per ensemble member (the safeness references).
    pub member_losses_before: Vec<f64>,
    /// Validation losses of the final model per ensemble member.
    pub member_losses_after: Vec<f64>,
    /// after minus before, per member.
    pub safeness_gaps: Vec<f64>,
    /// True when any final gap exceeds the safety slack.
    pub unsafe_run: bool,
    pub test_metrics: BTreeMap<String, f64>,
    pub baseline_metrics: BTreeMap<String, f64>,
    pub diagnostics: Diagnostics,
    pub wall_clock_secs: f64,
    pub config_echo: serde_json::Value,
}

impl RunReport {
    /// Pretty JSON of the full report.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Deterministic form: identical reruns must produce identical bytes, so
    /// the wall clock is zeroed here and only here.
    pub fn canonical_json(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.wall_clock_secs = 0.0;
        Ok(serde_json::to_string_pretty(&canonical)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// 64-bit FNV-1a over arbitrary bytes; used to name run directories.
pub fn fnv1a_hash(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// One aggregated (method, metric) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

/// Group reports by method, aggregate every test metric as mean and sample
/// standard deviation (0 for a single run). Rows come out sorted by
/// (method, metric) so output is deterministic.
pub fn aggregate(reports: &[RunReport]) -> Vec<AggregateRow> {
    let mut cells: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for report in reports {
        for (metric, &value) in &report.test_metrics {
            cells
                .entry((report.method.clone(), metric.clone()))
                .or_default()
                .push(value);
        }
    }
    cells
        .into_iter()
        .map(|((method, metric), values)| {
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            AggregateRow {
                method,
                metric,
                mean,
                std,
                runs: n,
            }
        })
        .collect()
}

/// Render aggregate rows as CSV with a header.
pub fn aggregate_to_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from("method,metric,mean,std,runs\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.method, row.metric, row.mean, row.std, row.runs
        ));
    }
    out
}

/// Render aggregate rows as an aligned text table.
pub fn aggregate_to_table(rows: &[AggregateRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<18} {:<16} {:>12} {:>12} {:>6}\n",
        "method", "metric", "mean", "std", "runs"
    ));
    for row in rows {
        out.push_str(&format!(
            "{:<18} {:<16} {:>12.6} {:>12.6} {:>6}\n",
            row.method, row.metric, row.mean, row.std, row.runs
        ));
    }
    out
}
