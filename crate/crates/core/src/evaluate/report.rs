use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Metrics for one checkpoint or run, with optional per-group breakdowns
/// (language, domain) and the seeds they were averaged over.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub breakdown: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

impl EvalReport {
    pub fn new(checkpoint: impl Into<String>) -> Self {
        EvalReport { checkpoint: checkpoint.into(), ..Default::default() }
    }

    pub fn set(&mut self, metric: &str, value: f64) -> Result<()> {
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::validation(format!("metric {metric} = {value} is not a finite non-negative value")));
        }
        self.metrics.insert(metric.to_string(), value);
        Ok(())
    }

    /// Flat `checkpoint  group  metric  value` rows; the pooled group is `all`.
    pub fn to_tsv_rows(&self) -> String {
        let mut s = String::new();
        for (m, v) in &self.metrics {
            writeln!(s, "{}\tall\t{m}\t{v}", self.checkpoint).unwrap();
        }
        for (g, ms) in &self.breakdown {
            for (m, v) in ms {
                writeln!(s, "{}\t{g}\t{m}\t{v}", self.checkpoint).unwrap();
            }
        }
        s
    }
}

pub const TSV_HEADER: &str = "checkpoint\tgroup\tmetric\tvalue\n";

/// Relative change of an error-like metric in percent; negative means the
/// candidate has the lower (better) value.
pub fn relative_delta(candidate: f64, baseline: f64) -> Option<f64> {
    if baseline == 0.0 {
        None
    } else {
        Some(100.0 * (candidate - baseline) / baseline)
    }
}

/// Text table of relative deltas for every metric both reports share.
pub fn delta_table(baseline: &EvalReport, candidates: &[&EvalReport]) -> String {
    let mut s = String::new();
    writeln!(s, "candidate\tbaseline\tmetric\tbaseline_value\tcandidate_value\trelative_delta_pct").unwrap();
    for c in candidates {
        for (m, bv) in &baseline.metrics {
            if let Some(cv) = c.metrics.get(m) {
                let d = relative_delta(*cv, *bv).map_or("n/a".to_string(), |d| format!("{d:+.2}"));
                writeln!(s, "{}\t{}\t{m}\t{bv:.6}\t{cv:.6}\t{d}", c.checkpoint, baseline.checkpoint).unwrap();
            }
        }
    }
    s
}
