use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{auc, log_loss, rel_impr};
use crate::error::{Error, Result};
use crate::pipeline::Scored;

/// The scored system every relative improvement is computed for.
pub const PRIMARY: &str = "plora";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub log_loss: f64,
    /// Percent AUC change against each named baseline.
    pub rel_impr: BTreeMap<String, f64>,
    pub n: usize,
    /// Seconds per phase. Left out unless asked for, so that reruns stay
    /// byte-identical.
    pub wall_clock: Option<BTreeMap<String, f64>>,
}

impl MetricsReport {
    pub fn new(scored: &Scored) -> Result<Self> {
        Ok(Self {
            auc: auc(&scored.labels, &scored.scores)?,
            log_loss: log_loss(&scored.labels, &scored.scores)?,
            rel_impr: BTreeMap::new(),
            n: scored.labels.len(),
            wall_clock: None,
        })
    }
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub config_sha256: String,
    #[serde(flatten)]
    pub primary: MetricsReport,
    pub baselines: BTreeMap<String, MetricsReport>,
}

impl MetricsFile {
    /// Reports for every system in `scores`; [`PRIMARY`] must be present and
    /// gets a relative improvement against each of the others.
    pub fn from_scores(config_sha256: &str, scores: &BTreeMap<&str, Scored>) -> Result<Self> {
        let primary = scores
            .get(PRIMARY)
            .ok_or_else(|| Error::State(format!("no `{PRIMARY}` scores to report")))?;
        let mut primary = MetricsReport::new(primary)?;
        let mut baselines = BTreeMap::new();
        for (name, s) in scores.iter().filter(|(n, _)| **n != PRIMARY) {
            let r = MetricsReport::new(s)?;
            primary.rel_impr.insert(name.to_string(), rel_impr(primary.auc, r.auc)?);
            baselines.insert(name.to_string(), r);
        }
        Ok(Self {
            config_sha256: config_sha256.to_string(),
            primary,
            baselines,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("metrics.json: {e}")))
    }
}

/// One point of an N_m sweep or a sample-efficiency curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: usize,
    pub auc: f64,
    pub variant: String,
    pub seed: u64,
    #[serde(skip)]
    pub config_sha256: String,
}

/// CSV with header `x,auc,variant,seed`.
pub fn curve_csv(points: &[CurvePoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in points {
        w.serialize(p).map_err(|e| Error::Format(format!("curve csv: {e}")))?;
    }
    if points.is_empty() {
        w.write_record(["x", "auc", "variant", "seed"])
            .map_err(|e| Error::Format(format!("curve csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("curve csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
