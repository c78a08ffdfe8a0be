//! Temporal grounding metrics: IoU, R1@θ and mIoU, all reported in
//! percentage points.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dump::TimeInterval;
use crate::error::{Error, Result};
use crate::gate::GateDecision;

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// Intersection over union of two intervals. Two identical zero-length
/// intervals score 1; any other zero-length union scores 0.
pub fn iou(a: TimeInterval, b: TimeInterval) -> f64 {
    let inter = (a.end_s.min(b.end_s) - a.start_s.max(b.start_s)).max(0.0);
    let union = a.length() + b.length() - inter;
    if union <= 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionStage {
    #[default]
    Stage1,
    Stage2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub prediction: TimeInterval,
    pub ground_truth: TimeInterval,
    pub iou: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateDecision>,
    pub stage: PredictionStage,
}

impl EvalRecord {
    pub fn new(
        sample_id: impl Into<String>,
        prediction: TimeInterval,
        ground_truth: TimeInterval,
        stage: PredictionStage,
        gate: Option<GateDecision>,
    ) -> Self {
        Self {
            sample_id: sample_id.into(),
            iou: iou(prediction, ground_truth),
            prediction,
            ground_truth,
            gate,
            stage,
        }
    }
}

/// Dataset-level metrics. `r1_at` maps each threshold (formatted as in
/// the input, e.g. `"0.5"`) to a percentage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub r1_at: BTreeMap<String, f64>,
    pub miou: f64,
    pub count: usize,
}

pub fn threshold_key(theta: f64) -> String {
    format!("{theta}")
}

pub fn aggregate_ious(ious: &[f64], thresholds: &[f64]) -> Result<Summary> {
    if ious.is_empty() {
        return Err(Error::validation("records", "cannot aggregate zero records"));
    }
    let n = ious.len() as f64;
    let r1_at = thresholds
        .iter()
        .map(|&theta| {
            let hits = ious.iter().filter(|&&v| v >= theta).count();
            (threshold_key(theta), 100.0 * hits as f64 / n)
        })
        .collect();
    let miou = 100.0 * ious.iter().sum::<f64>() / n;
    Ok(Summary { r1_at, miou, count: ious.len() })
}

pub fn aggregate(records: &[EvalRecord], thresholds: &[f64]) -> Result<Summary> {
    let ious: Vec<f64> = records.iter().map(|r| r.iou).collect();
    aggregate_ious(&ious, thresholds)
}

/// Signed per-metric change from `baseline` to `improved`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub r1_at: BTreeMap<String, f64>,
    pub miou: f64,
}

impl DeltaReport {
    /// Deltas rounded to one decimal, the precision of published tables.
    pub fn rounded(&self) -> Self {
        let r = |v: f64| (v * 10.0).round() / 10.0;
        Self {
            r1_at: self.r1_at.iter().map(|(k, v)| (k.clone(), r(*v))).collect(),
            miou: r(self.miou),
        }
    }
}

pub fn delta_report(baseline: &Summary, improved: &Summary) -> Result<DeltaReport> {
    if baseline.r1_at.keys().ne(improved.r1_at.keys()) {
        return Err(Error::validation("thresholds", "summaries were computed at different thresholds"));
    }
    let r1_at = baseline
        .r1_at
        .iter()
        .map(|(k, b)| (k.clone(), improved.r1_at[k] - b))
        .collect();
    Ok(DeltaReport { r1_at, miou: improved.miou - baseline.miou })
}
