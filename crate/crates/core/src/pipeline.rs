//! Batch plumbing around the numerical core: per-sample Stage-1 analysis
//! records, merging Stage-2 outputs back into final predictions, and
//! scoring against ground truth. All record types are JSON-lines friendly.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, Stage2Variant};
use crate::dump::{AttentionDump, FrameInterval, TimeInterval, Timeline};
use crate::error::{Error, Result};
use crate::eval::{aggregate, iou, EvalRecord, PredictionStage, Summary};
use crate::gate::{
    attention_confidence, bucket_by_confidence, decide, decide_without_detection, decode_confidence,
    ConfidenceBucket, GateDecision, Verdict,
};
use crate::interval::{detect_interval, frames_to_time, time_to_frames};
use crate::reinference::{build_soft_mask, plan_hard_crop, visible_span, CropPlan};
use crate::relevance::{compute_relevance_traced, RelevanceCurve, RelevanceTrace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    /// 1-based frame of the first maximum.
    pub argmax_frame: Option<usize>,
    pub max_value: f64,
    pub total_mass: f64,
}

impl CurveSummary {
    pub fn of(curve: &RelevanceCurve) -> Self {
        Self { argmax_frame: curve.argmax(), max_value: curve.max(), total_mass: curve.sum() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectedInterval {
    pub frames: FrameInterval,
    pub seconds: TimeInterval,
}

/// Outcome of Stage 1 for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOneRecord {
    pub sample_id: String,
    pub num_frames: usize,
    pub duration_s: f64,
    /// Absent when the relevance curve could not be formed.
    #[serde(default)]
    pub curve: Option<CurveSummary>,
    #[serde(default)]
    pub detected: Option<DetectedInterval>,
    pub gate: GateDecision,
    #[serde(default)]
    pub stage1_prediction: Option<TimeInterval>,
    /// Set only when the gate routes the sample to Stage 2.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2_variant: Option<Stage2Variant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_plan: Option<CropPlan>,
    /// MaskSpec in its wire format.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visible_span: Option<TimeInterval>,
}

impl StageOneRecord {
    pub fn timeline(&self) -> Result<Timeline> {
        Timeline::new(self.duration_s, self.num_frames)
    }

    pub fn routed(&self) -> bool {
        self.gate.verdict == Verdict::RunStage2
    }
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub record: StageOneRecord,
    /// Intermediate curves, when relevance could be computed.
    pub trace: Option<RelevanceTrace>,
}

/// Stage-1 analysis of a positive/zero-video pair: relevance, interval
/// detection, gating and, for routed samples, the Stage-2 plan.
///
/// A degenerate head curve or an all-zero fused curve is not an error here:
/// the sample is kept at Stage 1 with reason `detection_failed`. Pairing
/// and validation problems are returned as errors.
pub fn analyze_pair(positive: &AttentionDump, zero: &AttentionDump, config: &PipelineConfig) -> Result<Analysis> {
    config.validate()?;
    positive.validate()?;
    zero.validate()?;
    let timeline = positive.timeline;
    let thresholds = config.thresholds();
    let c_dec = positive.decode.as_ref().map(decode_confidence).transpose()?;

    let trace = match compute_relevance_traced(positive, zero, config) {
        Ok(t) => Some(t),
        Err(Error::DegenerateSignal(msg)) => {
            log::warn!("{}: no attention evidence ({msg})", positive.sample_id);
            None
        }
        Err(e) => return Err(e),
    };
    let detected = match &trace {
        Some(t) => match detect_interval(&t.fused, &timeline, &config.interval_params()) {
            Ok(frames) => Some(DetectedInterval { frames, seconds: frames_to_time(frames, &timeline) }),
            Err(Error::DetectionFailed) => None,
            Err(e) => return Err(e),
        },
        None => None,
    };

    let gate = match (&trace, detected) {
        (Some(t), Some(_)) => {
            let c_attn = positive
                .stage1_prediction
                .map_or(0.0, |p| attention_confidence(t.fused.values(), time_to_frames(p, &timeline)));
            decide(c_dec, c_attn, &thresholds)
        }
        _ => decide_without_detection(c_dec, &thresholds),
    };

    let mut record = StageOneRecord {
        sample_id: positive.sample_id.clone(),
        num_frames: timeline.num_frames(),
        duration_s: timeline.duration_s(),
        curve: trace.as_ref().map(|t| CurveSummary::of(&t.fused)),
        detected,
        gate,
        stage1_prediction: positive.stage1_prediction,
        stage2_variant: None,
        crop_plan: None,
        mask: None,
        visible_span: None,
    };
    if let (Verdict::RunStage2, Some(d)) = (gate.verdict, detected) {
        record.stage2_variant = Some(config.stage2_variant);
        match config.stage2_variant {
            Stage2Variant::HardCrop => record.crop_plan = Some(plan_hard_crop(d.frames, &timeline)),
            Stage2Variant::SoftMask => {
                record.mask = Some(build_soft_mask(d.frames, &positive.frame_map).to_json());
                record.visible_span = Some(visible_span(d.frames, &timeline));
            }
        }
    }
    Ok(Analysis { record, trace })
}

/// Stage-2 output for one routed sample. For hard crop the interval is
/// clip-local; for soft mask it is already on the full timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalPrediction {
    pub sample_id: String,
    pub prediction: TimeInterval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalPrediction {
    pub sample_id: String,
    pub prediction: TimeInterval,
    #[serde(default)]
    pub stage: PredictionStage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateDecision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage1_prediction: Option<TimeInterval>,
}

/// Combines Stage-1 records with Stage-2 outputs. Accepted samples keep
/// their Stage-1 prediction; hard-crop outputs are remapped onto the full
/// timeline; soft-mask outputs are copied as-is.
pub fn merge_predictions(records: &[StageOneRecord], locals: &[LocalPrediction]) -> Result<Vec<FinalPrediction>> {
    let mut by_id: HashMap<&str, TimeInterval> = HashMap::with_capacity(locals.len());
    for l in locals {
        if by_id.insert(l.sample_id.as_str(), l.prediction).is_some() {
            return Err(Error::validation("local_predictions", format!("duplicate sample id `{}`", l.sample_id)));
        }
    }
    let missing: Vec<String> = records
        .iter()
        .filter(|r| r.routed() && !by_id.contains_key(r.sample_id.as_str()))
        .map(|r| r.sample_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }

    records
        .iter()
        .map(|r| {
            let (prediction, stage) = if r.routed() {
                let local = by_id[r.sample_id.as_str()];
                let p = match (r.stage2_variant, &r.crop_plan) {
                    (Some(Stage2Variant::HardCrop), Some(plan)) => {
                        crate::reinference::remap_local_prediction(local, plan, &r.timeline()?)
                    }
                    (Some(Stage2Variant::HardCrop), None) => {
                        return Err(Error::validation(
                            "crop_plan",
                            format!("`{}` routed to hard crop without a crop plan", r.sample_id),
                        ))
                    }
                    _ => local,
                };
                (p, PredictionStage::Stage2)
            } else {
                let p = r.stage1_prediction.ok_or_else(|| {
                    Error::validation(
                        "stage1_prediction",
                        format!("`{}` kept at Stage 1 but has no Stage-1 prediction", r.sample_id),
                    )
                })?;
                (p, PredictionStage::Stage1)
            };
            Ok(FinalPrediction {
                sample_id: r.sample_id.clone(),
                prediction,
                stage,
                gate: Some(r.gate),
                stage1_prediction: r.stage1_prediction,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub sample_id: String,
    pub ground_truth: TimeInterval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub c_dec: Vec<ConfidenceBucket>,
    pub c_attn: Vec<ConfidenceBucket>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    #[serde(flatten)]
    pub summary: Summary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buckets: Option<BucketReport>,
}

/// Pairs predictions with ground truth by sample id. Both sides must cover
/// exactly the same ids.
pub fn pair_with_ground_truth(predictions: &[FinalPrediction], truth: &[GroundTruth]) -> Result<Vec<EvalRecord>> {
    let mut gt: BTreeMap<&str, TimeInterval> = BTreeMap::new();
    for g in truth {
        if gt.insert(g.sample_id.as_str(), g.ground_truth).is_some() {
            return Err(Error::validation("ground_truth", format!("duplicate sample id `{}`", g.sample_id)));
        }
    }
    let mut seen = HashSet::with_capacity(predictions.len());
    let mut unmatched = Vec::new();
    for p in predictions {
        if !seen.insert(p.sample_id.as_str()) {
            return Err(Error::validation("predictions", format!("duplicate sample id `{}`", p.sample_id)));
        }
        if !gt.contains_key(p.sample_id.as_str()) {
            unmatched.push(p.sample_id.clone());
        }
    }
    let no_prediction: Vec<&str> = gt.keys().copied().filter(|id| !seen.contains(id)).collect();
    if !unmatched.is_empty() || !no_prediction.is_empty() || predictions.is_empty() {
        let preview = |ids: Vec<&str>| {
            let n = ids.len();
            let mut s = ids.into_iter().take(5).collect::<Vec<_>>().join(", ");
            if n > 5 {
                s.push_str(&format!(" (+{} more)", n - 5));
            }
            s
        };
        return Err(Error::IdMismatch(format!(
            "{} prediction(s) without ground truth [{}]; {} ground truth record(s) without prediction [{}]",
            unmatched.len(),
            preview(unmatched.iter().map(String::as_str).collect()),
            no_prediction.len(),
            preview(no_prediction.clone()),
        )));
    }
    Ok(predictions
        .iter()
        .map(|p| EvalRecord::new(p.sample_id.clone(), p.prediction, gt[p.sample_id.as_str()], p.stage, p.gate))
        .collect())
}

/// Metrics over matched predictions. With `bucket_edges`, also buckets
/// Stage-1 IoU by decode and attention confidence for predictions that
/// carry a gate decision and a Stage-1 prediction.
pub fn score(
    predictions: &[FinalPrediction],
    truth: &[GroundTruth],
    thresholds: &[f64],
    bucket_edges: Option<&[f64]>,
) -> Result<ScoreReport> {
    let records = pair_with_ground_truth(predictions, truth)?;
    let summary = aggregate(&records, thresholds)?;
    let buckets = match bucket_edges {
        None => None,
        Some(edges) => {
            let mut dec = Vec::new();
            let mut attn = Vec::new();
            for (p, r) in predictions.iter().zip(&records) {
                if let (Some(g), Some(s1)) = (p.gate, p.stage1_prediction) {
                    let v = iou(s1, r.ground_truth);
                    if let Some(c) = g.c_dec {
                        dec.push((c, v));
                    }
                    attn.push((g.c_attn, v));
                }
            }
            Some(BucketReport {
                c_dec: bucket_by_confidence(&dec, edges)?,
                c_attn: bucket_by_confidence(&attn, edges)?,
            })
        }
    };
    Ok(ScoreReport { summary, buckets })
}

/// Reads JSON lines, skipping blank lines. Errors name the 1-based line.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(reader: R, what: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line)
            .map_err(|e| Error::validation(what, format!("line {}: {e}", n + 1)))?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(mut out: W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
