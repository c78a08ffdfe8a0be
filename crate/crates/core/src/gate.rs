//! Confidence gate deciding whether a Stage-1 prediction is kept or the
//! sample is re-run with restricted visual context.

use serde::{Deserialize, Serialize};

use crate::dump::{DecodeTrace, FrameInterval};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateThresholds {
    pub theta_dec: f64,
    pub theta_attn: f64,
}

impl GateThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("theta_dec", self.theta_dec), ("theta_attn", self.theta_attn)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(name, format!("must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    AcceptStage1,
    RunStage2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateReason {
    DecConfident,
    AttnConfident,
    BothLow,
    NoDecodeTraceAndAttnLow,
    DetectionFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub c_dec: Option<f64>,
    pub c_attn: f64,
    pub verdict: Verdict,
    pub reason: GateReason,
}

/// Geometric mean of the numeric-token probabilities.
pub fn decode_confidence(trace: &DecodeTrace) -> Result<f64> {
    trace.validate()?;
    let n = trace.numeric_token_probs.len() as f64;
    let mean_log = trace.numeric_token_probs.iter().map(|p| p.ln()).sum::<f64>() / n;
    Ok(mean_log.exp())
}

/// Max of the curve inside the Stage-1 frames over its global max; 0 when
/// the curve is identically zero.
pub fn attention_confidence(curve: &[f64], stage1_frames: FrameInterval) -> f64 {
    let global = curve.iter().copied().fold(0.0, f64::max);
    if global <= 0.0 {
        return 0.0;
    }
    let first = stage1_frames.first.max(1) - 1;
    let last = stage1_frames.last.min(curve.len());
    let local = curve[first..last].iter().copied().fold(0.0, f64::max);
    (local / global).clamp(0.0, 1.0)
}

/// Accepts when either confidence reaches its threshold. The decode test
/// takes precedence in `reason`; a missing decode trace fails it.
pub fn decide(c_dec: Option<f64>, c_attn: f64, thresholds: &GateThresholds) -> GateDecision {
    let (verdict, reason) = match c_dec {
        Some(c) if c >= thresholds.theta_dec => (Verdict::AcceptStage1, GateReason::DecConfident),
        _ if c_attn >= thresholds.theta_attn => (Verdict::AcceptStage1, GateReason::AttnConfident),
        Some(_) => (Verdict::RunStage2, GateReason::BothLow),
        None => (Verdict::RunStage2, GateReason::NoDecodeTraceAndAttnLow),
    };
    GateDecision { c_dec, c_attn, verdict, reason }
}

/// Gate outcome when no interval could be detected. Without attention
/// evidence there is nothing to guide Stage 2, so Stage 1 is kept.
pub fn decide_without_detection(c_dec: Option<f64>, thresholds: &GateThresholds) -> GateDecision {
    let d = decide(c_dec, 0.0, thresholds);
    if d.verdict == Verdict::AcceptStage1 {
        d
    } else {
        GateDecision {
            verdict: Verdict::AcceptStage1,
            reason: GateReason::DetectionFailed,
            ..d
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBucket {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_iou: Option<f64>,
}

/// Groups `(confidence, iou)` records into `[e_k, e_{k+1})` buckets (the last
/// one closed) and reports the count and mean IoU of each.
pub fn bucket_by_confidence(records: &[(f64, f64)], edges: &[f64]) -> Result<Vec<ConfidenceBucket>> {
    if edges.len() < 2 {
        return Err(Error::validation("bucket_edges", "need at least two edges"));
    }
    if edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::validation("bucket_edges", "edges must be strictly increasing"));
    }
    if edges[0] > 0.0 || edges[edges.len() - 1] < 1.0 {
        return Err(Error::validation("bucket_edges", "edges must cover [0, 1]"));
    }
    let n_buckets = edges.len() - 1;
    let mut sums = vec![0.0; n_buckets];
    let mut counts = vec![0usize; n_buckets];
    for &(c, iou) in records {
        if !(edges[0] <= c && c <= edges[n_buckets]) {
            return Err(Error::validation("confidence", format!("{c} outside the bucket range")));
        }
        let k = edges[1..].partition_point(|&e| e <= c).min(n_buckets - 1);
        sums[k] += iou;
        counts[k] += 1;
    }
    Ok((0..n_buckets)
        .map(|k| ConfidenceBucket {
            lower: edges[k],
            upper: edges[k + 1],
            count: counts[k],
            mean_iou: (counts[k] > 0).then(|| sums[k] / counts[k] as f64),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn trace(p: &[f64]) -> DecodeTrace {
        DecodeTrace { numeric_token_probs: p.to_vec() }
    }

    const DEFAULT: GateThresholds = GateThresholds { theta_dec: 0.9, theta_attn: 0.9 };

    #[test]
    fn decode_confidence_examples() {
        assert_relative_eq!(decode_confidence(&trace(&[0.9, 0.9])).unwrap(), 0.9, max_relative = 1e-12);
        assert_eq!(decode_confidence(&trace(&[1.0, 1.0, 1.0])).unwrap(), 1.0);
        assert_relative_eq!(decode_confidence(&trace(&[0.5, 0.08])).unwrap(), 0.2, max_relative = 1e-12);
        assert!(decode_confidence(&trace(&[])).is_err());
        assert!(decode_confidence(&trace(&[0.0])).is_err());
    }

    #[test]
    fn attention_confidence_examples() {
        let c = [0.2, 1.0, 0.4];
        assert_eq!(attention_confidence(&c, FrameInterval { first: 1, last: 2 }), 1.0);
        assert_eq!(attention_confidence(&[0.0; 3], FrameInterval { first: 1, last: 3 }), 0.0);
        assert_relative_eq!(attention_confidence(&c, FrameInterval { first: 3, last: 3 }), 0.4);
    }

    #[test]
    fn decide_examples() {
        let d = decide(Some(0.95), 0.0, &DEFAULT);
        assert_eq!((d.verdict, d.reason), (Verdict::AcceptStage1, GateReason::DecConfident));
        let d = decide(Some(0.5), 0.3, &DEFAULT);
        assert_eq!((d.verdict, d.reason), (Verdict::RunStage2, GateReason::BothLow));
        let d = decide(None, 1.0, &DEFAULT);
        assert_eq!((d.verdict, d.reason), (Verdict::AcceptStage1, GateReason::AttnConfident));
        let d = decide(None, 0.2, &DEFAULT);
        assert_eq!((d.verdict, d.reason), (Verdict::RunStage2, GateReason::NoDecodeTraceAndAttnLow));
        // both pass: decode wins
        let d = decide(Some(0.99), 1.0, &DEFAULT);
        assert_eq!(d.reason, GateReason::DecConfident);
        // threshold is inclusive
        let strict = GateThresholds { theta_dec: 0.8, theta_attn: 1.0 };
        assert_eq!(decide(Some(0.1), 1.0, &strict).verdict, Verdict::AcceptStage1);
    }

    #[test]
    fn detection_failure_keeps_stage1() {
        let d = decide_without_detection(Some(0.1), &DEFAULT);
        assert_eq!((d.verdict, d.reason, d.c_attn), (Verdict::AcceptStage1, GateReason::DetectionFailed, 0.0));
        let d = decide_without_detection(Some(0.95), &DEFAULT);
        assert_eq!(d.reason, GateReason::DecConfident);
    }

    #[test]
    fn buckets() {
        let b = bucket_by_confidence(&[(0.95, 0.8)], &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(b[0].count, 0);
        assert_eq!(b[0].mean_iou, None);
        assert_eq!((b[1].count, b[1].mean_iou), (1, Some(0.8)));

        let b = bucket_by_confidence(&[(0.1, 0.2), (0.2, 0.4), (0.3, 0.9)], &[0.0, 0.5, 1.0]).unwrap();
        assert_relative_eq!(b[0].mean_iou.unwrap(), 0.5);

        let b = bucket_by_confidence(&[(0.5, 1.0), (1.0, 0.5)], &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!((b[0].count, b[1].count), (0, 2));

        assert!(bucket_by_confidence(&[], &[0.0, 0.7, 0.5, 1.0]).is_err());
        assert!(bucket_by_confidence(&[], &[0.1, 1.0]).is_err());
    }
}
