//! Frame-level relevance curves from query-to-video attention.
//!
//! Per head: token→frame averaging, entropy-weighted aggregation over query
//! tokens, Gaussian smoothing with L1 normalization, and a positive log-ratio
//! against the zero-video reference. Heads are then fused by a plain mean.
//! All arithmetic is done in `f64`.

use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::dump::{AttentionDump, DumpKind, FrameTokenMap, HeadAttention, HeadId, Timeline};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveStage {
    PerToken,
    Aggregated,
    SmoothedNormalized,
    DebiasedPerHead,
    Fused,
}

impl CurveStage {
    pub fn as_str(self) -> &'static str {
        match self {
            CurveStage::PerToken => "per_token",
            CurveStage::Aggregated => "aggregated",
            CurveStage::SmoothedNormalized => "smoothed_normalized",
            CurveStage::DebiasedPerHead => "debiased_per_head",
            CurveStage::Fused => "fused",
        }
    }
}

/// A length-T per-frame score vector tagged with the stage that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceCurve {
    values: Vec<f64>,
    pub stage: CurveStage,
    pub head: Option<HeadId>,
}

impl RelevanceCurve {
    pub fn new(values: Vec<f64>, stage: CurveStage, head: Option<HeadId>) -> Self {
        Self { values, stage, head }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// 1-based frame of the first maximum, `None` for an empty curve.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in self.values.iter().enumerate() {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        best.map(|(i, _)| i + 1)
    }
}

/// Per-query-token entropies and the weights `exp(-H_i / tau)` derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyWeights {
    weights: Vec<f64>,
    entropies: Vec<f64>,
    temperature: f64,
}

impl EntropyWeights {
    pub fn from_entropies(entropies: Vec<f64>, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::validation("temperature", format!("must be > 0, got {temperature}")));
        }
        if let Some(h) = entropies.iter().find(|h| !(**h >= 0.0 && h.is_finite())) {
            return Err(Error::validation("entropies", format!("invalid entropy {h}")));
        }
        let weights = entropies.iter().map(|h| (-h / temperature).exp()).collect();
        Ok(Self { weights, entropies, temperature })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn entropies(&self) -> &[f64] {
        &self.entropies
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Weights divided by the largest weight. Mathematically the same
    /// normalized mixture, but immune to underflow of `exp(-H/tau)` for long
    /// videos and small temperatures.
    fn relative(&self) -> Vec<f64> {
        let h_min = self.entropies.iter().copied().fold(f64::INFINITY, f64::min);
        self.entropies
            .iter()
            .map(|h| (-(h - h_min) / self.temperature).exp())
            .collect()
    }
}

/// Averages each query row over every frame's token block, giving M
/// per-token curves of length T.
pub fn token_frame_curves(head: &HeadAttention, frame_map: &FrameTokenMap) -> Result<Vec<RelevanceCurve>> {
    frame_map.validate()?;
    if head.cols() != frame_map.num_video_tokens() {
        return Err(Error::validation(
            "heads",
            format!(
                "head {} has {} columns but the frame map covers {} video tokens",
                head.head,
                head.cols(),
                frame_map.num_video_tokens()
            ),
        ));
    }
    let offsets = frame_map.offsets();
    let curves = (0..head.rows())
        .map(|i| {
            let row = head.row(i);
            let values = offsets
                .windows(2)
                .map(|w| {
                    let block = &row[w[0]..w[1]];
                    block.iter().map(|&v| f64::from(v)).sum::<f64>() / block.len() as f64
                })
                .collect();
            RelevanceCurve::new(values, CurveStage::PerToken, Some(head.head))
        })
        .collect();
    Ok(curves)
}

/// Shannon entropy (nats) of a non-negative vector after L1 normalization,
/// with `0 ln 0 = 0`. An all-zero vector gets the maximal entropy `ln T`.
pub fn normalized_entropy(values: &[f64]) -> f64 {
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return (values.len() as f64).ln();
    }
    -values
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| {
            let p = v / total;
            p * p.ln()
        })
        .sum::<f64>()
}

pub fn entropy_weights(curves: &[RelevanceCurve], temperature: f64) -> Result<EntropyWeights> {
    if let Some(c) = curves.iter().find(|c| c.is_empty()) {
        return Err(Error::validation("curves", format!("curve for head {:?} has T = 0", c.head)));
    }
    let entropies = curves.iter().map(|c| normalized_entropy(c.values())).collect();
    EntropyWeights::from_entropies(entropies, temperature)
}

/// Entropy-weighted mean of the per-token curves.
pub fn aggregate_head(curves: &[RelevanceCurve], weights: &EntropyWeights) -> Result<RelevanceCurve> {
    if curves.is_empty() {
        return Err(Error::validation("curves", "need at least one query token"));
    }
    if weights.len() != curves.len() {
        return Err(Error::validation(
            "weights",
            format!("{} weights for {} curves", weights.len(), curves.len()),
        ));
    }
    let t = curves[0].len();
    if curves.iter().any(|c| c.len() != t) {
        return Err(Error::validation("curves", "per-token curves differ in length"));
    }
    let rel = weights.relative();
    let total: f64 = rel.iter().sum();
    let mut values = vec![0.0; t];
    for (curve, w) in curves.iter().zip(&rel) {
        for (acc, v) in values.iter_mut().zip(curve.values()) {
            *acc += w * v;
        }
    }
    for v in &mut values {
        *v /= total;
    }
    Ok(RelevanceCurve::new(values, CurveStage::Aggregated, curves[0].head))
}

/// Discrete Gaussian kernel with standard deviation `sigma`, truncated at
/// radius `ceil(3 sigma)` and normalized to unit sum. `sigma = 0` gives `[1]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Maps any integer index onto `[0, n)` by half-sample symmetric reflection
/// (`d c b a | a b c d | d c b a`), repeating as often as needed.
pub(crate) fn reflect_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Convolves with [`gaussian_kernel`] under reflective boundaries.
pub fn gaussian_smooth(values: &[f64], sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let n = values.len();
    (0..n as i64)
        .map(|j| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * values[reflect_index(j + k as i64 - radius, n)])
                .sum()
        })
        .collect()
}

/// Gaussian smoothing followed by L1 normalization.
pub fn smooth_normalize(curve: &RelevanceCurve, sigma: f64) -> Result<RelevanceCurve> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::validation("sigma", format!("must be >= 0, got {sigma}")));
    }
    if !curve.values().iter().any(|&v| v > 0.0) {
        return Err(Error::DegenerateSignal(format!(
            "curve for head {:?} has no positive entry",
            curve.head
        )));
    }
    let mut values = gaussian_smooth(curve.values(), sigma);
    let total: f64 = values.iter().sum();
    for v in &mut values {
        *v /= total;
    }
    Ok(RelevanceCurve::new(values, CurveStage::SmoothedNormalized, curve.head))
}

/// Pointwise positive log-ratio `max(a+ ln((a+ + eps) / (a- + eps)), 0)`.
pub fn debias_head(positive: &RelevanceCurve, zero: &RelevanceCurve, epsilon: f64) -> Result<RelevanceCurve> {
    if positive.len() != zero.len() {
        return Err(Error::validation(
            "curves",
            format!("positive curve has {} frames, zero-video curve {}", positive.len(), zero.len()),
        ));
    }
    if !(epsilon > 0.0) {
        return Err(Error::validation("epsilon", "must be > 0"));
    }
    let values = positive
        .values()
        .iter()
        .zip(zero.values())
        .map(|(&p, &z)| (p * ((p + epsilon) / (z + epsilon)).ln()).max(0.0))
        .collect();
    Ok(RelevanceCurve::new(values, CurveStage::DebiasedPerHead, positive.head))
}

/// Pointwise mean over heads.
pub fn fuse_heads(per_head: &[RelevanceCurve]) -> Result<RelevanceCurve> {
    let first = per_head
        .first()
        .ok_or_else(|| Error::validation("per_head", "no head curves to fuse"))?;
    let t = first.len();
    if per_head.iter().any(|c| c.len() != t) {
        return Err(Error::validation("per_head", "head curves differ in length"));
    }
    let k = per_head.len() as f64;
    let values = (0..t)
        .map(|j| per_head.iter().map(|c| c.values()[j]).sum::<f64>() / k)
        .collect();
    Ok(RelevanceCurve::new(values, CurveStage::Fused, None))
}

/// Aggregated curve of one head: token→frame reduction then entropy weighting.
pub fn head_curve(head: &HeadAttention, frame_map: &FrameTokenMap, tau: f64) -> Result<RelevanceCurve> {
    let curves = token_frame_curves(head, frame_map)?;
    let weights = entropy_weights(&curves, tau)?;
    aggregate_head(&curves, &weights)
}

/// Intermediate curves of one head, kept for plotting and diagnostics.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    pub head: HeadId,
    pub positive: RelevanceCurve,
    pub zero: RelevanceCurve,
    pub debiased: RelevanceCurve,
}

#[derive(Debug, Clone)]
pub struct RelevanceTrace {
    pub heads: Vec<HeadTrace>,
    pub fused: RelevanceCurve,
}

/// Checks that two dumps form a positive/zero-video pair and returns the
/// heads to use.
pub fn check_pair(positive: &AttentionDump, zero: &AttentionDump, config: &PipelineConfig) -> Result<Vec<HeadId>> {
    if positive.kind != DumpKind::Positive {
        return Err(Error::Pairing(format!("`{}` is not a positive dump", positive.sample_id)));
    }
    if zero.kind != DumpKind::ZeroVideo {
        return Err(Error::Pairing(format!("`{}` is not a zero-video dump", zero.sample_id)));
    }
    if positive.timeline != zero.timeline {
        return Err(Error::Pairing(format!(
            "timelines differ: {} frames / {} s vs {} frames / {} s",
            positive.timeline.num_frames(),
            positive.timeline.duration_s(),
            zero.timeline.num_frames(),
            zero.timeline.duration_s()
        )));
    }
    if positive.query.len() != zero.query.len() {
        return Err(Error::Pairing(format!(
            "query lengths differ: {} vs {}",
            positive.query.len(),
            zero.query.len()
        )));
    }
    if positive.frame_map.tokens_per_frame != zero.frame_map.tokens_per_frame {
        return Err(Error::Pairing("frame token layouts differ".into()));
    }
    let pos_heads: HashSet<HeadId> = positive.head_ids().into_iter().collect();
    let zero_heads: HashSet<HeadId> = zero.head_ids().into_iter().collect();
    let selected = match &config.tg_heads {
        Some(heads) => heads.clone(),
        None => {
            if pos_heads != zero_heads {
                return Err(Error::Pairing("dumps carry different head sets".into()));
            }
            positive.head_ids()
        }
    };
    for h in &selected {
        if !pos_heads.contains(h) || !zero_heads.contains(h) {
            return Err(Error::Pairing(format!("head {h} missing from the dump pair")));
        }
    }
    Ok(selected)
}

/// Full relevance computation with every intermediate curve retained.
pub fn compute_relevance_traced(
    positive: &AttentionDump,
    zero: &AttentionDump,
    config: &PipelineConfig,
) -> Result<RelevanceTrace> {
    let heads = check_pair(positive, zero, config)?;
    let mut traces = Vec::with_capacity(heads.len());
    for id in heads {
        let pos_head = positive.head(id).expect("checked by check_pair");
        let zero_head = zero.head(id).expect("checked by check_pair");
        let pos = smooth_normalize(&head_curve(pos_head, &positive.frame_map, config.tau)?, config.sigma)?;
        let neg = smooth_normalize(&head_curve(zero_head, &zero.frame_map, config.tau)?, config.sigma)?;
        let debiased = debias_head(&pos, &neg, config.epsilon)?;
        traces.push(HeadTrace { head: id, positive: pos, zero: neg, debiased });
    }
    let per_head: Vec<RelevanceCurve> = traces.iter().map(|t| t.debiased.clone()).collect();
    let fused = fuse_heads(&per_head)?;
    Ok(RelevanceTrace { heads: traces, fused })
}

/// The single debiased frame-level relevance curve of a dump pair.
pub fn compute_relevance(positive: &AttentionDump, zero: &AttentionDump, config: &PipelineConfig) -> Result<RelevanceCurve> {
    Ok(compute_relevance_traced(positive, zero, config)?.fused)
}

/// Writes curves as CSV with columns `frame_index,time_start_s,time_end_s,value,stage`.
/// Per-head stages are labelled `stage[layer,head]`.
pub fn write_curve_csv<W: Write>(mut out: W, timeline: &Timeline, curves: &[&RelevanceCurve]) -> Result<()> {
    writeln!(out, "frame_index,time_start_s,time_end_s,value,stage")?;
    for curve in curves {
        let label = match curve.head {
            Some(h) if curve.stage != CurveStage::Fused => format!("{}[{};{}]", curve.stage.as_str(), h.layer, h.head),
            _ => curve.stage.as_str().to_string(),
        };
        for (i, v) in curve.values().iter().enumerate() {
            let (s, e) = timeline.frame_span(i + 1);
            writeln!(out, "{},{},{},{},{}", i + 1, s, e, v, label)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn curve(v: &[f64]) -> RelevanceCurve {
        RelevanceCurve::new(v.to_vec(), CurveStage::PerToken, None)
    }

    #[test]
    fn token_frame_means() {
        let head = HeadAttention::from_rows(HeadId::new(0, 0), &[vec![0.1, 0.3, 0.0, 0.2], vec![0.0; 4]]).unwrap();
        let map = FrameTokenMap { tokens_per_frame: vec![2, 2], video_span_start: 0, video_span_end: 4 };
        let curves = token_frame_curves(&head, &map).unwrap();
        assert_relative_eq!(curves[0].values()[0], 0.2, epsilon = 1e-7);
        assert_relative_eq!(curves[0].values()[1], 0.1, epsilon = 1e-7);
        assert_eq!(curves[1].values(), &[0.0, 0.0]);

        let single = HeadAttention::from_rows(HeadId::new(0, 0), &[vec![0.7]]).unwrap();
        let map1 = FrameTokenMap { tokens_per_frame: vec![1], video_span_start: 0, video_span_end: 1 };
        assert_eq!(token_frame_curves(&single, &map1).unwrap()[0].values(), &[f64::from(0.7f32)]);
    }

    #[test]
    fn token_frame_dimension_mismatch() {
        let head = HeadAttention::from_rows(HeadId::new(0, 0), &[vec![0.1, 0.3, 0.0]]).unwrap();
        let map = FrameTokenMap { tokens_per_frame: vec![2, 2], video_span_start: 0, video_span_end: 4 };
        assert!(token_frame_curves(&head, &map).is_err());
    }

    #[test]
    fn entropy_weight_examples() {
        let w = entropy_weights(&[curve(&[1.0, 0.0, 0.0, 0.0])], 0.5).unwrap();
        assert_eq!(w.entropies()[0], 0.0);
        assert_eq!(w.weights()[0], 1.0);

        let w = entropy_weights(&[curve(&[0.25; 4])], 0.5).unwrap();
        assert_relative_eq!(w.entropies()[0], 4f64.ln(), max_relative = 1e-12);
        assert_relative_eq!(w.weights()[0], 0.0625, max_relative = 1e-9);

        let w = entropy_weights(&[curve(&[0.5, 0.5, 0.0, 0.0])], 0.5).unwrap();
        assert_relative_eq!(w.weights()[0], 0.25, max_relative = 1e-9);
    }

    #[test]
    fn all_zero_row_gets_max_entropy() {
        let w = entropy_weights(&[curve(&[0.0; 8])], 0.5).unwrap();
        assert_relative_eq!(w.entropies()[0], 8f64.ln());
    }

    #[test]
    fn empty_curve_rejected() {
        assert!(entropy_weights(&[curve(&[])], 0.5).is_err());
        assert!(entropy_weights(&[curve(&[1.0])], 0.0).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let c = [curve(&[0.3, 0.7])];
        let w = entropy_weights(&c, 0.5).unwrap();
        assert_eq!(aggregate_head(&c, &w).unwrap().values(), &[0.3, 0.7]);

        let c = [curve(&[1.0, 0.0]), curve(&[0.0, 1.0])];
        let w = entropy_weights(&c, 0.5).unwrap();
        assert_eq!(aggregate_head(&c, &w).unwrap().values(), &[0.5, 0.5]);

        let c = [curve(&[1.0, 0.0]), curve(&[0.5, 0.5])];
        let w = entropy_weights(&c, 0.5).unwrap();
        let agg = aggregate_head(&c, &w).unwrap();
        assert_relative_eq!(agg.values()[0], 0.9, max_relative = 1e-12);
        assert_relative_eq!(agg.values()[1], 0.1, max_relative = 1e-12);
    }

    #[test]
    fn aggregate_length_mismatch() {
        let c = [curve(&[1.0, 0.0]), curve(&[0.5])];
        let w = EntropyWeights::from_entropies(vec![0.0, 0.0], 0.5).unwrap();
        assert!(aggregate_head(&c, &w).is_err());
        let w1 = EntropyWeights::from_entropies(vec![0.0], 0.5).unwrap();
        assert!(aggregate_head(&c[..1], &w).is_err());
        assert!(aggregate_head(&c[..1], &w1).is_ok());
    }

    #[test]
    fn smooth_identity_and_normalization() {
        let out = smooth_normalize(&curve(&[2.0, 2.0]), 0.0).unwrap();
        assert_eq!(out.values(), &[0.5, 0.5]);
        assert_eq!(out.stage, CurveStage::SmoothedNormalized);
        assert!(matches!(smooth_normalize(&curve(&[0.0, 0.0]), 1.0), Err(Error::DegenerateSignal(_))));
    }

    #[test]
    fn kernel_shape() {
        let k = gaussian_kernel(2.0);
        assert_eq!(k.len(), 13);
        assert_relative_eq!(k.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_eq!(gaussian_kernel(0.0), vec![1.0]);
        assert_eq!(gaussian_kernel(0.1).len(), 3);
    }

    #[test]
    fn reflection() {
        // d c b a | a b c d | d c b a
        let idx: Vec<usize> = (-4..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-1, 1), 0);
        assert_eq!(reflect_index(5, 1), 0);
    }

    #[test]
    fn debias_examples() {
        let a = RelevanceCurve::new(vec![0.5, 0.5], CurveStage::SmoothedNormalized, None);
        assert_eq!(debias_head(&a, &a, 1e-8).unwrap().values(), &[0.0, 0.0]);

        let neg = RelevanceCurve::new(vec![0.75, 0.25], CurveStage::SmoothedNormalized, None);
        let s = debias_head(&a, &neg, 1e-8).unwrap();
        assert_eq!(s.values()[0], 0.0);
        assert_relative_eq!(s.values()[1], 0.5 * 2f64.ln(), max_relative = 1e-7);
        assert_relative_eq!(s.values()[1], 0.3466, epsilon = 1e-4);

        let short = RelevanceCurve::new(vec![1.0], CurveStage::SmoothedNormalized, None);
        assert!(debias_head(&a, &short, 1e-8).is_err());
    }

    #[test]
    fn fuse_examples() {
        let one = curve(&[0.2, 0.4]);
        assert_eq!(fuse_heads(std::slice::from_ref(&one)).unwrap().values(), one.values());
        assert_eq!(fuse_heads(&[curve(&[1.0, 0.0]), curve(&[0.0, 1.0])]).unwrap().values(), &[0.5, 0.5]);
        let three = [curve(&[3.0, 0.0, 0.0]), curve(&[0.0, 3.0, 0.0]), curve(&[0.0, 0.0, 3.0])];
        assert_eq!(fuse_heads(&three).unwrap().values(), &[1.0, 1.0, 1.0]);
        assert!(fuse_heads(&[]).is_err());
    }

    #[test]
    fn csv_export() {
        let tl = Timeline::new(2.0, 2).unwrap();
        let c = RelevanceCurve::new(vec![0.25, 0.75], CurveStage::Fused, None);
        let mut out = Vec::new();
        write_curve_csv(&mut out, &tl, &[&c]).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text, "frame_index,time_start_s,time_end_s,value,stage\n1,0,1,0.25,fused\n2,1,2,0.75,fused\n");
    }
}
