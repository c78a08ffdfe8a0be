//! High-attention interval detection on a fused relevance curve
//! (threshold, dilate, pick the highest-energy run, pad) and conversions
//! between the frame and seconds domains.

use serde::{Deserialize, Serialize};

use crate::dump::{FrameInterval, TimeInterval, Timeline};
use crate::error::{Error, Result};
use crate::relevance::RelevanceCurve;

/// Relative tolerance used when a ratio of floats is meant to be an integer
/// (e.g. `5.0 / 0.5`, `3.0 / 0.1`).
const SNAP_TOL: f64 = 1e-9;

fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= SNAP_TOL * x.abs().max(1.0) {
        r
    } else {
        x
    }
}

pub(crate) fn snap_floor(x: f64) -> f64 {
    snap(x).floor()
}

pub(crate) fn snap_ceil(x: f64) -> f64 {
    snap(x).ceil()
}

/// `floor(x + 0.5)`, tolerant of representation error just below a half.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + SNAP_TOL).floor().max(0.0) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalParams {
    /// ρ in (0, 1].
    pub threshold_ratio: f64,
    /// δ in seconds.
    pub dilation_s: f64,
    /// r ≥ 0.
    pub expansion_ratio: f64,
}

impl IntervalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_ratio > 0.0 && self.threshold_ratio <= 1.0) {
            return Err(Error::validation("rho", format!("must lie in (0, 1], got {}", self.threshold_ratio)));
        }
        if !(self.dilation_s >= 0.0 && self.dilation_s.is_finite()) {
            return Err(Error::validation("delta_s", format!("must be >= 0, got {}", self.dilation_s)));
        }
        if !(self.expansion_ratio >= 0.0 && self.expansion_ratio.is_finite()) {
            return Err(Error::validation("expansion_r", format!("must be >= 0, got {}", self.expansion_ratio)));
        }
        Ok(())
    }
}

/// `mask[j] = s(j) >= rho * max s`. All-false when the maximum is 0.
pub fn binarize(curve: &[f64], rho: f64) -> Vec<bool> {
    let max = curve.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return vec![false; curve.len()];
    }
    let cut = rho * max;
    curve.iter().map(|&v| v >= cut).collect()
}

/// Centered binary dilation with a structuring element of width `window`
/// (radius `window / 2`), clipped at the borders.
pub fn dilate(mask: &[bool], window: usize) -> Vec<bool> {
    let radius = window.max(1) / 2;
    if radius == 0 {
        return mask.to_vec();
    }
    let n = mask.len();
    let mut out = vec![false; n];
    for (j, _) in mask.iter().enumerate().filter(|(_, &on)| on) {
        let lo = j.saturating_sub(radius);
        let hi = (j + radius).min(n - 1);
        out[lo..=hi].iter_mut().for_each(|v| *v = true);
    }
    out
}

/// Maximal runs of `true`, as 1-based inclusive frame intervals.
pub fn runs(mask: &[bool]) -> Vec<FrameInterval> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &on) in mask.iter().enumerate() {
        match (on, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(FrameInterval { first: s + 1, last: i });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(FrameInterval { first: s + 1, last: mask.len() });
    }
    out
}

/// The run with the largest summed curve value; ties go to the earliest run.
pub fn select_segment(mask: &[bool], curve: &[f64]) -> Result<FrameInterval> {
    if mask.len() != curve.len() {
        return Err(Error::validation("mask", "mask and curve lengths differ"));
    }
    let mut best: Option<(FrameInterval, f64)> = None;
    for run in runs(mask) {
        let energy: f64 = curve[run.index_range()].iter().sum();
        if best.is_none_or(|(_, e)| energy > e) {
            best = Some((run, energy));
        }
    }
    best.map(|(run, _)| run).ok_or(Error::NoSegment)
}

/// Pads both sides by `round_half_up(r * len)` frames, each side clamped to `[1, T]`.
pub fn expand(segment: FrameInterval, r: f64, num_frames: usize) -> FrameInterval {
    let pad = round_half_up(r * segment.len() as f64);
    FrameInterval {
        first: segment.first.saturating_sub(pad).max(1),
        last: (segment.last + pad).min(num_frames),
    }
}

/// Dilation width in frames, `max(1, ceil(delta / dt))`.
pub fn dilation_window(dilation_s: f64, frame_dt_s: f64) -> usize {
    if dilation_s <= 0.0 {
        return 1;
    }
    (snap_ceil(dilation_s / frame_dt_s) as usize).max(1)
}

pub fn detect_interval(curve: &RelevanceCurve, timeline: &Timeline, params: &IntervalParams) -> Result<FrameInterval> {
    params.validate()?;
    if curve.len() != timeline.num_frames() {
        return Err(Error::validation(
            "curve",
            format!("curve has {} frames, timeline {}", curve.len(), timeline.num_frames()),
        ));
    }
    let values = curve.values();
    let mask = binarize(values, params.threshold_ratio);
    if !mask.iter().any(|&b| b) {
        return Err(Error::DetectionFailed);
    }
    let window = dilation_window(params.dilation_s, timeline.frame_dt_s());
    let mask = dilate(&mask, window);
    let segment = select_segment(&mask, values)?;
    Ok(expand(segment, params.expansion_ratio, timeline.num_frames()))
}

/// `[(f_s - 1) dt, f_e dt]`, clamped to `[0, D]`.
pub fn frames_to_time(interval: FrameInterval, timeline: &Timeline) -> TimeInterval {
    let dt = timeline.frame_dt_s();
    let d = timeline.duration_s();
    TimeInterval::new(
        ((interval.first as f64 - 1.0) * dt).clamp(0.0, d),
        (interval.last as f64 * dt).clamp(0.0, d),
    )
}

/// `f_s = clamp(floor(start / dt) + 1, 1, T)`, `f_e = clamp(ceil(end / dt), f_s, T)`.
pub fn time_to_frames(interval: TimeInterval, timeline: &Timeline) -> FrameInterval {
    let dt = timeline.frame_dt_s();
    let t = timeline.num_frames() as f64;
    let first = (snap_floor(interval.start_s / dt) + 1.0).clamp(1.0, t);
    let last = snap_ceil(interval.end_s / dt).clamp(first, t);
    FrameInterval {
        first: first as usize,
        last: last as usize,
    }
}
