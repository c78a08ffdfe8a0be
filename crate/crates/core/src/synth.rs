//! Deterministic synthetic corpora with planted structure.
//!
//! Each sample is a positive/zero-video dump pair. Positive rows mix
//! content tokens peaked on a planted interval (low entropy) with function
//! tokens spread uniformly (high entropy). Both dumps share a sink block on
//! frame 1; an optional off-interval distractor bump is added to every row,
//! in the zero-video dump too unless `distractor_in_zero` is false. The
//! decode trace and Stage-1 prediction are planted so that confidence tracks
//! Stage-1 accuracy: unreliable samples get a low-confidence prediction on
//! the distractor (or elsewhere off-interval).
//!
//! Everything is a pure function of `(spec, index)` through [`SplitMix64`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dump::{
    write_dump, AttentionDump, DecodeTrace, DumpKind, FrameInterval, FrameTokenMap, HeadAttention, HeadId,
    QueryTokens, TimeInterval, Timeline,
};
use crate::error::{Error, Result};
use crate::headlab::{KnockoutResult, Sweep, SweepHeader, DEFAULT_CALIBRATION_SAMPLES};
use crate::interval::frames_to_time;
use crate::reinference::CropPlan;
use crate::rng::SplitMix64;
use crate::config::PipelineConfig;
use crate::eval::iou;
use crate::pipeline::{analyze_pair, merge_predictions, FinalPrediction, LocalPrediction, StageOneRecord};

/// Position of the first video token (system prompt tokens precede it).
const VIDEO_SPAN_START: usize = 16;
/// Prompt tokens between the video and the query.
const QUERY_GAP: usize = 6;
/// Frames kept clear of content next to the sink frame.
const SINK_GUARD: usize = 8;
/// Stream id reserved for sweep generation.
const SWEEP_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepParams {
    pub baseline_miou: f64,
    /// Smallest knockout drop given to a planted head.
    pub planted_drop: f64,
    /// Half-width of the uniform noise on every other head's drop.
    pub noise: f64,
    pub calibration_samples: usize,
}

impl Default for SweepParams {
    fn default() -> Self {
        Self {
            baseline_miou: 52.0,
            planted_drop: 5.0,
            noise: 0.4,
            calibration_samples: DEFAULT_CALIBRATION_SAMPLES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_samples: usize,
    /// Frame count range `[min, max]`.
    pub num_frames: [usize; 2],
    pub fps: f64,
    /// Per-frame token count range `[min, max]`.
    pub tokens_per_frame: [usize; 2],
    /// Query length range `[min, max]`.
    pub query_len: [usize; 2],
    pub num_heads: usize,
    /// Probability that a query token is a content token (at least one always is).
    pub content_fraction: f64,
    /// Peak height of content rows over the unit background.
    pub content_gain: f64,
    /// Gaussian falloff (frames) of the plateau edges.
    pub edge_width_frames: f64,
    pub sink_strength: f64,
    pub distractor_probability: f64,
    pub distractor_strength_ratio: f64,
    pub distractor_in_zero: bool,
    pub noise_level: f64,
    /// Planted interval length as a fraction of T, range `[min, max]`.
    pub planted_interval_fraction: [f64; 2],
    /// Share of samples whose Stage-1 prediction is accurate and confident.
    pub reliable_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_planted: Option<FrameInterval>,
    pub sweep: SweepParams,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            num_samples: 200,
            num_frames: [40, 120],
            fps: 1.0,
            tokens_per_frame: [2, 4],
            query_len: [4, 8],
            num_heads: 5,
            content_fraction: 0.5,
            content_gain: 6.0,
            edge_width_frames: 1.0,
            sink_strength: 4.0,
            distractor_probability: 0.5,
            distractor_strength_ratio: 1.5,
            distractor_in_zero: true,
            noise_level: 0.2,
            planted_interval_fraction: [0.25, 0.45],
            reliable_fraction: 0.5,
            fixed_planted: None,
            sweep: SweepParams::default(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, r: [usize; 2], min: usize| {
            if r[0] < min || r[0] > r[1] {
                Err(Error::validation(name, format!("range {:?} invalid (min {min})", r)))
            } else {
                Ok(())
            }
        };
        range("num_frames", self.num_frames, 1)?;
        range("tokens_per_frame", self.tokens_per_frame, 1)?;
        range("query_len", self.query_len, 1)?;
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::validation(name, format!("{v} outside [0, 1]")))
            }
        };
        unit("content_fraction", self.content_fraction)?;
        unit("distractor_probability", self.distractor_probability)?;
        unit("reliable_fraction", self.reliable_fraction)?;
        for (name, v) in [
            ("fps", self.fps),
            ("content_gain", self.content_gain),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(name, "must be > 0"));
            }
        }
        for (name, v) in [
            ("edge_width_frames", self.edge_width_frames),
            ("sink_strength", self.sink_strength),
            ("distractor_strength_ratio", self.distractor_strength_ratio),
            ("noise_level", self.noise_level),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(name, "must be >= 0"));
            }
        }
        let [lo, hi] = self.planted_interval_fraction;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::validation("planted_interval_fraction", "must be a range within (0, 1)"));
        }
        if self.num_heads == 0 {
            return Err(Error::validation("num_heads", "must be >= 1"));
        }
        if let Some(p) = self.fixed_planted {
            if self.num_frames[0] != self.num_frames[1] {
                return Err(Error::validation("fixed_planted", "requires a fixed frame count"));
            }
            FrameInterval::new(p.first, p.last, self.num_frames[0])?;
        }
        Ok(())
    }

    /// SHA-256 of the spec's canonical JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Heads carried by every generated dump, and the model grid they live in.
    pub fn head_layout(&self) -> (Vec<HeadId>, [u32; 2]) {
        let k = self.num_heads as u32;
        let heads_per_layer = 28u32.max(k + 1);
        let layers = 28u32.max(12 + 2 * k);
        let heads = (0..k)
            .map(|i| HeadId::new(12 + 2 * i, (5 * i + 3) % heads_per_layer))
            .collect();
        (heads, [layers, heads_per_layer])
    }
}

/// One generated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub positive: AttentionDump,
    pub zero: AttentionDump,
    pub planted: FrameInterval,
    pub distractor: Option<FrameInterval>,
    /// Whether the planted Stage-1 prediction is the accurate, confident kind.
    pub reliable: bool,
}

pub fn sample_id(index: usize) -> String {
    format!("synth-{index:05}")
}

/// Plateau of height 1 on `[first, last]` with Gaussian edges of width
/// `edge`, cut off beyond `3 * edge` frames.
fn plateau(frame: usize, span: FrameInterval, edge: f64) -> f64 {
    let d = if frame < span.first {
        span.first - frame
    } else if frame > span.last {
        frame - span.last
    } else {
        return 1.0;
    };
    if edge <= 0.0 || d as f64 > 3.0 * edge {
        return 0.0;
    }
    let d = d as f64;
    (-d * d / (2.0 * edge * edge)).exp()
}

fn normalize_row(row: &mut [f32], raw: &[f64], mass: f64) {
    let total: f64 = raw.iter().sum();
    for (dst, v) in row.iter_mut().zip(raw) {
        *dst = (v / total * mass) as f32;
    }
    // f32 rounding can push the sum a hair above `mass`; mass <= 0.9 keeps it far below 1.
}

pub fn generate_pair(spec: &SynthSpec, index: usize) -> Result<SynthPair> {
    spec.validate()?;
    if index >= spec.num_samples && spec.num_samples > 0 {
        return Err(Error::validation("index", format!("{index} >= num_samples {}", spec.num_samples)));
    }
    let mut rng = SplitMix64::stream(spec.seed, index as u64);

    let t = rng.range_inclusive(spec.num_frames[0], spec.num_frames[1]);
    let dt = 1.0 / spec.fps;
    let timeline = Timeline::new(t as f64 * dt, t)?;
    let tokens_per_frame: Vec<u32> = (0..t)
        .map(|_| rng.range_inclusive(spec.tokens_per_frame[0], spec.tokens_per_frame[1]) as u32)
        .collect();
    let n_v: usize = tokens_per_frame.iter().map(|&n| n as usize).sum();
    let frame_map = FrameTokenMap {
        tokens_per_frame,
        video_span_start: VIDEO_SPAN_START,
        video_span_end: VIDEO_SPAN_START + n_v,
    };
    let m = rng.range_inclusive(spec.query_len[0], spec.query_len[1]);
    let q_start = frame_map.video_span_end + QUERY_GAP;

    let planted = match spec.fixed_planted {
        Some(p) => p,
        None => {
            let frac = rng.uniform(spec.planted_interval_fraction[0], spec.planted_interval_fraction[1]);
            let len = ((frac * t as f64).round() as usize).clamp(1, t);
            let latest = t - len + 1;
            let earliest = (SINK_GUARD + 1).min(latest);
            let first = rng.range_inclusive(earliest, latest);
            FrameInterval { first, last: first + len - 1 }
        }
    };

    let distractor = if rng.bernoulli(spec.distractor_probability) {
        let width = (planted.len() / 2).max(1);
        let clearance = planted.len() / 2 + SINK_GUARD;
        let candidates: Vec<usize> = (SINK_GUARD + 1..=t.saturating_sub(width - 1))
            .filter(|&c| {
                let last = c + width - 1;
                last + clearance < planted.first || c > planted.last + clearance
            })
            .collect();
        if candidates.is_empty() {
            None
        } else {
            let c = candidates[rng.range_inclusive(0, candidates.len() - 1)];
            Some(FrameInterval { first: c, last: c + width - 1 })
        }
    } else {
        None
    };

    let mut is_content: Vec<bool> = (0..m).map(|_| rng.bernoulli(spec.content_fraction)).collect();
    if !is_content.iter().any(|&c| c) {
        let i = rng.range_inclusive(0, m - 1);
        is_content[i] = true;
    }
    let texts: Vec<String> = is_content
        .iter()
        .enumerate()
        .map(|(i, &c)| if c { format!("w{i}") } else { ["the", "a", "of", "in"][i % 4].to_string() })
        .collect();
    let query = QueryTokens { texts, span_start: q_start, span_end: q_start + m };

    let frame_of: Vec<usize> = frame_map
        .tokens_per_frame
        .iter()
        .enumerate()
        .flat_map(|(j, &n)| std::iter::repeat_n(j + 1, n as usize))
        .collect();
    let content_profile: Vec<f64> = (1..=t).map(|j| plateau(j, planted, spec.edge_width_frames)).collect();
    let distractor_profile: Vec<f64> = (1..=t)
        .map(|j| distractor.map_or(0.0, |d| plateau(j, d, spec.edge_width_frames)))
        .collect();

    let (head_ids, grid) = spec.head_layout();
    let mut pos_heads = Vec::with_capacity(head_ids.len());
    let mut zero_heads = Vec::with_capacity(head_ids.len());
    let mut raw = vec![0.0f64; n_v];
    for &id in &head_ids {
        let gain = spec.content_gain * rng.uniform(0.7, 1.3);
        let distractor_height = spec.distractor_strength_ratio * gain;
        let mut pos = vec![0.0f32; m * n_v];
        let mut neg = vec![0.0f32; m * n_v];
        for i in 0..m {
            let row_gain = if is_content[i] { gain * rng.uniform(0.6, 1.4) } else { 0.0 };
            for (k, &f) in frame_of.iter().enumerate() {
                let sink = if f == 1 { spec.sink_strength } else { 0.0 };
                raw[k] = 1.0
                    + spec.noise_level * rng.next_f64()
                    + sink
                    + row_gain * content_profile[f - 1]
                    + distractor_height * distractor_profile[f - 1];
            }
            let mass = rng.uniform(0.3, 0.9);
            normalize_row(&mut pos[i * n_v..(i + 1) * n_v], &raw, mass);

            for (k, &f) in frame_of.iter().enumerate() {
                let sink = if f == 1 { spec.sink_strength } else { 0.0 };
                let d = if spec.distractor_in_zero { distractor_height * distractor_profile[f - 1] } else { 0.0 };
                raw[k] = 1.0 + spec.noise_level * rng.next_f64() + sink + d;
            }
            let mass = rng.uniform(0.3, 0.9);
            normalize_row(&mut neg[i * n_v..(i + 1) * n_v], &raw, mass);
        }
        pos_heads.push(HeadAttention::new(id, m, n_v, pos)?);
        zero_heads.push(HeadAttention::new(id, m, n_v, neg)?);
    }

    let gt = frames_to_time(planted, &timeline);
    let duration = timeline.duration_s();
    let reliable = rng.bernoulli(spec.reliable_fraction);
    let (prediction, confidence) = if reliable {
        let len = gt.length();
        let s = (gt.start_s + rng.uniform(-0.2, 0.2) * len).clamp(0.0, duration);
        let e = (gt.end_s + rng.uniform(-0.2, 0.2) * len).clamp(s, duration);
        (TimeInterval::new(s, e), rng.uniform(0.9, 0.99))
    } else {
        let len = gt.length();
        let center = match distractor {
            Some(d) => {
                let span = frames_to_time(d, &timeline);
                0.5 * (span.start_s + span.end_s)
            }
            None => {
                // Farthest end of the video from the planted interval.
                if gt.start_s > duration - gt.end_s { 0.5 * len } else { duration - 0.5 * len }
            }
        };
        let s = (center - 0.5 * len).clamp(0.0, duration);
        let e = (center + 0.5 * len).clamp(s, duration);
        (TimeInterval::new(s, e), rng.uniform(0.3, 0.85))
    };
    let n_numeric = rng.range_inclusive(2, 6);
    let probs = (0..n_numeric)
        .map(|_| (confidence * (0.02 * rng.normal()).exp()).clamp(1e-3, 1.0))
        .collect();

    let id = sample_id(index);
    let positive = AttentionDump {
        sample_id: id.clone(),
        timeline,
        query: query.clone(),
        frame_map: frame_map.clone(),
        grid,
        heads: pos_heads,
        kind: DumpKind::Positive,
        decode: Some(DecodeTrace { numeric_token_probs: probs }),
        stage1_prediction: Some(prediction),
        ground_truth: Some(gt),
    };
    let zero = AttentionDump {
        sample_id: id,
        timeline,
        query,
        frame_map,
        grid,
        heads: zero_heads,
        kind: DumpKind::ZeroVideo,
        decode: None,
        stage1_prediction: None,
        ground_truth: None,
    };
    Ok(SynthPair { positive, zero, planted, distractor, reliable })
}

/// Simulated knockout sweep: planted heads lose between `planted_drop` and
/// `1.5 * planted_drop` mIoU, all others move by uniform noise in
/// `[-noise, noise]`.
pub fn generate_sweep(spec: &SynthSpec, grid: [u32; 2], true_heads: &[HeadId]) -> Result<Sweep> {
    if let Some(h) = true_heads.iter().find(|h| h.layer >= grid[0] || h.head >= grid[1]) {
        return Err(Error::validation("true_heads", format!("head {h} outside grid {grid:?}")));
    }
    let p = &spec.sweep;
    let mut rng = SplitMix64::stream(spec.seed, SWEEP_STREAM);
    let mut results = Vec::with_capacity((grid[0] * grid[1]) as usize);
    for layer in 0..grid[0] {
        for head in 0..grid[1] {
            let drop = if true_heads.contains(&HeadId::new(layer, head)) {
                p.planted_drop * rng.uniform(1.0, 1.5)
            } else {
                p.noise * rng.uniform(-1.0, 1.0)
            };
            results.push(KnockoutResult { layer, head, miou: p.baseline_miou - drop });
        }
    }
    Ok(Sweep {
        header: SweepHeader {
            baseline_miou: p.baseline_miou,
            grid,
            calibration_samples: p.calibration_samples,
        },
        results,
    })
}

/// Clip-local prediction of a perfect model shown the crop: the ground
/// truth clipped to the clip, shifted to start at zero.
pub fn perfect_local_prediction(gt: TimeInterval, plan: &CropPlan) -> TimeInterval {
    let hi = plan.offset_s + plan.duration_s;
    let s = gt.start_s.clamp(plan.offset_s, hi);
    let e = gt.end_s.clamp(plan.offset_s, hi);
    TimeInterval::new(s - plan.offset_s, e - plan.offset_s)
}

/// Prediction of a perfect model that can only see `visible`.
pub fn perfect_masked_prediction(gt: TimeInterval, visible: TimeInterval) -> TimeInterval {
    let s = gt.start_s.clamp(visible.start_s, visible.end_s);
    let e = gt.end_s.clamp(visible.start_s, visible.end_s);
    TimeInterval::new(s, e)
}

/// One sample pushed through the whole loop with a perfect Stage-2 model.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticOutcome {
    pub record: StageOneRecord,
    pub ground_truth: TimeInterval,
    pub planted: FrameInterval,
    pub stage1: TimeInterval,
    pub final_prediction: FinalPrediction,
    pub reliable: bool,
}

impl SyntheticOutcome {
    pub fn stage1_iou(&self) -> f64 {
        iou(self.stage1, self.ground_truth)
    }

    pub fn final_iou(&self) -> f64 {
        iou(self.final_prediction.prediction, self.ground_truth)
    }
}

/// Runs Stage 1 on sample `index`, answers any Stage-2 request with the
/// matching perfect predictor and merges the result.
pub fn simulate_sample(spec: &SynthSpec, index: usize, config: &PipelineConfig) -> Result<SyntheticOutcome> {
    let pair = generate_pair(spec, index)?;
    let record = analyze_pair(&pair.positive, &pair.zero, config)?.record;
    let gt = pair.positive.ground_truth.expect("synth dumps carry ground truth");
    let stage1 = pair.positive.stage1_prediction.expect("synth dumps carry a prediction");
    let mut locals = Vec::new();
    if let Some(plan) = &record.crop_plan {
        locals.push(LocalPrediction { sample_id: record.sample_id.clone(), prediction: perfect_local_prediction(gt, plan) });
    } else if let Some(visible) = record.visible_span {
        locals.push(LocalPrediction { sample_id: record.sample_id.clone(), prediction: perfect_masked_prediction(gt, visible) });
    }
    let final_prediction = merge_predictions(std::slice::from_ref(&record), &locals)?.remove(0);
    Ok(SyntheticOutcome { record, ground_truth: gt, planted: pair.planted, stage1, final_prediction, reliable: pair.reliable })
}

pub fn simulate_corpus(spec: &SynthSpec, config: &PipelineConfig) -> Result<Vec<SyntheticOutcome>> {
    (0..spec.num_samples).map(|i| simulate_sample(spec, i, config)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub positive: String,
    pub zero: String,
    pub planted_frames: FrameInterval,
    pub planted_seconds: TimeInterval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub spec_hash: String,
    pub num_samples: usize,
    pub samples: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";
pub const SWEEP_FILE: &str = "sweep.jsonl";

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes a corpus into `out_dir`: one `.pos.atgd` / `.zero.atgd` pair per
/// sample, a ground-truth JSON-lines file, a simulated knockout sweep over
/// the dump heads, and finally `manifest.json`. Refuses a non-empty
/// directory unless `force`.
pub fn write_corpus(spec: &SynthSpec, out_dir: &Path, force: bool) -> Result<CorpusManifest> {
    spec.validate()?;
    if out_dir.exists() {
        let non_empty = fs::read_dir(out_dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::validation(
                "out_dir",
                format!("{} is not empty (use --force to overwrite)", out_dir.display()),
            ));
        }
    } else {
        fs::create_dir_all(out_dir)?;
    }
    let _ = fs::remove_file(out_dir.join(MANIFEST_FILE));

    let mut samples = Vec::with_capacity(spec.num_samples);
    let mut gt_lines = Vec::new();
    for index in 0..spec.num_samples {
        let pair = generate_pair(spec, index)?;
        let id = pair.positive.sample_id.clone();
        let pos_name = format!("{id}.pos.atgd");
        let zero_name = format!("{id}.zero.atgd");
        for (name, dump) in [(&pos_name, &pair.positive), (&zero_name, &pair.zero)] {
            let mut bytes = Vec::new();
            write_dump(dump, &mut bytes)?;
            write_atomic(&out_dir.join(name), &bytes)?;
        }
        let seconds = frames_to_time(pair.planted, &pair.positive.timeline);
        serde_json::to_writer(&mut gt_lines, &serde_json::json!({"sample_id": id, "ground_truth": seconds}))?;
        gt_lines.push(b'\n');
        samples.push(ManifestEntry {
            sample_id: id,
            positive: pos_name,
            zero: zero_name,
            planted_frames: pair.planted,
            planted_seconds: seconds,
        });
    }
    write_atomic(&out_dir.join(GROUND_TRUTH_FILE), &gt_lines)?;

    let (heads, grid) = spec.head_layout();
    let mut sweep_bytes = Vec::new();
    generate_sweep(spec, grid, &heads)?.write(&mut sweep_bytes)?;
    write_atomic(&out_dir.join(SWEEP_FILE), &sweep_bytes)?;

    let manifest = CorpusManifest {
        spec_hash: spec.hash(),
        num_samples: spec.num_samples,
        samples,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    write_atomic(&out_dir.join(MANIFEST_FILE), &bytes)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<(CorpusManifest, PathBuf)> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    Ok((serde_json::from_str(&text)?, dir.to_path_buf()))
}
