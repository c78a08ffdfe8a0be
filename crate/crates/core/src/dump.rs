//! Domain types for one sample's query-to-video attention readout and the
//! ATGD v1 binary interchange format.
//!
//! Layout of an ATGD v1 file:
//!
//! ```text
//! 0..4    magic "ATGD"
//! 4       version (1)
//! 5       flags: bit0 zero_video, bit1 decode trace, bit2 stage-1 prediction, bit3 ground truth
//! 6..10   manifest length n (u32, little-endian)
//! 10..    n bytes of UTF-8 JSON manifest
//! ...     per head, in manifest order: M * N_v f32 little-endian values, row-major
//! ```
//!
//! The reader never repairs data: any inconsistency between flags, manifest
//! and payload is reported as an error.

use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ATGD";
pub const VERSION: u8 = 1;
/// Size of the fixed prefix preceding the manifest bytes.
pub const PREFIX_LEN: usize = 10;

pub const FLAG_ZERO_VIDEO: u8 = 1 << 0;
pub const FLAG_DECODE_TRACE: u8 = 1 << 1;
pub const FLAG_STAGE1_PREDICTION: u8 = 1 << 2;
pub const FLAG_GROUND_TRUTH: u8 = 1 << 3;
const KNOWN_FLAGS: u8 = FLAG_ZERO_VIDEO | FLAG_DECODE_TRACE | FLAG_STAGE1_PREDICTION | FLAG_GROUND_TRUTH;

/// Maximum tolerated excess of a query row's attention mass over 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// An attention head addressed by `(layer, head)`. Serialized as `[layer, head]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[u32; 2]", into = "[u32; 2]")]
pub struct HeadId {
    pub layer: u32,
    pub head: u32,
}

impl HeadId {
    pub const fn new(layer: u32, head: u32) -> Self {
        Self { layer, head }
    }
}

impl From<[u32; 2]> for HeadId {
    fn from([layer, head]: [u32; 2]) -> Self {
        Self { layer, head }
    }
}

impl From<HeadId> for [u32; 2] {
    fn from(h: HeadId) -> Self {
        [h.layer, h.head]
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.layer, self.head)
    }
}

/// Duration `D`, frame count `T` and the derived per-frame duration `D / T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timeline {
    duration_s: f64,
    num_frames: usize,
    frame_dt_s: f64,
}

impl Timeline {
    pub fn new(duration_s: f64, num_frames: usize) -> Result<Self> {
        if !(duration_s.is_finite() && duration_s > 0.0) {
            return Err(Error::validation("duration_s", format!("must be finite and > 0, got {duration_s}")));
        }
        if num_frames == 0 {
            return Err(Error::validation("num_frames", "must be >= 1"));
        }
        Ok(Self {
            duration_s,
            num_frames,
            frame_dt_s: duration_s / num_frames as f64,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.duration_s
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn frame_dt_s(&self) -> f64 {
        self.frame_dt_s
    }

    /// Time span `[(j-1)·Δt, j·Δt]` of 1-based frame `j`.
    pub fn frame_span(&self, frame: usize) -> (f64, f64) {
        let start = (frame as f64 - 1.0) * self.frame_dt_s;
        let end = (frame as f64 * self.frame_dt_s).min(self.duration_s);
        (start, end)
    }
}

/// Query tokens occupying positions `[span_start, span_end)` of the prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryTokens {
    pub texts: Vec<String>,
    pub span_start: usize,
    pub span_end: usize,
}

impl QueryTokens {
    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn span(&self) -> Range<usize> {
        self.span_start..self.span_end
    }

    pub fn validate(&self) -> Result<()> {
        if self.span_end < self.span_start {
            return Err(Error::validation("q_span", "end precedes start"));
        }
        let m = self.span_end - self.span_start;
        if m == 0 {
            return Err(Error::validation("q_span", "query must contain at least one token"));
        }
        if m != self.texts.len() {
            return Err(Error::validation(
                "query_texts",
                format!("{} texts for a span of {m} tokens", self.texts.len()),
            ));
        }
        Ok(())
    }
}

/// Layout of the video tokens `[video_span_start, video_span_end)`: frame
/// `j` owns a contiguous block of `tokens_per_frame[j-1]` tokens, blocks in
/// frame order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameTokenMap {
    pub tokens_per_frame: Vec<u32>,
    pub video_span_start: usize,
    pub video_span_end: usize,
}

impl FrameTokenMap {
    pub fn num_frames(&self) -> usize {
        self.tokens_per_frame.len()
    }

    /// `N_v`, the number of video tokens.
    pub fn num_video_tokens(&self) -> usize {
        self.video_span_end.saturating_sub(self.video_span_start)
    }

    pub fn video_span(&self) -> Range<usize> {
        self.video_span_start..self.video_span_end
    }

    /// Prefix sums of the token counts, length `T + 1`, starting at 0.
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.tokens_per_frame.len() + 1);
        let mut acc = 0usize;
        out.push(0);
        for &n in &self.tokens_per_frame {
            acc += n as usize;
            out.push(acc);
        }
        out
    }

    /// Token block of 1-based `frame`, relative to the start of the video span.
    pub fn frame_tokens(&self, frame: usize) -> Range<usize> {
        let start: usize = self.tokens_per_frame[..frame - 1].iter().map(|&n| n as usize).sum();
        start..start + self.tokens_per_frame[frame - 1] as usize
    }

    /// 1-based frame owning the video token at `index` (0-based within the video span).
    pub fn frame_of_token(&self, index: usize) -> Result<usize> {
        let n_v = self.num_video_tokens();
        if index >= n_v {
            return Err(Error::validation(
                "video_token_index",
                format!("index {index} out of range for {n_v} video tokens"),
            ));
        }
        let offsets = self.offsets();
        // First block whose end exceeds the index.
        let frame = offsets[1..].partition_point(|&end| end <= index);
        Ok(frame + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens_per_frame.is_empty() {
            return Err(Error::validation("tokens_per_frame", "must list at least one frame"));
        }
        if let Some(j) = self.tokens_per_frame.iter().position(|&n| n == 0) {
            return Err(Error::validation("tokens_per_frame", format!("frame {} has no tokens", j + 1)));
        }
        if self.video_span_end < self.video_span_start {
            return Err(Error::validation("v_span", "end precedes start"));
        }
        let total: usize = self.tokens_per_frame.iter().map(|&n| n as usize).sum();
        if total != self.num_video_tokens() {
            return Err(Error::validation(
                "tokens_per_frame",
                format!("counts sum to {total} but v_span holds {} tokens", self.num_video_tokens()),
            ));
        }
        Ok(())
    }
}

/// Query-to-video attention slice of one head, an `rows × cols` (M × N_v)
/// row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadAttention {
    pub head: HeadId,
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl HeadAttention {
    pub fn new(head: HeadId, rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::validation(
                "heads",
                format!("head {head}: {} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        let matrix = Self { head, rows, cols, data };
        matrix.validate_values()?;
        Ok(matrix)
    }

    pub fn from_rows(head: HeadId, rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::validation("heads", format!("head {head}: ragged rows")));
        }
        Self::new(head, rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn validate_values(&self) -> Result<()> {
        for i in 0..self.rows {
            let row = self.row(i);
            if let Some(j) = row.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::validation(
                    "heads",
                    format!("head {}: entry ({i}, {j}) = {} is not a finite non-negative weight", self.head, row[j]),
                ));
            }
            let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
            if sum > 1.0 + ROW_SUM_TOLERANCE {
                return Err(Error::validation(
                    "heads",
                    format!("head {}: row {i} sums to {sum}, above 1", self.head),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DumpKind {
    Positive,
    ZeroVideo,
}

/// Softmax probabilities of the numeric tokens emitted during greedy decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub numeric_token_probs: Vec<f64>,
}

impl DecodeTrace {
    pub fn validate(&self) -> Result<()> {
        if self.numeric_token_probs.is_empty() {
            return Err(Error::validation("numeric_token_probs", "decode trace is empty"));
        }
        if let Some(p) = self.numeric_token_probs.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(Error::validation("numeric_token_probs", format!("probability {p} outside (0, 1]")));
        }
        Ok(())
    }
}

/// Seconds-domain interval `[start_s, end_s]`. Serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct TimeInterval {
    pub start_s: f64,
    pub end_s: f64,
}

impl TimeInterval {
    pub const fn new(start_s: f64, end_s: f64) -> Self {
        Self { start_s, end_s }
    }

    pub fn length(&self) -> f64 {
        (self.end_s - self.start_s).max(0.0)
    }

    pub fn validate_within(&self, field: &str, timeline: &Timeline) -> Result<()> {
        let ok = self.start_s.is_finite()
            && self.end_s.is_finite()
            && 0.0 <= self.start_s
            && self.start_s <= self.end_s
            && self.end_s <= timeline.duration_s();
        if ok {
            Ok(())
        } else {
            Err(Error::validation(
                field,
                format!(
                    "[{}, {}] is not within [0, {}]",
                    self.start_s,
                    self.end_s,
                    timeline.duration_s()
                ),
            ))
        }
    }
}

impl From<[f64; 2]> for TimeInterval {
    fn from([s, e]: [f64; 2]) -> Self {
        Self::new(s, e)
    }
}

impl From<TimeInterval> for [f64; 2] {
    fn from(t: TimeInterval) -> Self {
        [t.start_s, t.end_s]
    }
}

/// Inclusive 1-based frame span `[first, last]`. Serialized as `[first, last]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct FrameInterval {
    pub first: usize,
    pub last: usize,
}

impl FrameInterval {
    /// Checked constructor: requires `1 <= first <= last <= num_frames`.
    pub fn new(first: usize, last: usize, num_frames: usize) -> Result<Self> {
        if first == 0 || first > last || last > num_frames {
            return Err(Error::validation(
                "frame_interval",
                format!("[{first}, {last}] is not within [1, {num_frames}]"),
            ));
        }
        Ok(Self { first, last })
    }

    pub fn len(&self) -> usize {
        self.last + 1 - self.first
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.first <= frame && frame <= self.last
    }

    /// Frames as a 0-based index range into a length-T curve.
    pub fn index_range(&self) -> Range<usize> {
        self.first - 1..self.last
    }
}

impl From<[usize; 2]> for FrameInterval {
    fn from([first, last]: [usize; 2]) -> Self {
        Self { first, last }
    }
}

impl From<FrameInterval> for [usize; 2] {
    fn from(f: FrameInterval) -> Self {
        [f.first, f.last]
    }
}

/// One sample's attention readout: the query-to-video slice for each
/// selected head plus everything needed to interpret it.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    pub sample_id: String,
    pub timeline: Timeline,
    pub query: QueryTokens,
    pub frame_map: FrameTokenMap,
    /// Model grid `[L, H]`; every head index lies inside it.
    pub grid: [u32; 2],
    pub heads: Vec<HeadAttention>,
    pub kind: DumpKind,
    pub decode: Option<DecodeTrace>,
    pub stage1_prediction: Option<TimeInterval>,
    pub ground_truth: Option<TimeInterval>,
}

impl AttentionDump {
    pub fn head(&self, id: HeadId) -> Option<&HeadAttention> {
        self.heads.iter().find(|h| h.head == id)
    }

    pub fn head_ids(&self) -> Vec<HeadId> {
        self.heads.iter().map(|h| h.head).collect()
    }

    pub fn flags(&self) -> u8 {
        let mut flags = 0;
        if self.kind == DumpKind::ZeroVideo {
            flags |= FLAG_ZERO_VIDEO;
        }
        if self.decode.is_some() {
            flags |= FLAG_DECODE_TRACE;
        }
        if self.stage1_prediction.is_some() {
            flags |= FLAG_STAGE1_PREDICTION;
        }
        if self.ground_truth.is_some() {
            flags |= FLAG_GROUND_TRUTH;
        }
        flags
    }

    /// Checks every type invariant of the dump and its parts.
    pub fn validate(&self) -> Result<()> {
        self.query.validate()?;
        self.frame_map.validate()?;
        if self.frame_map.num_frames() != self.timeline.num_frames() {
            return Err(Error::validation(
                "tokens_per_frame",
                format!(
                    "{} frame entries for a timeline of {} frames",
                    self.frame_map.num_frames(),
                    self.timeline.num_frames()
                ),
            ));
        }
        let q = self.query.span();
        let v = self.frame_map.video_span();
        if q.start < v.end && v.start < q.end {
            return Err(Error::validation("q_span", "query and video token spans overlap"));
        }
        if self.heads.is_empty() {
            return Err(Error::validation("heads", "dump holds no heads"));
        }
        let m = self.query.len();
        let n_v = self.frame_map.num_video_tokens();
        let mut seen = std::collections::HashSet::new();
        for h in &self.heads {
            if !seen.insert(h.head) {
                return Err(Error::validation("heads", format!("duplicate head {}", h.head)));
            }
            if h.head.layer >= self.grid[0] || h.head.head >= self.grid[1] {
                return Err(Error::validation(
                    "heads",
                    format!("head {} outside grid [{}, {}]", h.head, self.grid[0], self.grid[1]),
                ));
            }
            if h.rows() != m || h.cols() != n_v {
                return Err(Error::validation(
                    "heads",
                    format!("head {} is {}x{}, expected {m}x{n_v}", h.head, h.rows(), h.cols()),
                ));
            }
            h.validate_values()?;
        }
        if let Some(trace) = &self.decode {
            trace.validate()?;
        }
        if let Some(p) = &self.stage1_prediction {
            p.validate_within("stage1_prediction", &self.timeline)?;
        }
        if let Some(g) = &self.ground_truth {
            g.validate_within("ground_truth", &self.timeline)?;
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    sample_id: String,
    duration_s: f64,
    num_frames: usize,
    query_texts: Vec<String>,
    q_span: [usize; 2],
    v_span: [usize; 2],
    tokens_per_frame: Vec<u32>,
    heads: Vec<HeadId>,
    grid: [u32; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    numeric_token_probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stage1_prediction: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground_truth: Option<[f64; 2]>,
}

/// Serializes `dump` as ATGD v1 and returns the number of bytes written.
pub fn write_dump<W: Write>(dump: &AttentionDump, mut sink: W) -> Result<u64> {
    dump.validate()?;
    let manifest = Manifest {
        sample_id: dump.sample_id.clone(),
        duration_s: dump.timeline.duration_s(),
        num_frames: dump.timeline.num_frames(),
        query_texts: dump.query.texts.clone(),
        q_span: [dump.query.span_start, dump.query.span_end],
        v_span: [dump.frame_map.video_span_start, dump.frame_map.video_span_end],
        tokens_per_frame: dump.frame_map.tokens_per_frame.clone(),
        heads: dump.head_ids(),
        grid: dump.grid,
        numeric_token_probs: dump.decode.as_ref().map(|d| d.numeric_token_probs.clone()),
        stage1_prediction: dump.stage1_prediction.map(Into::into),
        ground_truth: dump.ground_truth.map(Into::into),
    };
    let json = serde_json::to_vec(&manifest)?;
    let json_len = u32::try_from(json.len()).map_err(|_| Error::validation("manifest", "manifest exceeds 4 GiB"))?;

    let mut prefix = [0u8; PREFIX_LEN];
    prefix[..4].copy_from_slice(MAGIC);
    prefix[4] = VERSION;
    prefix[5] = dump.flags();
    prefix[6..10].copy_from_slice(&json_len.to_le_bytes());
    sink.write_all(&prefix)?;
    sink.write_all(&json)?;

    let mut written = (PREFIX_LEN + json.len()) as u64;
    let mut buf = Vec::new();
    for head in &dump.heads {
        buf.clear();
        buf.reserve(head.data().len() * 4);
        for v in head.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&buf)?;
        written += buf.len() as u64;
    }
    sink.flush()?;
    Ok(written)
}

/// Serializes into a fresh byte vector.
pub fn dump_to_bytes(dump: &AttentionDump) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_dump(dump, &mut out)?;
    Ok(out)
}

/// Reads an ATGD v1 stream to its end and returns the validated dump.
pub fn read_dump<R: Read>(mut source: R) -> Result<AttentionDump> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    dump_from_bytes(&bytes)
}

pub fn dump_from_bytes(bytes: &[u8]) -> Result<AttentionDump> {
    let need = |offset: usize, len: usize, section: &'static str| -> Result<()> {
        let available = bytes.len().saturating_sub(offset);
        if available < len {
            Err(Error::Truncated {
                offset: offset as u64,
                section,
                expected: len as u64,
                actual: available as u64,
            })
        } else {
            Ok(())
        }
    };

    need(0, 4, "magic")?;
    if &bytes[..4] != MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    need(4, 2, "version and flags")?;
    if bytes[4] != VERSION {
        return Err(Error::format(4, format!("unsupported version {}", bytes[4])));
    }
    let flags = bytes[5];
    if flags & !KNOWN_FLAGS != 0 {
        return Err(Error::format(5, format!("unknown flag bits {:#04x}", flags & !KNOWN_FLAGS)));
    }
    need(6, 4, "manifest length")?;
    let json_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    need(PREFIX_LEN, json_len, "manifest")?;
    let manifest: Manifest = serde_json::from_slice(&bytes[PREFIX_LEN..PREFIX_LEN + json_len])
        .map_err(|e| Error::format(PREFIX_LEN as u64, format!("invalid manifest: {e}")))?;

    let presence = [
        (FLAG_DECODE_TRACE, manifest.numeric_token_probs.is_some(), "numeric_token_probs"),
        (FLAG_STAGE1_PREDICTION, manifest.stage1_prediction.is_some(), "stage1_prediction"),
        (FLAG_GROUND_TRUTH, manifest.ground_truth.is_some(), "ground_truth"),
    ];
    for (bit, present, key) in presence {
        if (flags & bit != 0) != present {
            return Err(Error::format(
                5,
                format!("flag for `{key}` is {} but the manifest key is {}",
                    if flags & bit != 0 { "set" } else { "clear" },
                    if present { "present" } else { "absent" }),
            ));
        }
    }

    let timeline = Timeline::new(manifest.duration_s, manifest.num_frames)?;
    let query = QueryTokens {
        texts: manifest.query_texts,
        span_start: manifest.q_span[0],
        span_end: manifest.q_span[1],
    };
    query.validate()?;
    let frame_map = FrameTokenMap {
        tokens_per_frame: manifest.tokens_per_frame,
        video_span_start: manifest.v_span[0],
        video_span_end: manifest.v_span[1],
    };
    frame_map.validate()?;

    let m = query.len();
    let n_v = frame_map.num_video_tokens();
    let per_head = m * n_v * 4;
    let payload_start = PREFIX_LEN + json_len;
    let expected = per_head * manifest.heads.len();
    need(payload_start, expected, "payload")?;
    if bytes.len() > payload_start + expected {
        return Err(Error::format(
            (payload_start + expected) as u64,
            format!("{} trailing bytes after payload", bytes.len() - payload_start - expected),
        ));
    }

    let mut heads = Vec::with_capacity(manifest.heads.len());
    for (k, id) in manifest.heads.iter().enumerate() {
        let block = &bytes[payload_start + k * per_head..payload_start + (k + 1) * per_head];
        let data = block
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        heads.push(HeadAttention::new(*id, m, n_v, data)?);
    }

    let dump = AttentionDump {
        sample_id: manifest.sample_id,
        timeline,
        query,
        frame_map,
        grid: manifest.grid,
        heads,
        kind: if flags & FLAG_ZERO_VIDEO != 0 { DumpKind::ZeroVideo } else { DumpKind::Positive },
        decode: manifest.numeric_token_probs.map(|p| DecodeTrace { numeric_token_probs: p }),
        stage1_prediction: manifest.stage1_prediction.map(Into::into),
        ground_truth: manifest.ground_truth.map(Into::into),
    };
    dump.validate()?;
    Ok(dump)
}

pub fn read_dump_file(path: impl AsRef<std::path::Path>) -> Result<AttentionDump> {
    let bytes = std::fs::read(path)?;
    dump_from_bytes(&bytes)
}
