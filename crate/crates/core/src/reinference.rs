//! Stage-2 and knockout plans handed to a model runner as data: hard-crop
//! timestamp remapping, soft-mask key blocking and single-head knockout.

use serde_json::{json, Value};

use crate::dump::{FrameInterval, FrameTokenMap, HeadId, QueryTokens, TimeInterval, Timeline};
use crate::error::{Error, Result};
use crate::interval::frames_to_time;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    SoftMask,
    Knockout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskScope {
    AllHeads,
    SingleHead(HeadId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskRows {
    AllRows,
    /// Absolute query positions `[start, end)`.
    QueryRows(usize, usize),
}

/// Key positions a runner must set to `-inf` in the additive attention mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    pub kind: MaskKind,
    /// Disjoint, sorted `[start, end)` absolute token ranges.
    pub blocked: Vec<(usize, usize)>,
    pub scope: MaskScope,
    pub rows: MaskRows,
}

impl MaskSpec {
    pub fn blocked_count(&self) -> usize {
        self.blocked.iter().map(|(s, e)| e - s).sum()
    }

    /// Checks range ordering, the bound `seq_len`, and the kind/scope/rows pairing.
    pub fn validate(&self, seq_len: usize) -> Result<()> {
        let mut prev_end = 0;
        for (i, &(s, e)) in self.blocked.iter().enumerate() {
            if s >= e || e > seq_len || (i > 0 && s < prev_end) {
                return Err(Error::validation("blocked", format!("range [{s}, {e}) is empty, unsorted or out of bounds")));
            }
            prev_end = e;
        }
        let consistent = match self.kind {
            MaskKind::SoftMask => self.scope == MaskScope::AllHeads && self.rows == MaskRows::AllRows,
            MaskKind::Knockout => matches!(self.scope, MaskScope::SingleHead(_)) && matches!(self.rows, MaskRows::QueryRows(..)),
        };
        if !consistent {
            return Err(Error::validation("kind", "scope/rows do not match the mask kind"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        json!({
            "kind": match self.kind { MaskKind::SoftMask => "soft_mask", MaskKind::Knockout => "knockout" },
            "blocked": self.blocked.iter().map(|&(s, e)| json!([s, e])).collect::<Vec<_>>(),
            "scope": match self.scope {
                MaskScope::AllHeads => json!("all"),
                MaskScope::SingleHead(h) => json!({"layer": h.layer, "head": h.head}),
            },
            "rows": match self.rows {
                MaskRows::AllRows => json!("all"),
                MaskRows::QueryRows(s, e) => json!([s, e]),
            },
        })
    }

    pub fn from_json(value: &Value) -> Result<Self> {
        let bad = |what: &str| Error::validation("mask_spec", format!("malformed `{what}`"));
        let obj = value.as_object().ok_or_else(|| bad("root"))?;
        if let Some(k) = obj.keys().find(|k| !["kind", "blocked", "scope", "rows"].contains(&k.as_str())) {
            return Err(Error::validation("mask_spec", format!("unknown key `{k}`")));
        }
        let kind = match obj.get("kind").and_then(Value::as_str) {
            Some("soft_mask") => MaskKind::SoftMask,
            Some("knockout") => MaskKind::Knockout,
            _ => return Err(bad("kind")),
        };
        let pair = |v: &Value| -> Option<(usize, usize)> {
            let a = v.as_array()?;
            if a.len() != 2 {
                return None;
            }
            Some((a[0].as_u64()? as usize, a[1].as_u64()? as usize))
        };
        let blocked = obj
            .get("blocked")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("blocked"))?
            .iter()
            .map(|v| pair(v).ok_or_else(|| bad("blocked")))
            .collect::<Result<Vec<_>>>()?;
        let scope = match obj.get("scope") {
            Some(Value::String(s)) if s == "all" => MaskScope::AllHeads,
            Some(Value::Object(o)) => {
                let layer = o.get("layer").and_then(Value::as_u64).ok_or_else(|| bad("scope"))?;
                let head = o.get("head").and_then(Value::as_u64).ok_or_else(|| bad("scope"))?;
                MaskScope::SingleHead(HeadId::new(layer as u32, head as u32))
            }
            _ => return Err(bad("scope")),
        };
        let rows = match obj.get("rows") {
            Some(Value::String(s)) if s == "all" => MaskRows::AllRows,
            Some(v) => {
                let (s, e) = pair(v).ok_or_else(|| bad("rows"))?;
                MaskRows::QueryRows(s, e)
            }
            None => return Err(bad("rows")),
        };
        Ok(Self { kind, blocked, scope, rows })
    }
}

/// Bounds of the clip re-read in a hard-crop Stage 2.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CropPlan {
    pub first: usize,
    pub last: usize,
    pub offset_s: f64,
    pub duration_s: f64,
}

impl CropPlan {
    pub fn frame_interval(&self) -> FrameInterval {
        FrameInterval { first: self.first, last: self.last }
    }
}

pub fn plan_hard_crop(interval: FrameInterval, timeline: &Timeline) -> CropPlan {
    let dt = timeline.frame_dt_s();
    CropPlan {
        first: interval.first,
        last: interval.last,
        offset_s: (interval.first - 1) as f64 * dt,
        duration_s: interval.len() as f64 * dt,
    }
}

/// Shifts a clip-local prediction back onto the full timeline and clips it
/// to `[0, D]`. A reversed pair is swapped first.
pub fn remap_local_prediction(local: TimeInterval, plan: &CropPlan, timeline: &Timeline) -> TimeInterval {
    let (mut s, mut e) = (local.start_s, local.end_s);
    if s > e {
        std::mem::swap(&mut s, &mut e);
    }
    let d = timeline.duration_s();
    TimeInterval::new((s + plan.offset_s).clamp(0.0, d), (e + plan.offset_s).clamp(0.0, d))
}

/// Blocks, for every head and row, the video tokens of frames outside `interval`.
pub fn build_soft_mask(interval: FrameInterval, frame_map: &FrameTokenMap) -> MaskSpec {
    let offsets = frame_map.offsets();
    let base = frame_map.video_span_start;
    let mut blocked = Vec::new();
    let before = offsets[interval.first - 1];
    if before > 0 {
        blocked.push((base, base + before));
    }
    let after = offsets[interval.last];
    let n_v = frame_map.num_video_tokens();
    if after < n_v {
        blocked.push((base + after, base + n_v));
    }
    MaskSpec {
        kind: MaskKind::SoftMask,
        blocked,
        scope: MaskScope::AllHeads,
        rows: MaskRows::AllRows,
    }
}

/// Blocks the query→video edges of a single head. The causal part of the
/// mask is left to the runner.
pub fn build_knockout_mask(head: HeadId, query: &QueryTokens, frame_map: &FrameTokenMap) -> MaskSpec {
    MaskSpec {
        kind: MaskKind::Knockout,
        blocked: vec![(frame_map.video_span_start, frame_map.video_span_end)],
        scope: MaskScope::SingleHead(head),
        rows: MaskRows::QueryRows(query.span_start, query.span_end),
    }
}

/// Seconds span visible to a soft-masked Stage 2.
pub fn visible_span(interval: FrameInterval, timeline: &Timeline) -> TimeInterval {
    frames_to_time(interval, timeline)
}
