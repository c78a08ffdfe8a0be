#![allow(dead_code)]

use std::path::PathBuf;

use attnvtg::synth::{generate_pair, SynthSpec};
use attnvtg::*;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// One query token, one frame holding one video token, one head.
pub fn minimal_dump() -> AttentionDump {
    AttentionDump {
        sample_id: "minimal".into(),
        timeline: Timeline::new(1.0, 1).unwrap(),
        query: QueryTokens { texts: vec!["q".into()], span_start: 2, span_end: 3 },
        frame_map: FrameTokenMap { tokens_per_frame: vec![1], video_span_start: 1, video_span_end: 2 },
        grid: [1, 1],
        heads: vec![HeadAttention::from_rows(HeadId::new(0, 0), &[vec![1.0]]).unwrap()],
        kind: DumpKind::Positive,
        decode: None,
        stage1_prediction: None,
        ground_truth: None,
    }
}

/// Spec for the multi-head fixtures: M = 3, T = 8, two tokens per frame, five heads.
pub fn small_spec() -> SynthSpec {
    SynthSpec {
        seed: 7,
        num_samples: 1,
        num_frames: [8, 8],
        tokens_per_frame: [2, 2],
        query_len: [3, 3],
        num_heads: 5,
        planted_interval_fraction: [0.25, 0.4],
        ..SynthSpec::default()
    }
}

pub fn multi_head_pair() -> (AttentionDump, AttentionDump) {
    let p = generate_pair(&small_spec(), 0).unwrap();
    (p.positive, p.zero)
}

pub fn dump(
    texts: usize,
    tokens_per_frame: Vec<u32>,
    heads: Vec<HeadAttention>,
    kind: DumpKind,
) -> AttentionDump {
    let n_v: u32 = tokens_per_frame.iter().sum();
    let t = tokens_per_frame.len();
    let v_end = 1 + n_v as usize;
    AttentionDump {
        sample_id: "s".into(),
        timeline: Timeline::new(t as f64, t).unwrap(),
        query: QueryTokens {
            texts: (0..texts).map(|i| format!("t{i}")).collect(),
            span_start: v_end,
            span_end: v_end + texts,
        },
        frame_map: FrameTokenMap { tokens_per_frame, video_span_start: 1, video_span_end: v_end },
        grid: [64, 64],
        heads,
        kind,
        decode: None,
        stage1_prediction: None,
        ground_truth: None,
    }
}
