//! Attention-guided video temporal grounding, model-free core.
//!
//! The crate works on attention dumps exported by a model-side extractor
//! (the ATGD format in [`dump`]). From a positive/zero-video dump pair it
//! builds a debiased frame-level relevance curve ([`relevance`]), detects
//! the high-attention interval ([`interval`]), gates the Stage-1 prediction
//! ([`gate`]) and plans the Stage-2 re-run ([`reinference`]). [`headlab`]
//! selects grounding heads from knockout sweeps, [`eval`] scores
//! predictions, and [`synth`] generates seeded corpora with planted
//! structure.

pub mod config;
pub mod dump;
pub mod error;
pub mod eval;
pub mod gate;
pub mod headlab;
pub mod interval;
pub mod pipeline;
pub mod reinference;
pub mod relevance;
pub mod rng;
pub mod synth;

pub use config::{ConfigOverlay, PipelineConfig, Stage2Variant};
pub use dump::{
    dump_from_bytes, dump_to_bytes, read_dump, read_dump_file, write_dump, AttentionDump, DecodeTrace, DumpKind,
    FrameInterval, FrameTokenMap, HeadAttention, HeadId, QueryTokens, TimeInterval, Timeline,
};
pub use error::{Error, Result};
pub use eval::{aggregate, delta_report, iou, DeltaReport, EvalRecord, PredictionStage, Summary};
pub use gate::{GateDecision, GateReason, GateThresholds, Verdict};
pub use headlab::{GcsTable, KnockoutResult, Sweep};
pub use interval::{detect_interval, IntervalParams};
pub use pipeline::{analyze_pair, merge_predictions, score, FinalPrediction, LocalPrediction, StageOneRecord};
pub use reinference::{CropPlan, MaskSpec};
pub use relevance::{compute_relevance, RelevanceCurve};
pub use synth::SynthSpec;
