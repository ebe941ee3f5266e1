//! IKOD: image-attention-guided KV merging and collaborative decoding on a
//! deterministic toy multimodal decoder.
//!
//! The pipeline is split into small modules:
//! [`numerics`] (matrices, softmax, seeded RNG), [`model`] (decoder, cache,
//! layouts and checkpoints), [`attn_analysis`] (image attention statistics),
//! [`kv_merge`] (anchor selection and bucket merging), [`decode`]
//! (collaborative decoding), [`cost`] (FLOPs model) and [`metrics`]
//! (hallucination and binary scores).

pub mod attn_analysis;
pub mod cost;
pub mod decode;
pub mod error;
pub mod kv_merge;
pub mod metrics;
pub mod model;
pub mod numerics;

pub use attn_analysis::{
    degradation_report, image_attention, kde2d, mean_image_attention, segment_averages,
    uniform_attention_prediction, DegradationRow, ImageAttentionStat, KdeRecord, SegmentSummary,
};
pub use cost::{cost_report, CostInputs, CostReport};
pub use decode::{
    base_select, ikod_generate, plausibility_mask, BaseStrategy, DecodeMode, DecodePolicy,
    Generation, Prompt, StepRecord,
};
pub use error::{IkodError, Result};
pub use kv_merge::{merge_cache, AnchorStrategy, Bucket, CompressedCache, MergePlan};
pub use metrics::{binary_metrics, chair_scores, BinaryOutcomes, CaptionRecord};
pub use model::{
    AttentionTrace, LayeredKvCache, Model, ModelConfig, Role, SequenceLayout, StepInput, TokenId,
};
pub use numerics::{Matrix, Rng};
