//! Shared fixtures for the benchmarks.

use ikod_core::kv_merge::{layer_scores, merge_cache, MergePlan};
use ikod_core::model::{AttentionTrace, LayeredKvCache, Role, SequenceLayout, StepInput};
use ikod_core::numerics::Rng;
use ikod_core::{AnchorStrategy, Model, ModelConfig, Prompt};

pub fn model(n_layers: usize, d_model: usize, max_seq: usize) -> Model {
    Model::init(ModelConfig {
        n_layers,
        n_heads: 4,
        d_model,
        d_ff: 4 * d_model,
        vocab_size: 256,
        max_seq,
        seed: 17,
    })
    .expect("valid bench config")
}

pub fn prompt(model: &Model, images: usize, tokens: usize) -> Prompt {
    let mut rng = Rng::new(5);
    let ids = (0..tokens).map(|_| 1 + rng.below(255) as u32).collect();
    Prompt::new(model, images, 3, ids)
}

/// A filled original cache with its layout and trace.
pub struct Prefilled {
    pub cache: LayeredKvCache,
    pub layout: SequenceLayout,
    pub trace: AttentionTrace,
}

pub fn prefill(model: &Model, prompt: &Prompt) -> Prefilled {
    let mut cache = model.new_cache();
    let mut layout = SequenceLayout::default();
    let mut trace = AttentionTrace::new();
    let inputs = prompt
        .image_embeddings
        .iter()
        .map(|e| (Role::Image, StepInput::Embedding(e.clone())))
        .chain(
            prompt
                .tokens
                .iter()
                .map(|&t| (Role::Other, StepInput::Token(t))),
        );
    for (role, input) in inputs {
        layout.push(role).expect("image block first");
        trace.push(
            model
                .forward_step(&mut cache, &input)
                .expect("fits max_seq")
                .attention,
        );
    }
    Prefilled {
        cache,
        layout,
        trace,
    }
}

pub fn plan(p: &Prefilled, lambda: f64) -> MergePlan {
    let scores = layer_scores(&p.trace, &p.layout).expect("complete trace");
    MergePlan::build(
        &scores,
        lambda,
        AnchorStrategy::LowAttention,
        &mut Rng::new(0),
    )
    .expect("valid plan")
}

pub fn merged(p: &Prefilled, lambda: f64) -> LayeredKvCache {
    merge_cache(&p.cache, &plan(p, lambda), &p.layout)
        .expect("plan fits cache")
        .kv
}
