//! Collaborative decoding over the original and the merged cache.
//!
//! Each step scores tokens with `p_orig + alpha * p_aug`, where `p_aug`
//! comes from evaluating the same query against the merged cache, and
//! zeroes every token outside `V_head = {y : p_orig(y) >= beta * max p_orig}`.

use serde::{Deserialize, Serialize};

use crate::attn_analysis::mean_image_attention;
use crate::error::{IkodError, Result};
use crate::kv_merge::{layer_scores, merge_cache, AnchorStrategy, MergePlan, PROTECTED};
use crate::model::{
    AttentionTrace, LayeredKvCache, Model, Role, SequenceLayout, StepInput, TokenId,
};
use crate::numerics::{argmax, softmax, Rng};

/// Generation stops after emitting this token.
pub const EOS_TOKEN: TokenId = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Plain decoding from `p_orig`.
    Baseline,
    /// `p_orig + alpha * p_aug` restricted to `V_head`.
    Ikod,
    /// `p_aug` alone, restricted to `V_head` of `p_orig`.
    IkodNoOd,
}

/// Token selection rule applied to the final scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseStrategy {
    Greedy,
    TopK {
        k: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        temperature: Option<f64>,
    },
    TopP {
        p: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        temperature: Option<f64>,
    },
    /// Sampling from the full distribution (top-p = 1).
    Nucleus {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        temperature: Option<f64>,
    },
}

impl BaseStrategy {
    pub fn validate(&self) -> Result<()> {
        let temperature = match *self {
            BaseStrategy::Greedy => None,
            BaseStrategy::TopK { k, temperature } => {
                if k == 0 {
                    return Err(IkodError::InvalidParameter("top-k needs k >= 1".into()));
                }
                temperature
            }
            BaseStrategy::TopP { p, temperature } => {
                if !(p > 0.0 && p <= 1.0) {
                    return Err(IkodError::InvalidParameter(format!(
                        "top-p {p} outside (0, 1]"
                    )));
                }
                temperature
            }
            BaseStrategy::Nucleus { temperature } => temperature,
        };
        if let Some(t) = temperature {
            if !(t.is_finite() && t > 0.0) {
                return Err(IkodError::InvalidParameter(format!(
                    "temperature {t} must be positive"
                )));
            }
        }
        Ok(())
    }

    fn temperature(&self) -> Option<f64> {
        match *self {
            BaseStrategy::Greedy => None,
            BaseStrategy::TopK { temperature, .. }
            | BaseStrategy::TopP { temperature, .. }
            | BaseStrategy::Nucleus { temperature } => temperature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodePolicy {
    pub mode: DecodeMode,
    pub base: BaseStrategy,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub anchor_strategy: AnchorStrategy,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub stop_at_eos: bool,
}

impl Default for DecodePolicy {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Ikod,
            base: BaseStrategy::Greedy,
            alpha: 2.0,
            beta: 0.1,
            lambda: 0.4,
            anchor_strategy: AnchorStrategy::LowAttention,
            max_new_tokens: 32,
            seed: 0,
            stop_at_eos: true,
        }
    }
}

impl DecodePolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(IkodError::InvalidParameter(format!(
                "alpha {} must be >= 0",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(IkodError::InvalidParameter(format!(
                "beta {} outside [0, 1]",
                self.beta
            )));
        }
        crate::kv_merge::validate_anchor_ratio(self.lambda)?;
        self.base.validate()
    }
}

/// `V_head`: tokens whose probability reaches `beta` times the maximum.
/// Always contains the argmax.
pub fn plausibility_mask(p_orig: &[f64], beta: f64) -> Vec<usize> {
    let max = p_orig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = beta * max;
    p_orig
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= threshold)
        .map(|(i, _)| i)
        .collect()
}

/// `p_orig + alpha * p_aug` on `v_head`, zero elsewhere.
pub fn collaborative_combine(
    p_orig: &[f64],
    p_aug: &[f64],
    alpha: f64,
    v_head: &[usize],
) -> Result<Vec<f64>> {
    if p_orig.len() != p_aug.len() {
        return Err(IkodError::SizeMismatch(p_orig.len(), p_aug.len()));
    }
    let mut out = vec![0.0; p_orig.len()];
    for &y in v_head {
        let slot = out
            .get_mut(y)
            .ok_or_else(|| IkodError::InvalidParameter(format!("v_head index {y} out of range")))?;
        *slot = p_orig[y] + alpha * p_aug[y];
    }
    Ok(out)
}

/// `p_aug` on `v_head`, zero elsewhere.
pub fn restrict_to_head(p: &[f64], v_head: &[usize]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; p.len()];
    for &y in v_head {
        let slot = out
            .get_mut(y)
            .ok_or_else(|| IkodError::InvalidParameter(format!("v_head index {y} out of range")))?;
        *slot = p[y];
    }
    Ok(out)
}

/// Picks a token from non-negative scores.
///
/// Greedy takes the argmax (lowest index on ties) and never touches `rng`.
/// Sampling strategies raise scores to `1 / temperature`, keep the positive
/// candidates in descending order (index breaks ties), truncate them (top-k
/// count or smallest prefix whose normalised mass reaches p), then draw one
/// uniform and walk the cumulative mass.
pub fn base_select(scores: &[f64], base: &BaseStrategy, rng: &mut Rng) -> Result<usize> {
    if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(IkodError::InvalidParameter(
            "scores must be finite and non-negative".into(),
        ));
    }
    if scores.iter().all(|&s| s == 0.0) {
        return Err(IkodError::AllZeroScores);
    }
    if let BaseStrategy::Greedy = base {
        return argmax(scores).ok_or(IkodError::AllZeroScores);
    }
    base.validate()?;

    let weights: Vec<f64> = match base.temperature() {
        Some(t) => scores.iter().map(|s| s.powf(1.0 / t)).collect(),
        None => scores.to_vec(),
    };
    let mut candidates: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
    if candidates.is_empty() {
        // temperature underflow: fall back to the untempered order
        return argmax(scores).ok_or(IkodError::AllZeroScores);
    }
    candidates.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));

    match *base {
        BaseStrategy::TopK { k, .. } => candidates.truncate(k),
        BaseStrategy::TopP { p, .. } if p < 1.0 => {
            let total: f64 = candidates.iter().map(|&i| weights[i]).sum();
            let mut cum = 0.0;
            let mut keep = candidates.len();
            for (n, &i) in candidates.iter().enumerate() {
                cum += weights[i] / total;
                if cum >= p {
                    keep = n + 1;
                    break;
                }
            }
            candidates.truncate(keep);
        }
        _ => {}
    }

    let total: f64 = candidates.iter().map(|&i| weights[i]).sum();
    let target = rng.next_uniform() * total;
    let mut cum = 0.0;
    for &i in &candidates {
        cum += weights[i];
        if target < cum {
            return Ok(i);
        }
    }
    Ok(*candidates.last().expect("non-empty candidates"))
}

/// Distributions behind one decoding decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDistributions {
    pub p_orig: Vec<f64>,
    pub p_aug: Vec<f64>,
    pub p_combined: Vec<f64>,
    pub v_head: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub distributions: StepDistributions,
    pub chosen: TokenId,
    /// Merge plan used for `p_aug`; absent for baseline or when the text is
    /// too short to merge.
    pub plan: Option<MergePlan>,
    /// Mean image attention of the query row on the original cache.
    pub orig_image_attention: f64,
    /// Same on the merged cache; absent for baseline.
    pub aug_image_attention: Option<f64>,
}

/// Image embeddings followed by prompt token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub image_embeddings: Vec<Vec<f64>>,
    pub tokens: Vec<TokenId>,
}

impl Prompt {
    pub fn new(model: &Model, image_count: usize, image_seed: u64, tokens: Vec<TokenId>) -> Self {
        Self {
            image_embeddings: model.make_image_embeddings(image_count, image_seed),
            tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    /// Roles of every position fed through the original cache.
    pub layout: SequenceLayout,
    /// Attention rows of every position fed through the original cache.
    pub trace: AttentionTrace,
    pub steps: Vec<StepRecord>,
    /// Original (uncompressed) cache at the end of generation.
    pub cache: LayeredKvCache,
}

impl Generation {
    /// Mean over steps of the original-path query image attention.
    pub fn mean_orig_image_attention(&self) -> Option<f64> {
        mean(self.steps.iter().map(|s| s.orig_image_attention))
    }

    /// Mean over steps of the merged-path query image attention.
    pub fn mean_aug_image_attention(&self) -> Option<f64> {
        mean(self.steps.iter().filter_map(|s| s.aug_image_attention))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

struct AugmentedPath {
    p_aug: Vec<f64>,
    plan: MergePlan,
    image_attention: f64,
}

/// Evaluates the current query against the merged view of `cache`. The
/// original cache is only read. `None` when the text is too short to merge,
/// in which case the merged cache would equal the original one.
fn augmented_path(
    model: &Model,
    cache: &LayeredKvCache,
    layout: &SequenceLayout,
    trace: &AttentionTrace,
    x: &[f64],
    policy: &DecodePolicy,
    anchor_rng: &mut Rng,
) -> Result<Option<AugmentedPath>> {
    if layout.text_len() < PROTECTED + 1 {
        return Ok(None);
    }
    let scores = layer_scores(trace, layout)?;
    let plan = MergePlan::build(&scores, policy.lambda, policy.anchor_strategy, anchor_rng)?;
    let compressed = merge_cache(cache, &plan, layout)?;
    let out = model.forward_query(&compressed.kv, x)?;
    Ok(Some(AugmentedPath {
        p_aug: softmax(&out.logits),
        plan,
        image_attention: mean_image_attention(&out.attention, layout)?,
    }))
}

/// Runs prefill and then decodes up to `policy.max_new_tokens` tokens.
pub fn ikod_generate(model: &Model, prompt: &Prompt, policy: &DecodePolicy) -> Result<Generation> {
    policy.validate()?;
    let Some((&last_prompt, head_tokens)) = prompt.tokens.split_last() else {
        return Err(IkodError::Empty("prompt tokens"));
    };

    let mut seeder = Rng::new(policy.seed);
    let mut sample_rng = Rng::new(seeder.next_u64());
    let mut anchor_rng = Rng::new(seeder.next_u64());

    let mut cache = model.new_cache();
    let mut layout = SequenceLayout::default();
    let mut trace = AttentionTrace::new();

    let prefill = prompt
        .image_embeddings
        .iter()
        .map(|e| (Role::Image, StepInput::Embedding(e.clone())))
        .chain(
            head_tokens
                .iter()
                .map(|&t| (Role::Other, StepInput::Token(t))),
        );
    for (role, input) in prefill {
        layout.push(role)?;
        let out = model.forward_step(&mut cache, &input)?;
        trace.push(out.attention);
    }

    let mut current = (Role::Other, StepInput::Token(last_prompt));
    let mut tokens = Vec::new();
    let mut steps = Vec::new();
    let vocab = model.config().vocab_size;

    while tokens.len() < policy.max_new_tokens {
        let (role, input) = &current;
        cache.check_capacity()?;
        let x = model.embed(input, cache.len())?;
        layout.push(*role)?;
        let out = model.forward_embedded(&mut cache, x.clone())?;
        let orig_image_attention = mean_image_attention(&out.attention, &layout)?;
        trace.push(out.attention);
        let p_orig = softmax(&out.logits);

        let (distributions, plan, aug_image_attention) = match policy.mode {
            DecodeMode::Baseline => (
                StepDistributions {
                    p_aug: p_orig.clone(),
                    p_combined: p_orig.clone(),
                    v_head: (0..vocab).collect(),
                    p_orig,
                },
                None,
                None,
            ),
            DecodeMode::Ikod | DecodeMode::IkodNoOd => {
                let (p_aug, plan, aug_attention) = match augmented_path(
                    model,
                    &cache,
                    &layout,
                    &trace,
                    &x,
                    policy,
                    &mut anchor_rng,
                )? {
                    Some(aug) => (aug.p_aug, Some(aug.plan), aug.image_attention),
                    None => (p_orig.clone(), None, orig_image_attention),
                };
                let v_head = plausibility_mask(&p_orig, policy.beta);
                let p_combined = if policy.mode == DecodeMode::Ikod {
                    collaborative_combine(&p_orig, &p_aug, policy.alpha, &v_head)?
                } else {
                    restrict_to_head(&p_aug, &v_head)?
                };
                (
                    StepDistributions {
                        p_orig,
                        p_aug,
                        p_combined,
                        v_head,
                    },
                    plan,
                    Some(aug_attention),
                )
            }
        };

        let chosen = match base_select(&distributions.p_combined, &policy.base, &mut sample_rng) {
            Ok(i) => i,
            // p_aug can underflow to zero across all of V_head; p_orig never does there.
            Err(IkodError::AllZeroScores) => base_select(
                &restrict_to_head(&distributions.p_orig, &distributions.v_head)?,
                &policy.base,
                &mut sample_rng,
            )?,
            Err(e) => return Err(e),
        } as TokenId;

        tokens.push(chosen);
        steps.push(StepRecord {
            distributions,
            chosen,
            plan,
            orig_image_attention,
            aug_image_attention,
        });
        if policy.stop_at_eos && chosen == EOS_TOKEN {
            break;
        }
        current = (Role::Generated, StepInput::Token(chosen));
    }

    Ok(Generation {
        tokens,
        layout,
        trace,
        steps,
        cache,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_threshold() {
        let p = [0.5, 0.3, 0.15, 0.05];
        assert_eq!(plausibility_mask(&p, 0.5), vec![0, 1]);
        assert_eq!(plausibility_mask(&p, 0.0), vec![0, 1, 2, 3]);
        assert_eq!(plausibility_mask(&p, 1.0), vec![0]);
        assert_eq!(plausibility_mask(&[0.4, 0.2, 0.4], 1.0), vec![0, 2]);
    }

    #[test]
    fn combine_hand_case() {
        let scores = collaborative_combine(&[0.6, 0.4], &[0.2, 0.8], 1.0, &[0, 1]).unwrap();
        assert!((scores[0] - 0.8).abs() < 1e-15 && (scores[1] - 1.2).abs() < 1e-15);
        assert_eq!(
            base_select(&scores, &BaseStrategy::Greedy, &mut Rng::new(0)).unwrap(),
            1
        );
    }

    #[test]
    fn combine_zeroes_outside_head() {
        let scores =
            collaborative_combine(&[0.6, 0.3, 0.1], &[0.1, 0.1, 0.8], 2.0, &[0, 1]).unwrap();
        assert_eq!(scores[2], 0.0);
        assert!(collaborative_combine(&[0.5, 0.5], &[1.0], 1.0, &[0]).is_err());
    }

    #[test]
    fn greedy_and_degenerate_top_k() {
        let s = [0.1, 0.7, 0.2];
        let mut rng = Rng::new(3);
        assert_eq!(base_select(&s, &BaseStrategy::Greedy, &mut rng).unwrap(), 1);
        for seed in 0..20 {
            let k1 = BaseStrategy::TopK {
                k: 1,
                temperature: None,
            };
            assert_eq!(base_select(&s, &k1, &mut Rng::new(seed)).unwrap(), 1);
        }
        assert!(matches!(
            base_select(&[0.0, 0.0], &BaseStrategy::Greedy, &mut rng),
            Err(IkodError::AllZeroScores)
        ));
    }

    #[test]
    fn top_p_one_samples_full_support() {
        let s = [0.25, 0.25, 0.25, 0.25];
        let base = BaseStrategy::TopP {
            p: 1.0,
            temperature: None,
        };
        let mut rng = Rng::new(11);
        let mut seen = [false; 4];
        for _ in 0..200 {
            seen[base_select(&s, &base, &mut rng).unwrap()] = true;
        }
        assert!(seen.iter().all(|&x| x));
    }

    #[test]
    fn top_p_truncates() {
        // descending mass 0.6, 0.3 reaches 0.9; token 2 is never drawn
        let s = [0.6, 0.3, 0.1];
        let base = BaseStrategy::TopP {
            p: 0.9,
            temperature: None,
        };
        let mut rng = Rng::new(5);
        for _ in 0..500 {
            assert_ne!(base_select(&s, &base, &mut rng).unwrap(), 2);
        }
    }

    #[test]
    fn sampling_never_picks_zero_scores() {
        let s = [0.0, 0.5, 0.0, 0.5];
        let base = BaseStrategy::Nucleus {
            temperature: Some(1.5),
        };
        let mut rng = Rng::new(2);
        for _ in 0..500 {
            let t = base_select(&s, &base, &mut rng).unwrap();
            assert!(t == 1 || t == 3);
        }
    }

    #[test]
    fn low_temperature_approaches_greedy() {
        let s = [0.3, 0.35, 0.35 - 1e-3];
        let base = BaseStrategy::TopK {
            k: 3,
            temperature: Some(0.01),
        };
        let mut rng = Rng::new(8);
        let hits = (0..200)
            .filter(|_| base_select(&s, &base, &mut rng).unwrap() == 1)
            .count();
        assert!(hits > 100, "{hits}");
    }

    #[test]
    fn policy_validation() {
        assert!(DecodePolicy::default().validate().is_ok());
        for bad in [
            DecodePolicy {
                alpha: -1.0,
                ..Default::default()
            },
            DecodePolicy {
                beta: 1.5,
                ..Default::default()
            },
            DecodePolicy {
                lambda: 0.0,
                ..Default::default()
            },
            DecodePolicy {
                base: BaseStrategy::TopK {
                    k: 0,
                    temperature: None,
                },
                ..Default::default()
            },
            DecodePolicy {
                base: BaseStrategy::TopP {
                    p: 0.0,
                    temperature: None,
                },
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn policy_json_defaults() {
        let p: DecodePolicy = serde_json::from_str(
            r#"{"mode":"ikod_no_od","base":{"kind":"top_k","k":50,"temperature":0.7}}"#,
        )
        .unwrap();
        assert_eq!(p.mode, DecodeMode::IkodNoOd);
        assert_eq!(
            p.base,
            BaseStrategy::TopK {
                k: 50,
                temperature: Some(0.7)
            }
        );
        assert_eq!((p.alpha, p.beta, p.lambda), (2.0, 0.1, 0.4));
    }
}
