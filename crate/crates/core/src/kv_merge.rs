//! Image-attention-guided key/value merging.
//!
//! For every layer the text tokens (prompt plus generated) are scored by
//! their mean-over-heads image attention. `K = max(1, floor(lambda (T-2)))`
//! anchors are picked from the merge domain `0..=T-3` (text-relative
//! indices); every domain position joins the bucket of its nearest anchor,
//! ties going left, and each bucket's keys and values are averaged into one
//! row. The last two text positions are protected and copied verbatim, as
//! are all image rows.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attn_analysis::image_attention;
use crate::error::{IkodError, Result};
use crate::model::{AttentionTrace, LayeredKvCache, SequenceLayout};
use crate::numerics::Rng;

/// Number of trailing text positions that are never merged.
pub const PROTECTED: usize = 2;

/// Per-layer image-attention score of each text token, `[layer][text index]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    layers: Vec<Vec<f64>>,
}

impl LayerScores {
    pub fn new(layers: Vec<Vec<f64>>) -> Result<Self> {
        let t = layers.first().map_or(0, Vec::len);
        if layers.iter().any(|l| l.len() != t) {
            return Err(IkodError::InvalidParameter("ragged layer scores".into()));
        }
        Ok(Self { layers })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Text length `T`.
    pub fn text_len(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn layer(&self, layer: usize) -> &[f64] {
        &self.layers[layer]
    }
}

/// `S_t^i`: mean over heads of each text token's image attention, taken from
/// the attention row recorded when that token was the query.
pub fn layer_scores(trace: &AttentionTrace, layout: &SequenceLayout) -> Result<LayerScores> {
    let start = layout.text_start();
    let positions = start..layout.len();
    let n_layers = trace.n_layers();
    let mut layers = vec![Vec::with_capacity(positions.len()); n_layers];
    for pos in positions {
        let rows = trace.position(pos).ok_or(IkodError::IncompleteTrace(pos))?;
        if rows.len() != n_layers {
            return Err(IkodError::IncompleteTrace(pos));
        }
        for (layer, heads) in rows.iter().enumerate() {
            if heads.is_empty() {
                return Err(IkodError::IncompleteTrace(pos));
            }
            let mut sum = 0.0;
            for row in heads {
                sum += image_attention(row, layout)?;
            }
            layers[layer].push(sum / heads.len() as f64);
        }
    }
    LayerScores::new(layers)
}

/// How anchors are chosen among the merge domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorStrategy {
    /// The `K` tokens with the least image attention.
    LowAttention,
    /// The `K` tokens with the most image attention.
    HighAttention,
    /// `K` tokens drawn uniformly without replacement.
    Random,
}

impl fmt::Display for AnchorStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnchorStrategy::LowAttention => "low_attention",
            AnchorStrategy::HighAttention => "high_attention",
            AnchorStrategy::Random => "random",
        })
    }
}

pub fn validate_anchor_ratio(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(IkodError::InvalidParameter(format!(
            "anchor ratio {lambda} outside (0, 1]"
        )));
    }
    Ok(())
}

/// `max(1, floor(lambda * (T - 2)))`.
///
/// A 1e-9 slack absorbs representation error, so `0.29 * 100` counts as 29.
pub fn anchor_count(text_len: usize, lambda: f64) -> Result<usize> {
    validate_anchor_ratio(lambda)?;
    if text_len < PROTECTED + 1 {
        return Err(IkodError::TooShort(text_len));
    }
    let domain = text_len - PROTECTED;
    let k = (lambda * domain as f64 + 1e-9).floor() as usize;
    Ok(k.clamp(1, domain))
}

/// Picks `k` anchors from `scores[..domain]`, returned ascending.
fn select_layer_anchors(
    scores: &[f64],
    domain: usize,
    k: usize,
    strategy: AnchorStrategy,
    rng: &mut Rng,
) -> Vec<usize> {
    let mut picked: Vec<usize> = match strategy {
        AnchorStrategy::LowAttention | AnchorStrategy::HighAttention => {
            let mut idx: Vec<usize> = (0..domain).collect();
            let low = strategy == AnchorStrategy::LowAttention;
            idx.sort_by(|&a, &b| {
                let ord = scores[a].total_cmp(&scores[b]);
                let ord = if low { ord } else { ord.reverse() };
                ord.then(a.cmp(&b))
            });
            idx.truncate(k);
            idx
        }
        AnchorStrategy::Random => {
            // partial Fisher-Yates
            let mut idx: Vec<usize> = (0..domain).collect();
            for i in 0..k {
                let j = i + rng.below(domain - i);
                idx.swap(i, j);
            }
            idx.truncate(k);
            idx
        }
    };
    picked.sort_unstable();
    picked
}

/// Anchors for every layer. Random draws consume `rng` layer by layer.
pub fn select_anchors(
    scores: &LayerScores,
    lambda: f64,
    strategy: AnchorStrategy,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    let t = scores.text_len();
    let k = anchor_count(t, lambda)?;
    let domain = t - PROTECTED;
    Ok((0..scores.n_layers())
        .map(|i| select_layer_anchors(scores.layer(i), domain, k, strategy, rng))
        .collect())
}

/// Inclusive range of text-relative positions merged into one row.
/// Serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Bucket {
    pub start: usize,
    pub end: usize,
}

impl Bucket {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, pos: usize) -> bool {
        (self.start..=self.end).contains(&pos)
    }

    pub fn positions(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }
}

impl From<[usize; 2]> for Bucket {
    fn from([start, end]: [usize; 2]) -> Self {
        Self { start, end }
    }
}

impl From<Bucket> for [usize; 2] {
    fn from(b: Bucket) -> Self {
        [b.start, b.end]
    }
}

/// Midpoint partition of `0..=T-3` around sorted anchors.
///
/// Boundaries sit at `floor((t_k + t_{k+1}) / 2)`, the last bucket starts one
/// past its left boundary and ends at `T - 3`, so the buckets are disjoint
/// and cover the merge domain exactly.
pub fn build_buckets(anchors: &[usize], text_len: usize) -> Result<Vec<Bucket>> {
    if text_len < PROTECTED + 1 {
        return Err(IkodError::TooShort(text_len));
    }
    let domain = text_len - PROTECTED;
    if anchors.is_empty() {
        return Err(IkodError::Empty("anchors"));
    }
    for w in anchors.windows(2) {
        if w[0] >= w[1] {
            return Err(IkodError::InvalidParameter(format!(
                "anchors not strictly ascending: {} then {}",
                w[0], w[1]
            )));
        }
    }
    if let Some(&bad) = anchors.iter().find(|&&a| a >= domain) {
        return Err(IkodError::AnchorOutOfRange {
            anchor: bad,
            domain,
        });
    }
    let mut buckets = Vec::with_capacity(anchors.len());
    let mut start = 0;
    for (k, &anchor) in anchors.iter().enumerate() {
        let end = match anchors.get(k + 1) {
            Some(&next) => (anchor + next) / 2,
            None => domain - 1,
        };
        buckets.push(Bucket { start, end });
        start = end + 1;
    }
    Ok(buckets)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub anchors: Vec<usize>,
    pub buckets: Vec<Bucket>,
    pub protected: [usize; PROTECTED],
}

/// Anchors, buckets and protected positions of every layer for one step.
/// All positions are relative to the first text token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergePlan {
    pub text_len: usize,
    pub anchor_ratio: f64,
    pub strategy: AnchorStrategy,
    pub layers: Vec<LayerPlan>,
}

/// Debug record of one layer: `{layer, anchors, buckets, protected}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlanRecord {
    pub layer: usize,
    pub anchors: Vec<usize>,
    pub buckets: Vec<Bucket>,
    pub protected: Vec<usize>,
}

impl MergePlan {
    pub fn build(
        scores: &LayerScores,
        lambda: f64,
        strategy: AnchorStrategy,
        rng: &mut Rng,
    ) -> Result<Self> {
        let text_len = scores.text_len();
        let anchors = select_anchors(scores, lambda, strategy, rng)?;
        let protected = [text_len - 2, text_len - 1];
        let layers = anchors
            .into_iter()
            .map(|anchors| {
                let buckets = build_buckets(&anchors, text_len)?;
                Ok(LayerPlan {
                    anchors,
                    buckets,
                    protected,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            text_len,
            anchor_ratio: lambda,
            strategy,
            layers,
        })
    }

    /// Checks the partition invariants of every layer.
    pub fn validate(&self) -> Result<()> {
        if self.text_len < PROTECTED + 1 {
            return Err(IkodError::TooShort(self.text_len));
        }
        let domain = self.text_len - PROTECTED;
        for (i, layer) in self.layers.iter().enumerate() {
            let fail = |msg: String| Err(IkodError::BucketOutOfRange(format!("layer {i}: {msg}")));
            if layer.anchors.len() != layer.buckets.len() {
                return fail("anchor and bucket counts differ".into());
            }
            if layer.protected != [self.text_len - 2, self.text_len - 1] {
                return fail(format!("protected {:?}", layer.protected));
            }
            let mut next = 0;
            for (anchor, bucket) in layer.anchors.iter().zip(&layer.buckets) {
                if bucket.start != next || bucket.end < bucket.start {
                    return fail(format!("bucket {bucket:?} breaks the partition"));
                }
                if !bucket.contains(*anchor) {
                    return fail(format!("anchor {anchor} outside {bucket:?}"));
                }
                next = bucket.end + 1;
            }
            if next != domain {
                return fail(format!("buckets cover 0..{next}, domain is 0..{domain}"));
            }
        }
        Ok(())
    }

    pub fn records(&self) -> Vec<LayerPlanRecord> {
        self.layers
            .iter()
            .enumerate()
            .map(|(layer, p)| LayerPlanRecord {
                layer,
                anchors: p.anchors.clone(),
                buckets: p.buckets.clone(),
                protected: p.protected.to_vec(),
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.records())?)
    }
}

/// Merged key/value rows per layer and head.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedCache {
    pub kv: LayeredKvCache,
    pub layer_lengths: Vec<usize>,
}

/// Running mean; exact for singletons and for repeated identical rows, and
/// never leaves the componentwise min/max of its inputs.
fn mean_rows<'a>(rows: impl Iterator<Item = &'a Vec<f64>>, dim: usize) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    for (n, row) in rows.enumerate() {
        let n = (n + 1) as f64;
        for (m, x) in mean.iter_mut().zip(row) {
            *m += (x - *m) / n;
        }
    }
    mean
}

/// Builds the compressed cache: image rows, one averaged row per bucket in
/// ascending order, then the protected rows.
pub fn merge_cache(
    cache: &LayeredKvCache,
    plan: &MergePlan,
    layout: &SequenceLayout,
) -> Result<CompressedCache> {
    plan.validate()?;
    let text_start = layout.text_start();
    if cache.len() != text_start + plan.text_len {
        return Err(IkodError::BucketOutOfRange(format!(
            "cache holds {} rows, plan expects {} image + {} text",
            cache.len(),
            text_start,
            plan.text_len
        )));
    }
    if plan.layers.len() != cache.n_layers() {
        return Err(IkodError::BucketOutOfRange(format!(
            "plan has {} layers, cache has {}",
            plan.layers.len(),
            cache.n_layers()
        )));
    }
    let d = cache.d_head();
    let mut kv = cache.empty_like();
    for (i, layer_plan) in plan.layers.iter().enumerate() {
        for (j, head) in cache.layer(i).iter().enumerate() {
            for pos in 0..text_start {
                kv.push_head_row(i, j, head.keys[pos].clone(), head.values[pos].clone());
            }
            for bucket in &layer_plan.buckets {
                let abs = bucket.start + text_start..=bucket.end + text_start;
                let key = mean_rows(head.keys[abs.clone()].iter(), d);
                let value = mean_rows(head.values[abs].iter(), d);
                kv.push_head_row(i, j, key, value);
            }
            for &p in &layer_plan.protected {
                let pos = p + text_start;
                kv.push_head_row(i, j, head.keys[pos].clone(), head.values[pos].clone());
            }
        }
    }
    let layer_lengths = (0..kv.n_layers()).map(|i| kv.layer_len(i)).collect();
    Ok(CompressedCache { kv, layer_lengths })
}
