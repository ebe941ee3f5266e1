//! Deterministic decoder-only toy transformer.
//!
//! Each layer is plain residual attention followed by a residual ReLU
//! feed-forward block (no normalisation). Inputs carry sinusoidal absolute
//! positions, so cached keys already encode where they came from and
//! averaged keys inherit a blend of those positions.
//!
//! Two evaluation routes exist: incremental decoding against a
//! [`LayeredKvCache`] and a batch causal pass ([`Model::forward_full`]) used
//! as its oracle.

mod cache;
mod checkpoint;
mod layout;
mod trace;

use serde::{Deserialize, Serialize};

use crate::error::{IkodError, Result};
use crate::numerics::{dot, softmax, Matrix, Rng};

pub use cache::{HeadKv, LayeredKvCache};
pub use layout::{Role, SequenceLayout};
pub use trace::{AttentionTrace, LayerHeadRows};

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(IkodError::Config(format!("{name} must be at least 1")));
        }
        if self.vocab_size < 2 {
            return Err(IkodError::Config("vocab_size must be at least 2".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(IkodError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size > TokenId::MAX as usize {
            return Err(IkodError::Config(
                "vocab_size exceeds token id range".into(),
            ));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Uniform weight half-width, `1 / sqrt(d_model)`.
    pub fn init_scale(&self) -> f64 {
        1.0 / (self.d_model as f64).sqrt()
    }
}

/// Weights of one transformer block. Projections are `d_model x d_model`;
/// the feed-forward pair is `d_model x d_ff` and `d_ff x d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub w_ff1: Matrix,
    pub w_ff2: Matrix,
}

impl LayerWeights {
    fn matrices(&self) -> [&Matrix; 6] {
        [
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.w_ff1,
            &self.w_ff2,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    token_embedding: Matrix,
    layers: Vec<LayerWeights>,
    unembedding: Matrix,
}

/// One model input: a vocabulary token or a raw (position-free) embedding.
#[derive(Debug, Clone, PartialEq)]
pub enum StepInput {
    Token(TokenId),
    Embedding(Vec<f64>),
}

/// Result of evaluating one query position.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    /// `[layer][head][key]`, one row per attended cache entry.
    pub attention: LayerHeadRows,
}

/// Result of a batch causal pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FullOutput {
    /// `positions x vocab_size`.
    pub logits: Matrix,
    /// `[position][layer][head][key]` with `key <= position`.
    pub attention: Vec<LayerHeadRows>,
}

/// Sinusoidal absolute position encoding.
pub fn positional_encoding(pos: usize, d_model: usize) -> Vec<f64> {
    (0..d_model)
        .map(|c| {
            let pair = (c / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Synthetic stand-ins for projected image features: `count` vectors of
/// `d_model` values uniform in `[-1, 1)`, drawn in order from `Rng::new(seed)`.
pub fn make_image_embeddings(d_model: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|_| (0..d_model).map(|_| rng.symmetric(1.0)).collect())
        .collect()
}

fn relu_in_place(xs: &mut [f64]) {
    for x in xs {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn add_in_place(acc: &mut [f64], rhs: &[f64]) {
    for (a, b) in acc.iter_mut().zip(rhs) {
        *a += b;
    }
}

impl Model {
    /// Builds a model whose weights are drawn from `Rng::new(config.seed)` in
    /// the order: token embedding, then per layer `w_q, w_k, w_v, w_o, w_ff1,
    /// w_ff2`, then the unembedding.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let s = config.init_scale();
        let (d, ff) = (config.d_model, config.d_ff);
        let token_embedding = Matrix::random_uniform(config.vocab_size, d, s, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                w_q: Matrix::random_uniform(d, d, s, &mut rng),
                w_k: Matrix::random_uniform(d, d, s, &mut rng),
                w_v: Matrix::random_uniform(d, d, s, &mut rng),
                w_o: Matrix::random_uniform(d, d, s, &mut rng),
                w_ff1: Matrix::random_uniform(d, ff, s, &mut rng),
                w_ff2: Matrix::random_uniform(ff, d, s, &mut rng),
            })
            .collect();
        let unembedding = Matrix::random_uniform(d, config.vocab_size, s, &mut rng);
        Ok(Self {
            config,
            token_embedding,
            layers,
            unembedding,
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        token_embedding: Matrix,
        layers: Vec<LayerWeights>,
        unembedding: Matrix,
    ) -> Self {
        Self {
            config,
            token_embedding,
            layers,
            unembedding,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn token_embedding(&self) -> &Matrix {
        &self.token_embedding
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn unembedding(&self) -> &Matrix {
        &self.unembedding
    }

    /// All weight matrices in initialisation order.
    pub fn weight_matrices(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.token_embedding];
        for layer in &self.layers {
            out.extend(layer.matrices());
        }
        out.push(&self.unembedding);
        out
    }

    pub fn new_cache(&self) -> LayeredKvCache {
        LayeredKvCache::new(
            self.config.n_layers,
            self.config.n_heads,
            self.config.d_head(),
            self.config.max_seq,
        )
    }

    pub fn make_image_embeddings(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        make_image_embeddings(self.config.d_model, count, seed)
    }

    /// Input vector for `input` placed at absolute position `position`.
    pub fn embed(&self, input: &StepInput, position: usize) -> Result<Vec<f64>> {
        let d = self.config.d_model;
        let mut x = match input {
            StepInput::Token(t) => {
                let t = *t as usize;
                if t >= self.config.vocab_size {
                    return Err(IkodError::InvalidParameter(format!(
                        "token id {t} outside vocabulary of {}",
                        self.config.vocab_size
                    )));
                }
                self.token_embedding.row(t).to_vec()
            }
            StepInput::Embedding(e) => {
                if e.len() != d {
                    return Err(IkodError::SizeMismatch(e.len(), d));
                }
                e.clone()
            }
        };
        add_in_place(&mut x, &positional_encoding(position, d));
        Ok(x)
    }

    /// Embeds `input` at the next cache position, appends its keys and values
    /// and returns next-token logits plus its attention rows.
    pub fn forward_step(
        &self,
        cache: &mut LayeredKvCache,
        input: &StepInput,
    ) -> Result<StepOutput> {
        cache.check_capacity()?;
        let x = self.embed(input, cache.len())?;
        self.forward_embedded(cache, x)
    }

    /// Like [`Model::forward_step`] for an already embedded (positioned) input.
    pub fn forward_embedded(&self, cache: &mut LayeredKvCache, x: Vec<f64>) -> Result<StepOutput> {
        self.check_cache_geometry(cache)?;
        cache.check_capacity()?;
        if x.len() != self.config.d_model {
            return Err(IkodError::SizeMismatch(x.len(), self.config.d_model));
        }
        let mut h = x;
        let mut attention = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let q = layer.w_q.left_mul(&h)?;
            let k = layer.w_k.left_mul(&h)?;
            let v = layer.w_v.left_mul(&h)?;
            cache.push_layer_row(i, &k, &v);
            let (z, rows) = self.attend(&q, cache.layer(i));
            h = self.finish_layer(layer, h, &z)?;
            attention.push(rows);
        }
        Ok(StepOutput {
            logits: self.unembedding.left_mul(&h)?,
            attention,
        })
    }

    /// Evaluates a positioned query against `cache` without appending to it.
    ///
    /// The cache must already hold a row for the query token itself. With
    /// the cache produced by [`Model::forward_embedded`] for the same input,
    /// this reproduces that call's output bit for bit.
    pub fn forward_query(&self, cache: &LayeredKvCache, x: &[f64]) -> Result<StepOutput> {
        self.check_cache_geometry(cache)?;
        if cache.is_empty() {
            return Err(IkodError::Empty("query cache"));
        }
        if x.len() != self.config.d_model {
            return Err(IkodError::SizeMismatch(x.len(), self.config.d_model));
        }
        let mut h = x.to_vec();
        let mut attention = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let q = layer.w_q.left_mul(&h)?;
            let (z, rows) = self.attend(&q, cache.layer(i));
            h = self.finish_layer(layer, h, &z)?;
            attention.push(rows);
        }
        Ok(StepOutput {
            logits: self.unembedding.left_mul(&h)?,
            attention,
        })
    }

    /// Batch causal evaluation of a whole sequence starting at position 0.
    pub fn forward_full(&self, inputs: &[StepInput]) -> Result<FullOutput> {
        let n = inputs.len();
        if n > self.config.max_seq {
            return Err(IkodError::Capacity {
                len: n,
                max_seq: self.config.max_seq,
            });
        }
        let rows = inputs
            .iter()
            .enumerate()
            .map(|(pos, inp)| self.embed(inp, pos))
            .collect::<Result<Vec<_>>>()?;
        let mut x = if n == 0 {
            Matrix::zeros(0, self.config.d_model)
        } else {
            Matrix::from_rows(&rows)?
        };
        let (n_heads, dh) = (self.config.n_heads, self.config.d_head());
        let scale = (dh as f64).sqrt();
        let mut attention = vec![Vec::with_capacity(self.layers.len()); n];

        for layer in &self.layers {
            let q = x.matmul(&layer.w_q)?;
            let k = x.matmul(&layer.w_k)?;
            let v = x.matmul(&layer.w_v)?;
            let mut z = Matrix::zeros(n, self.config.d_model);
            let mut layer_rows = vec![Vec::with_capacity(n_heads); n];
            for head in 0..n_heads {
                let cols = head * dh..(head + 1) * dh;
                for (p, rows) in layer_rows.iter_mut().enumerate() {
                    let qp = &q.row(p)[cols.clone()];
                    let logits: Vec<f64> = (0..=p)
                        .map(|m| dot(qp, &k.row(m)[cols.clone()]) / scale)
                        .collect();
                    let weights = softmax(&logits);
                    let zp = &mut z.row_mut(p)[cols.clone()];
                    for (m, w) in weights.iter().enumerate() {
                        for (o, vv) in zp.iter_mut().zip(&v.row(m)[cols.clone()]) {
                            *o += w * vv;
                        }
                    }
                    rows.push(weights);
                }
            }
            for (p, rows) in layer_rows.into_iter().enumerate() {
                attention[p].push(rows);
            }
            let mut h1 = z.matmul(&layer.w_o)?;
            for (a, b) in h1.data_mut().iter_mut().zip(x.data()) {
                *a += b;
            }
            let mut f = h1.matmul(&layer.w_ff1)?;
            relu_in_place(f.data_mut());
            let mut out = f.matmul(&layer.w_ff2)?;
            for (a, b) in out.data_mut().iter_mut().zip(h1.data()) {
                *a += b;
            }
            x = out;
        }
        Ok(FullOutput {
            logits: x.matmul(&self.unembedding)?,
            attention,
        })
    }

    fn check_cache_geometry(&self, cache: &LayeredKvCache) -> Result<()> {
        if cache.n_layers() != self.config.n_layers
            || cache.n_heads() != self.config.n_heads
            || cache.d_head() != self.config.d_head()
        {
            return Err(IkodError::Config(format!(
                "cache geometry {}x{}x{} does not match model {}x{}x{}",
                cache.n_layers(),
                cache.n_heads(),
                cache.d_head(),
                self.config.n_layers,
                self.config.n_heads,
                self.config.d_head()
            )));
        }
        Ok(())
    }

    /// Multi-head attention of one query over a layer's cached rows.
    fn attend(&self, q: &[f64], heads: &[HeadKv]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let dh = self.config.d_head();
        let scale = (dh as f64).sqrt();
        let mut z = vec![0.0; self.config.d_model];
        let mut rows = Vec::with_capacity(heads.len());
        for (j, head) in heads.iter().enumerate() {
            let qj = &q[j * dh..(j + 1) * dh];
            let logits: Vec<f64> = head.keys.iter().map(|k| dot(qj, k) / scale).collect();
            let weights = softmax(&logits);
            let zj = &mut z[j * dh..(j + 1) * dh];
            for (w, v) in weights.iter().zip(&head.values) {
                for (o, vv) in zj.iter_mut().zip(v) {
                    *o += w * vv;
                }
            }
            rows.push(weights);
        }
        (z, rows)
    }

    /// Output projection, residual, then residual ReLU feed-forward.
    fn finish_layer(&self, layer: &LayerWeights, h: Vec<f64>, z: &[f64]) -> Result<Vec<f64>> {
        let mut h1 = layer.w_o.left_mul(z)?;
        add_in_place(&mut h1, &h);
        let mut f = layer.w_ff1.left_mul(&h1)?;
        relu_in_place(&mut f);
        let mut out = layer.w_ff2.left_mul(&f)?;
        add_in_place(&mut out, &h1);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 11,
            max_seq: 32,
            seed: 3,
        }
    }

    #[test]
    fn config_validation() {
        let cfg = small_config();
        assert_eq!(cfg.d_head(), 4);
        assert!(cfg.validate().is_ok());
        for bad in [
            ModelConfig {
                max_seq: 0,
                ..small_config()
            },
            ModelConfig {
                d_model: 0,
                ..small_config()
            },
            ModelConfig {
                n_heads: 3,
                ..small_config()
            },
            ModelConfig {
                vocab_size: 1,
                ..small_config()
            },
        ] {
            assert!(matches!(Model::init(bad), Err(IkodError::Config(_))));
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(small_config()).unwrap();
        let b = Model::init(small_config()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = Model::init(ModelConfig {
            seed: 4,
            ..small_config()
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn first_embedding_entry_follows_generator() {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 4,
            d_ff: 4,
            vocab_size: 2,
            max_seq: 4,
            seed: 42,
        };
        let model = Model::init(cfg).unwrap();
        // SplitMix64(42) first uniform 0.7415648787718233 mapped to [-0.5, 0.5).
        assert_eq!(model.token_embedding().get(0, 0), 0.2415648787718233);
    }

    #[test]
    fn image_embeddings_share_prefix() {
        let a = make_image_embeddings(6, 3, 9);
        let b = make_image_embeddings(6, 5, 9);
        assert_eq!(a.len(), 3);
        assert_eq!(&b[..3], &a[..]);
        assert!(make_image_embeddings(6, 0, 9).is_empty());
        assert!(a.iter().flatten().all(|v| (-1.0..1.0).contains(v)));
    }

    #[test]
    fn first_step_attends_to_itself() {
        let model = Model::init(small_config()).unwrap();
        let mut cache = model.new_cache();
        let out = model
            .forward_step(&mut cache, &StepInput::Token(1))
            .unwrap();
        for layer in &out.attention {
            for row in layer {
                assert_eq!(row, &vec![1.0]);
            }
        }
        assert_eq!(cache.len(), 1);
        assert!(cache.is_consistent());
    }

    #[test]
    fn capacity_error() {
        let model = Model::init(ModelConfig {
            max_seq: 2,
            ..small_config()
        })
        .unwrap();
        let mut cache = model.new_cache();
        model
            .forward_step(&mut cache, &StepInput::Token(1))
            .unwrap();
        model
            .forward_step(&mut cache, &StepInput::Token(2))
            .unwrap();
        let err = model
            .forward_step(&mut cache, &StepInput::Token(3))
            .unwrap_err();
        assert!(err.is_capacity());
        assert!(model
            .forward_full(&vec![StepInput::Token(1); 3])
            .unwrap_err()
            .is_capacity());
    }

    #[test]
    fn single_input_full_matches_step() {
        let model = Model::init(small_config()).unwrap();
        let mut cache = model.new_cache();
        let step = model
            .forward_step(&mut cache, &StepInput::Token(5))
            .unwrap();
        let full = model.forward_full(&[StepInput::Token(5)]).unwrap();
        assert_eq!(full.logits.row(0), step.logits.as_slice());
    }

    #[test]
    fn forward_query_reproduces_step() {
        let model = Model::init(small_config()).unwrap();
        let mut cache = model.new_cache();
        for t in [1, 4, 2] {
            model
                .forward_step(&mut cache, &StepInput::Token(t))
                .unwrap();
        }
        let x = model.embed(&StepInput::Token(7), cache.len()).unwrap();
        let step = model.forward_embedded(&mut cache, x.clone()).unwrap();
        let query = model.forward_query(&cache, &x).unwrap();
        assert_eq!(step, query);
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = Model::init(small_config()).unwrap();
        let mut cache = model.new_cache();
        assert!(model
            .forward_step(&mut cache, &StepInput::Token(11))
            .is_err());
        assert!(model
            .forward_step(&mut cache, &StepInput::Embedding(vec![0.0; 3]))
            .is_err());
    }
}
