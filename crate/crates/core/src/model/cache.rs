use serde::{Deserialize, Serialize};

use crate::error::{IkodError, Result};

/// Key and value rows of one attention head.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadKv {
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

impl HeadKv {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// Per-layer, per-head key/value rows. All heads of all layers hold the same
/// number of rows once a step completes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayeredKvCache {
    n_heads: usize,
    d_head: usize,
    max_seq: usize,
    layers: Vec<Vec<HeadKv>>,
}

impl LayeredKvCache {
    pub fn new(n_layers: usize, n_heads: usize, d_head: usize, max_seq: usize) -> Self {
        Self {
            n_heads,
            d_head,
            max_seq,
            layers: vec![vec![HeadKv::default(); n_heads]; n_layers],
        }
    }

    /// Empty cache with the same geometry.
    pub fn empty_like(&self) -> Self {
        Self::new(self.n_layers(), self.n_heads, self.d_head, self.max_seq)
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn max_seq(&self) -> usize {
        self.max_seq
    }

    /// Rows held by layer 0 (every layer matches between steps).
    pub fn len(&self) -> usize {
        self.layer_len(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer_len(&self, layer: usize) -> usize {
        self.layers
            .get(layer)
            .and_then(|heads| heads.first())
            .map_or(0, HeadKv::len)
    }

    pub fn layer(&self, layer: usize) -> &[HeadKv] {
        &self.layers[layer]
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadKv {
        &self.layers[layer][head]
    }

    pub fn check_capacity(&self) -> Result<()> {
        if self.len() >= self.max_seq {
            return Err(IkodError::Capacity {
                len: self.len(),
                max_seq: self.max_seq,
            });
        }
        Ok(())
    }

    /// Appends full-width (`n_heads * d_head`) key and value vectors to one
    /// layer, split across heads.
    pub fn push_layer_row(&mut self, layer: usize, key: &[f64], value: &[f64]) {
        let d = self.d_head;
        for (h, head) in self.layers[layer].iter_mut().enumerate() {
            head.keys.push(key[h * d..(h + 1) * d].to_vec());
            head.values.push(value[h * d..(h + 1) * d].to_vec());
        }
    }

    pub fn push_head_row(&mut self, layer: usize, head: usize, key: Vec<f64>, value: Vec<f64>) {
        let slot = &mut self.layers[layer][head];
        slot.keys.push(key);
        slot.values.push(value);
    }

    /// True when every layer and head holds the same number of rows.
    pub fn is_consistent(&self) -> bool {
        let len = self.len();
        self.layers
            .iter()
            .flatten()
            .all(|h| h.keys.len() == len && h.values.len() == len)
    }
}
