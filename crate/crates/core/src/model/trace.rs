use serde::{Deserialize, Serialize};

use super::layout::SequenceLayout;

/// Attention rows of one query position: `[layer][head][key]`.
pub type LayerHeadRows = Vec<Vec<Vec<f64>>>;

/// Attention rows recorded for each processed position, in position order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    positions: Vec<LayerHeadRows>,
}

impl AttentionTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, rows: LayerHeadRows) {
        self.positions.push(rows);
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, pos: usize) -> Option<&LayerHeadRows> {
        self.positions.get(pos)
    }

    pub fn row(&self, pos: usize, layer: usize, head: usize) -> Option<&[f64]> {
        self.positions
            .get(pos)?
            .get(layer)?
            .get(head)
            .map(Vec::as_slice)
    }

    pub fn n_layers(&self) -> usize {
        self.positions.first().map_or(0, Vec::len)
    }

    pub fn n_heads(&self) -> usize {
        self.positions
            .first()
            .and_then(|p| p.first())
            .map_or(0, Vec::len)
    }

    /// Trace in which every query attends equally to itself and all earlier
    /// positions.
    pub fn synthetic_uniform(layout: &SequenceLayout, n_layers: usize, n_heads: usize) -> Self {
        let positions = (0..layout.len())
            .map(|pos| {
                let row = vec![1.0 / (pos + 1) as f64; pos + 1];
                vec![vec![row; n_heads]; n_layers]
            })
            .collect();
        Self { positions }
    }
}
