//! Image-attention statistics over decoding traces.
//!
//! Covers per-row image attention, first/last 20% segment means, the
//! uniform-attention prediction `l_image / (l_image + l_others + l_gen)`,
//! a 2-D Gaussian KDE and CSV emission of the resulting tables.

use std::f64::consts::PI;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{IkodError, Result};
use crate::model::{AttentionTrace, SequenceLayout};
use crate::numerics::compensated_sum;

/// Bandwidth used for both axes unless the caller overrides it.
pub const DEFAULT_BANDWIDTH: f64 = 0.5;

/// Attention mass a row places on image positions.
///
/// The row covers the layout prefix `0..row.len()`.
pub fn image_attention(row: &[f64], layout: &SequenceLayout) -> Result<f64> {
    if row.len() > layout.len() {
        return Err(IkodError::LayoutMismatch {
            row: row.len(),
            layout: layout.len(),
        });
    }
    Ok(compensated_sum(
        row.iter()
            .enumerate()
            .filter(|(pos, _)| layout.is_image(*pos))
            .map(|(_, &w)| w),
    ))
}

/// Mean image attention over every layer and head of one query position.
pub fn mean_image_attention(rows: &[Vec<Vec<f64>>], layout: &SequenceLayout) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for layer in rows {
        for row in layer {
            sum += image_attention(row, layout)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(IkodError::Empty("attention rows"));
    }
    Ok(sum / n as f64)
}

/// Image attention of each generated token, per layer and head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAttentionStat {
    /// `[token][layer][head]`, tokens in generation order.
    cells: Vec<Vec<Vec<f64>>>,
    /// Mean over all layer/head cells of each token.
    att_avg: Vec<f64>,
}

impl ImageAttentionStat {
    pub fn from_cells(cells: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let n_layers = cells.first().map_or(0, Vec::len);
        let n_heads = cells.first().and_then(|c| c.first()).map_or(0, Vec::len);
        if n_layers == 0 || n_heads == 0 {
            if cells.is_empty() {
                return Ok(Self {
                    cells,
                    att_avg: Vec::new(),
                });
            }
            return Err(IkodError::Empty("layer/head cells"));
        }
        for token in &cells {
            if token.len() != n_layers || token.iter().any(|l| l.len() != n_heads) {
                return Err(IkodError::InvalidParameter(
                    "ragged image-attention cells".into(),
                ));
            }
        }
        let att_avg = cells
            .iter()
            .map(|token| {
                compensated_sum(token.iter().flatten().copied()) / (n_layers * n_heads) as f64
            })
            .collect();
        Ok(Self { cells, att_avg })
    }

    /// Statistics for every generated position of `layout`.
    pub fn from_trace(trace: &AttentionTrace, layout: &SequenceLayout) -> Result<Self> {
        let cells = layout
            .generated_positions()
            .map(|pos| {
                let rows = trace.position(pos).ok_or(IkodError::IncompleteTrace(pos))?;
                rows.iter()
                    .map(|layer| {
                        layer
                            .iter()
                            .map(|row| image_attention(row, layout))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_cells(cells)
    }

    /// Number of generated tokens `L`.
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.cells.first().map_or(0, Vec::len)
    }

    pub fn n_heads(&self) -> usize {
        self.cells
            .first()
            .and_then(|c| c.first())
            .map_or(0, Vec::len)
    }

    /// Zero-based token index.
    pub fn get(&self, token: usize, layer: usize, head: usize) -> f64 {
        self.cells[token][layer][head]
    }

    pub fn att_avg(&self) -> &[f64] {
        &self.att_avg
    }

    /// One row per generated token: `t / L` with 1-based `t`, and its mean
    /// image attention.
    pub fn degradation(&self) -> Vec<DegradationRow> {
        let n = self.len() as f64;
        self.att_avg
            .iter()
            .enumerate()
            .map(|(i, &att_avg)| DegradationRow {
                step: i + 1,
                relative_position: (i + 1) as f64 / n,
                att_avg,
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv_writer(out);
        for (t, token) in self.cells.iter().enumerate() {
            for (layer, heads) in token.iter().enumerate() {
                for (head, &att_image) in heads.iter().enumerate() {
                    w.serialize(AttentionRecord {
                        step: t + 1,
                        layer,
                        head,
                        att_image,
                    })?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads `(step, layer, head, att_image)` records; steps are 1-based and
    /// must be dense, every step carrying the same layer/head grid.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let mut records = Vec::new();
        for rec in reader.deserialize::<AttentionRecord>() {
            records.push(rec?);
        }
        if records.is_empty() {
            return Err(IkodError::Empty("attention trace"));
        }
        let steps = records.iter().map(|r| r.step).max().unwrap_or(0);
        let layers = records.iter().map(|r| r.layer).max().unwrap_or(0) + 1;
        let heads = records.iter().map(|r| r.head).max().unwrap_or(0) + 1;
        if records.len() != steps * layers * heads {
            return Err(IkodError::InvalidParameter(format!(
                "{} records do not form a {steps}x{layers}x{heads} grid",
                records.len()
            )));
        }
        let mut cells = vec![vec![vec![f64::NAN; heads]; layers]; steps];
        for r in records {
            if r.step == 0 {
                return Err(IkodError::InvalidParameter("steps are 1-based".into()));
            }
            let cell = &mut cells[r.step - 1][r.layer][r.head];
            if !cell.is_nan() {
                return Err(IkodError::InvalidParameter(format!(
                    "duplicate record ({}, {}, {})",
                    r.step, r.layer, r.head
                )));
            }
            if !r.att_image.is_finite() {
                return Err(IkodError::InvalidParameter("non-finite attention".into()));
            }
            *cell = r.att_image;
        }
        Self::from_cells(cells)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub att_image: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationRow {
    pub step: usize,
    pub relative_position: f64,
    pub att_avg: f64,
}

/// Mean image attention of the first and last `floor(0.2 L)` generated tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub layer: usize,
    pub head: usize,
    pub segment_len: usize,
    pub att_first: f64,
    pub att_last: f64,
}

pub fn segment_averages(
    stats: &ImageAttentionStat,
    layer: usize,
    head: usize,
) -> Result<SegmentSummary> {
    let l = stats.len();
    // floor(0.2 L) without going through floating point
    let seg = l / 5;
    if seg == 0 {
        return Err(IkodError::UndefinedSegment(l));
    }
    if layer >= stats.n_layers() || head >= stats.n_heads() {
        return Err(IkodError::InvalidParameter(format!(
            "no cell for layer {layer}, head {head}"
        )));
    }
    let mean = |range: std::ops::Range<usize>| {
        range.map(|t| stats.get(t, layer, head)).sum::<f64>() / seg as f64
    };
    Ok(SegmentSummary {
        layer,
        head,
        segment_len: seg,
        att_first: mean(0..seg),
        att_last: mean(l - seg..l),
    })
}

/// Image share of attention when the query attends uniformly to everything.
pub fn uniform_attention_prediction(l_image: usize, l_others: usize, l_gen: usize) -> Result<f64> {
    let total = l_image + l_others + l_gen;
    if total == 0 {
        return Err(IkodError::ZeroLength);
    }
    Ok(l_image as f64 / total as f64)
}

/// `(relative_position, att_avg)` for every generated token of a trace.
pub fn degradation_report(
    trace: &AttentionTrace,
    layout: &SequenceLayout,
) -> Result<Vec<DegradationRow>> {
    if layout.l_gen() == 0 {
        return Err(IkodError::Empty("generated tokens"));
    }
    Ok(ImageAttentionStat::from_trace(trace, layout)?.degradation())
}

fn gaussian_kernel_2d(u: f64, v: f64) -> f64 {
    (-0.5 * (u * u + v * v)).exp() / (2.0 * PI)
}

/// Bivariate Gaussian KDE with product bandwidths, evaluated at each grid point.
pub fn kde2d(points: &[(f64, f64)], grid: &[(f64, f64)], h_x: f64, h_y: f64) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Err(IkodError::Kde("no data points".into()));
    }
    for h in [h_x, h_y] {
        if !(h.is_finite() && h > 0.0) {
            return Err(IkodError::Kde(format!("bandwidth {h} must be positive")));
        }
    }
    let norm = 1.0 / (points.len() as f64 * h_x * h_y);
    Ok(grid
        .iter()
        .map(|&(x, y)| {
            norm * points
                .iter()
                .map(|&(xi, yi)| gaussian_kernel_2d((x - xi) / h_x, (y - yi) / h_y))
                .sum::<f64>()
        })
        .collect())
}

/// Regular `nx x ny` grid over `[x0, x1] x [y0, y1]`, x varying fastest.
pub fn regular_grid(x: (f64, f64), y: (f64, f64), nx: usize, ny: usize) -> Vec<(f64, f64)> {
    let step = |(lo, hi): (f64, f64), n: usize, i: usize| {
        if n <= 1 {
            lo
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    };
    (0..ny)
        .flat_map(|j| (0..nx).map(move |i| (step(x, nx, i), step(y, ny, j))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdeRecord {
    pub x: f64,
    pub y: f64,
    pub density: f64,
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

/// Writes any serializable rows as comma-separated, LF-terminated CSV with a header.
pub fn write_csv_rows<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
