//! Analytic FLOPs model for original decoding and the extra merged-cache pass.
//!
//! One decoder layer over `n` positions of width `d` costs `24nd^2 + 4n^2d`.
//! The merged pass runs over `n_hat = (n - l) + lambda * l` positions, where
//! `l` is the text length subject to merging.

use serde::{Deserialize, Serialize};

use crate::error::{IkodError, Result};
use crate::kv_merge::{anchor_count, validate_anchor_ratio, PROTECTED};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostInputs {
    pub layers: usize,
    pub n: usize,
    pub d: usize,
    pub l: usize,
    pub lambda: f64,
}

impl CostInputs {
    pub fn new(layers: usize, n: usize, d: usize, l: usize, lambda: f64) -> Result<Self> {
        let inputs = Self {
            layers,
            n,
            d,
            l,
            lambda,
        };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.n == 0 || self.d == 0 || self.l == 0 {
            return Err(IkodError::InvalidParameter(
                "layers, n, d and l must all be positive".into(),
            ));
        }
        if self.l >= self.n {
            return Err(IkodError::InvalidParameter(format!(
                "text length {} must be below sequence length {}",
                self.l, self.n
            )));
        }
        validate_anchor_ratio(self.lambda)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub original: f64,
    pub ikod: f64,
    pub exact_g: f64,
    pub closed_g: f64,
}

fn per_layer(n: f64, d: f64) -> f64 {
    24.0 * n * d * d + 4.0 * n * n * d
}

/// `layers * (24nd^2 + 4n^2d)` in floating point.
pub fn original_flops(layers: usize, n: usize, d: usize) -> Result<f64> {
    if layers == 0 || n == 0 || d == 0 {
        return Err(IkodError::InvalidParameter(
            "layers, n and d must be positive".into(),
        ));
    }
    Ok(layers as f64 * per_layer(n as f64, d as f64))
}

/// Integer count; `None` on overflow.
pub fn original_flops_exact(layers: usize, n: usize, d: usize) -> Option<u128> {
    let (layers, n, d) = (layers as u128, n as u128, d as u128);
    let a = 24u128.checked_mul(n)?.checked_mul(d)?.checked_mul(d)?;
    let b = 4u128.checked_mul(n)?.checked_mul(n)?.checked_mul(d)?;
    layers.checked_mul(a.checked_add(b)?)
}

/// Real-valued compressed length `n + (lambda - 1) * l`.
pub fn compressed_len(n: usize, l: usize, lambda: f64) -> Result<f64> {
    if l > n {
        return Err(IkodError::InvalidParameter(format!(
            "text length {l} exceeds {n}"
        )));
    }
    validate_anchor_ratio(lambda)?;
    Ok(n as f64 + (lambda - 1.0) * l as f64)
}

/// Length of the cache actually produced by merging: non-text rows, one row
/// per anchor and the two protected rows. Texts too short to merge keep `n`.
pub fn compressed_len_merged(n: usize, l: usize, lambda: f64) -> Result<usize> {
    if l > n {
        return Err(IkodError::InvalidParameter(format!(
            "text length {l} exceeds {n}"
        )));
    }
    validate_anchor_ratio(lambda)?;
    if l < PROTECTED + 1 {
        return Ok(n);
    }
    Ok(n - l + anchor_count(l, lambda)? + PROTECTED)
}

/// Cost of the extra pass divided by the cost of the original pass.
pub fn growth_rate_exact(inputs: &CostInputs) -> Result<f64> {
    inputs.validate()?;
    let n_hat = compressed_len(inputs.n, inputs.l, inputs.lambda)?;
    let d = inputs.d as f64;
    Ok(per_layer(n_hat, d) / per_layer(inputs.n as f64, d))
}

/// `1 - c(2n - c + 6d) / (6nd + n^2)` with `c = (1 - lambda) l`.
pub fn growth_rate_closed_form(n: usize, d: usize, l: usize, lambda: f64) -> Result<f64> {
    CostInputs::new(1, n, d, l, lambda)?;
    let (n, d) = (n as f64, d as f64);
    let c = (1.0 - lambda) * l as f64;
    Ok(1.0 - c * (2.0 * n - c + 6.0 * d) / (6.0 * n * d + n * n))
}

pub fn cost_report(inputs: &CostInputs) -> Result<CostReport> {
    inputs.validate()?;
    let original = original_flops(inputs.layers, inputs.n, inputs.d)?;
    let exact_g = growth_rate_exact(inputs)?;
    Ok(CostReport {
        original,
        ikod: original * (1.0 + exact_g),
        exact_g,
        closed_g: growth_rate_closed_form(inputs.n, inputs.d, inputs.l, inputs.lambda)?,
    })
}
