//! Binary checkpoint format.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic       8 bytes  "IKODCKPT"
//! version     u32      1
//! n_layers    u64
//! n_heads     u64
//! d_model     u64
//! d_ff        u64
//! vocab_size  u64
//! max_seq     u64
//! seed        u64
//! weights     f64[]    row-major, in initialisation order:
//!                      token_embedding (vocab x d_model),
//!                      per layer w_q, w_k, w_v, w_o (d_model x d_model),
//!                      w_ff1 (d_model x d_ff), w_ff2 (d_ff x d_model),
//!                      unembedding (d_model x vocab)
//! ```

use std::path::Path;

use super::{LayerWeights, Model, ModelConfig};
use crate::error::{IkodError, Result};
use crate::numerics::Matrix;

const MAGIC: &[u8; 8] = b"IKODCKPT";
const VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.offset + N;
        let slice = self
            .bytes
            .get(self.offset..end)
            .ok_or_else(|| IkodError::Checkpoint(format!("truncated at byte {}", self.offset)))?;
        self.offset = end;
        Ok(slice.try_into().expect("slice length checked"))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn count(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| IkodError::Checkpoint("count overflow".into()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| IkodError::Checkpoint("matrix size overflow".into()))?;
        if self.bytes.len().saturating_sub(self.offset) / 8 < n {
            return Err(IkodError::Checkpoint(format!(
                "truncated {rows}x{cols} matrix at byte {}",
                self.offset
            )));
        }
        let data = (0..n)
            .map(|_| Ok(f64::from_le_bytes(self.take()?)))
            .collect::<Result<Vec<_>>>()?;
        Matrix::new(rows, cols, data).map_err(|e| IkodError::Checkpoint(e.to_string()))
    }
}

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.config();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [
            c.n_layers,
            c.n_heads,
            c.d_model,
            c.d_ff,
            c.vocab_size,
            c.max_seq,
        ] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&c.seed.to_le_bytes());
        for m in self.weight_matrices() {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, offset: 0 };
        if &r.take::<8>()? != MAGIC {
            return Err(IkodError::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take()?);
        if version != VERSION {
            return Err(IkodError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let config = ModelConfig {
            n_layers: r.count()?,
            n_heads: r.count()?,
            d_model: r.count()?,
            d_ff: r.count()?,
            vocab_size: r.count()?,
            max_seq: r.count()?,
            seed: r.u64()?,
        };
        config
            .validate()
            .map_err(|e| IkodError::Checkpoint(e.to_string()))?;
        let (d, ff, vocab) = (config.d_model, config.d_ff, config.vocab_size);
        let token_embedding = r.matrix(vocab, d)?;
        let layers = (0..config.n_layers)
            .map(|_| {
                Ok(LayerWeights {
                    w_q: r.matrix(d, d)?,
                    w_k: r.matrix(d, d)?,
                    w_v: r.matrix(d, d)?,
                    w_o: r.matrix(d, d)?,
                    w_ff1: r.matrix(d, ff)?,
                    w_ff2: r.matrix(ff, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let unembedding = r.matrix(d, vocab)?;
        if r.offset != bytes.len() {
            return Err(IkodError::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.offset
            )));
        }
        Ok(Model::from_parts(
            config,
            token_embedding,
            layers,
            unembedding,
        ))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
