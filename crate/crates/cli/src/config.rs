//! JSON configuration files.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ikod_core::{AnchorStrategy, DecodePolicy, ModelConfig, TokenId};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub image_count: usize,
    /// Seed of the synthetic image embeddings.
    #[serde(default)]
    pub seed: u64,
    pub prompt_tokens: Vec<TokenId>,
    #[serde(default)]
    pub policy: DecodePolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.policy.validate()?;
        if self.prompt_tokens.is_empty() {
            return Err(CliError::Usage("prompt_tokens must not be empty".into()));
        }
        if let Some(t) = self
            .prompt_tokens
            .iter()
            .find(|&&t| t as usize >= self.model.vocab_size)
        {
            return Err(CliError::Usage(format!(
                "prompt token {t} outside vocabulary of {}",
                self.model.vocab_size
            )));
        }
        let prefix = self.image_count + self.prompt_tokens.len();
        if prefix > self.model.max_seq {
            return Err(CliError::Usage(format!(
                "{} image and {} prompt positions exceed max_seq {}",
                self.image_count,
                self.prompt_tokens.len(),
                self.model.max_seq
            )));
        }
        Ok(())
    }

    /// Output directory from the flag, else from the config.
    pub fn resolve_out(&self, flag: Option<&Path>) -> Result<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .ok_or_else(|| {
                CliError::Usage("no output directory: pass --out or set output_dir".into())
            })
    }
}

/// Grid axes; a missing axis uses the base policy value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub lambda: Option<Vec<f64>>,
    pub alpha: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
    pub strategy: Option<Vec<AnchorStrategy>>,
}

/// Token ids that count as object mentions, and the ones actually present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub object_tokens: BTreeSet<TokenId>,
    pub present: BTreeSet<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    #[serde(flatten)]
    pub run: RunConfig,
    #[serde(default)]
    pub grid: Grid,
    #[serde(default)]
    pub ground_truth: Option<GroundTruth>,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}
