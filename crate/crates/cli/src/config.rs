//! Run configuration: a TOML file with `[model]`, `[train]`, `[grow]`,
//! `[decode]`, `[data]` and `[run]` tables, every field optional.
//!
//! Precedence, lowest first: built-in defaults, the config file, then
//! command-line flags. The master seed additionally falls back to the
//! `DEPTHGROW_SEED` environment variable when neither a flag nor the file sets it.

use std::fs;
use std::path::{Path, PathBuf};

use depthgrow_core::data::{SyntheticTaskSpec, TaskKind, TokenizerMode};
use depthgrow_core::decoding::{RerankConfig, SearchConfig};
use depthgrow_core::{GrowOptions, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "DEPTHGROW_SEED";
pub const DEFAULT_SEED: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrowSection {
    pub zero_init_output_projections: bool,
    pub train_output_projection: bool,
    /// Stage-2 step budget; `None` reuses `train.max_steps`.
    pub max_steps: Option<u64>,
}

impl Default for GrowSection {
    fn default() -> Self {
        let o = GrowOptions::default();
        GrowSection {
            zero_init_output_projections: o.zero_init_output_projections,
            train_output_projection: o.train_output_projection,
            max_steps: None,
        }
    }
}

impl GrowSection {
    pub fn options(&self) -> GrowOptions {
        GrowOptions {
            zero_init_output_projections: self.zero_init_output_projections,
            train_output_projection: self.train_output_projection,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub beam: usize,
    /// Generated tokens, EOS included; unset means `2·|src| + 8`.
    pub max_len: Option<usize>,
    pub length_penalty: f64,
    pub weight_shallow: f64,
    pub weight_deep: f64,
    pub length_normalize: bool,
}

impl Default for DecodeSection {
    fn default() -> Self {
        let (s, r) = (SearchConfig::default(), RerankConfig::default());
        DecodeSection {
            beam: s.beam,
            max_len: s.max_len,
            length_penalty: s.length_penalty,
            weight_shallow: r.weight_shallow,
            weight_deep: r.weight_deep,
            length_normalize: r.length_normalize,
        }
    }
}

impl DecodeSection {
    pub fn search(&self) -> SearchConfig {
        SearchConfig {
            beam: self.beam,
            max_len: self.max_len,
            length_penalty: self.length_penalty,
        }
    }

    pub fn rerank(&self) -> RerankConfig {
        RerankConfig {
            weight_shallow: self.weight_shallow,
            weight_deep: self.weight_deep,
            length_normalize: self.length_normalize,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Directory holding `train.{src,tgt}`, `valid.{src,tgt}` and optionally `vocab.txt`.
    pub dir: Option<PathBuf>,
    pub tokenizer: TokenizerMode,
    /// Held-out pairs used for validation during training; 0 keeps all.
    pub valid_limit: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub synthetic: SyntheticTaskSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dir: None,
            tokenizer: TokenizerMode::Whitespace,
            valid_limit: 0,
            n_train: 20_000,
            n_valid: 500,
            n_test: 1_000,
            synthetic: SyntheticTaskSpec {
                kind: TaskKind::NoisyCopy,
                vocab_size: 32,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Master seed for initialization and batching.
    pub seed: Option<u64>,
    pub deterministic: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: None,
            deterministic: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub grow: GrowSection,
    pub decode: DecodeSection,
    pub data: DataSection,
    pub run: RunSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Defaults overlaid with `path` when given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => Self::parse(&fs::read_to_string(p).map_err(CliError::io(p))?),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Resolves the master seed (flag, then file, then environment, then
    /// default) and propagates it into `train.seed`.
    pub fn apply_seed(&mut self, flag: Option<u64>) -> Result<u64> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(v.trim().parse::<u64>().map_err(|_| {
                CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
            })?),
            Err(_) => None,
        };
        let seed = flag.or(self.run.seed).or(env).unwrap_or(DEFAULT_SEED);
        self.run.seed = Some(seed);
        self.train.seed = seed;
        Ok(seed)
    }

    pub fn seed(&self) -> u64 {
        self.run.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.synthetic.validate()?;
        if self.decode.beam == 0 {
            return Err(CliError::Config("decode.beam must be at least 1".into()));
        }
        Ok(())
    }
}
