//! Run configuration: one flat TOML file with a section per concern. Every
//! output file carries `config_hash(...)` of the full parsed config so
//! artifacts can be traced back to the run that produced them.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    /// Longest span a single latent step may replace. The decoder look-ahead
    /// window is `c_max - 1`: one backbone token plus up to that many
    /// decoder-predicted tokens.
    pub c_max: usize,
    /// Positional-table capacity for the compressor and decoder; evaluation
    /// may raise `c_max` up to this without changing the parameter shapes.
    pub c_max_capacity: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 160,
            c_max: 5,
            c_max_capacity: 7,
        }
    }
}

impl ModelConfig {
    /// Decoder look-ahead steps beyond the backbone's own next token.
    pub fn lookahead(&self) -> usize {
        self.c_max - 1
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub count: usize,
    pub min_ops: usize,
    pub max_ops: usize,
    pub min_k: i64,
    pub max_k: i64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { count: 50_000, min_ops: 2, max_ops: 6, min_k: 2, max_k: 9 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Stage0Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for Stage0Config {
    fn default() -> Self {
        Stage0Config { epochs: 3, batch_size: 32, lr: 1e-4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub epochs_frozen: usize,
    pub epochs_joint: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Span selection strategy for training hybrids: "random" or "skipnum".
    pub strategy: String,
    pub schedule_start: f64,
    pub schedule_end: f64,
    pub schedule_ramp_epochs: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            epochs_frozen: 5,
            epochs_joint: 5,
            batch_size: 32,
            lr: 1e-4,
            strategy: "random".to_string(),
            schedule_start: 0.1,
            schedule_end: 0.7,
            schedule_ramp_epochs: 6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the gate loss relative to the decoder distribution loss.
    pub lambda_gate: f64,
    /// Look-ahead start positions sampled per record per epoch.
    pub positions_per_record: usize,
    /// Records sampled for the verification-refinement pass.
    pub verify_subset: usize,
    pub refine_epochs: usize,
    pub refine_lr: f64,
    /// Cap on records used per epoch; 0 means the whole split.
    pub max_records: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            epochs: 3,
            batch_size: 32,
            lr: 1e-4,
            lambda_gate: 2.0,
            positions_per_record: 6,
            verify_subset: 5_000,
            refine_epochs: 4,
            refine_lr: 1e-3,
            max_records: 20_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Stage3Config {
    pub steps: usize,
    pub groups_per_step: usize,
    pub group_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
    pub adv_eps: f64,
    pub lr: f64,
    /// Gate threshold used during on-policy rollouts.
    pub gamma: f64,
    pub max_new_tokens: usize,
    /// Stop once the rolling mean reward exceeds the starting mean by this
    /// relative gain; 0 disables early stopping.
    pub early_stop_gain: f64,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Stage3Config {
            steps: 2_000,
            groups_per_step: 2,
            group_size: 8,
            alpha: 1.0,
            beta: 0.01,
            temperature: 1.0,
            adv_eps: 1e-6,
            lr: 1e-5,
            gamma: 0.0,
            max_new_tokens: 96,
            early_stop_gain: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub gamma: f64,
    pub max_new_tokens: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { gamma: 0.0, max_new_tokens: 96 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub stage0: Stage0Config,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
        let cfg: RunConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        if m.d_model == 0 || m.n_heads == 0 || m.d_model % m.n_heads != 0 {
            return Err(ConfigError::Invalid(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                m.d_model, m.n_heads
            )));
        }
        if m.c_max < 2 {
            return Err(ConfigError::Invalid(format!("c_max {} must be at least 2", m.c_max)));
        }
        if m.c_max > m.c_max_capacity {
            return Err(ConfigError::Invalid(format!(
                "c_max {} exceeds c_max_capacity {}",
                m.c_max, m.c_max_capacity
            )));
        }
        if self.data.min_ops < 1 || self.data.min_ops > self.data.max_ops {
            return Err(ConfigError::Invalid(format!(
                "ops range [{}, {}] is invalid",
                self.data.min_ops, self.data.max_ops
            )));
        }
        if self.data.min_k < 2 || self.data.max_k > 9 || self.data.min_k > self.data.max_k {
            return Err(ConfigError::Invalid(format!(
                "operand range [{}, {}] must sit inside [2, 9]",
                self.data.min_k, self.data.max_k
            )));
        }
        if !(self.stage1.schedule_start >= 0.0
            && self.stage1.schedule_end <= 1.0
            && self.stage1.schedule_start <= self.stage1.schedule_end)
        {
            return Err(ConfigError::Invalid(format!(
                "coverage schedule [{}, {}] must be an increasing range inside [0, 1]",
                self.stage1.schedule_start, self.stage1.schedule_end
            )));
        }
        if self.stage3.group_size < 2 {
            return Err(ConfigError::Invalid(format!(
                "group_size {} must be at least 2",
                self.stage3.group_size
            )));
        }
        if let Err(e) = self.stage1.strategy.parse::<crate::hybrid::SpanStrategy>() {
            return Err(ConfigError::Invalid(e));
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// FNV-1a over the canonical JSON form, as a 16-hex-digit tag.
pub fn config_hash(cfg: &RunConfig) -> String {
    let canon = serde_json::to_string(cfg).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in canon.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        // partial file: unspecified keys take defaults
        let partial: RunConfig = toml::from_str("[model]\nd_model = 64\nn_heads = 2\n").unwrap();
        assert_eq!(partial.model.d_model, 64);
        assert_eq!(partial.model.n_layers, 4);
    }

    #[test]
    fn unknown_key_rejected() {
        let r: Result<RunConfig, _> = toml::from_str("[model]\nddd_model = 64\n");
        assert!(r.is_err());
    }

    #[test]
    fn invalid_ranges_rejected() {
        let mut cfg = RunConfig::default();
        cfg.model.c_max = 9;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.data.min_k = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.model.d_model = 130;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.seed = 1;
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
