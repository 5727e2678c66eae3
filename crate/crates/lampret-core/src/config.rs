//! Run configuration: profile defaults, flat-TOML config files, and uniform
//! key=value overrides (the CLI funnels both file entries and flags through
//! [`RunConfig::apply_kv`]).

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{AggregatorKind, Modality};
use crate::features::Limits;
use crate::nnet::ModelConfig;

pub const PROFILE_ENV: &str = "LAMPRET_PROFILE";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(ConfigError::Invalid(format!("unknown profile {other:?}"))),
        }
    }
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("key {key}: cannot parse {value:?}: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("config file {path}: {reason}")]
    File { path: String, reason: String },
}

/// Everything a run needs, flat so that a TOML file and `--set key=value`
/// flags address the same namespace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub data_dir: String,
    pub checkpoint_dir: String,
    pub aggregator: String,
    pub modality: String,

    // model shape
    pub d: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub lower_layers: usize,
    pub higher_layers: usize,
    pub vocab_size: usize,
    pub n_candidates: usize,
    pub image_size: usize,
    pub dropout: f64,
    pub grid_rows: usize,
    pub grid_cols: usize,

    // featurizer limits
    pub max_tokens: usize,
    pub max_per_block: usize,
    pub max_blocks: usize,
    pub max_images_per_block: usize,

    // objective weights
    pub lambda_mlm: f64,
    pub lambda_itm: f64,
    pub lambda_bord: f64,
    pub lambda_bmlm: f64,
    pub lambda_imgfit: f64,

    // optimization
    pub batch_size: usize,
    pub learning_rate: f64,
    pub finetune_learning_rate: f64,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    /// candidate pool size C for image suggestion evaluation
    pub eval_pool_size: usize,
}

impl RunConfig {
    /// Profile defaults. Desk keeps every acceptance check minutes-scale;
    /// paper mirrors the published hyperparameters.
    pub fn for_profile(profile: Profile) -> RunConfig {
        let base = RunConfig {
            profile,
            seed: 0,
            data_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            aggregator: AggregatorKind::Lampret.as_str().into(),
            modality: Modality::Multimodal.as_str().into(),
            d: 64,
            n_heads: 4,
            ff_mult: 4,
            lower_layers: 2,
            higher_layers: 3,
            vocab_size: 1000,
            n_candidates: 8,
            image_size: 8,
            dropout: 0.0,
            grid_rows: 16,
            grid_cols: 16,
            max_tokens: 512,
            max_per_block: 50,
            max_blocks: 50,
            max_images_per_block: 3,
            lambda_mlm: 1.0,
            lambda_itm: 1.0,
            lambda_bord: 1.0,
            lambda_bmlm: 1.0,
            lambda_imgfit: 1.0,
            batch_size: 8,
            learning_rate: 1e-3,
            finetune_learning_rate: 1e-3,
            pretrain_steps: 1000,
            finetune_steps: 300,
            eval_every: 100,
            checkpoint_every: 100,
            eval_pool_size: 16,
        };
        match profile {
            Profile::Desk => base,
            Profile::Paper => RunConfig {
                d: 768,
                n_heads: 12,
                lower_layers: 12,
                higher_layers: 3,
                vocab_size: 30522,
                n_candidates: 20,
                dropout: 0.1,
                grid_rows: 50,
                grid_cols: 50,
                batch_size: 128,
                learning_rate: 2e-5,
                finetune_learning_rate: 1e-6,
                pretrain_steps: 600_000,
                finetune_steps: 30_000,
                eval_every: 10_000,
                checkpoint_every: 10_000,
                eval_pool_size: 1000,
                ..base
            },
        }
    }

    /// Apply one `key = value` override; `value` is the raw string form.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e: T::Err| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                reason: e.to_string(),
            })
        }
        match key {
            "profile" => {
                let p: Profile = value.parse()?;
                // profile fixes the model shape unless later keys override it
                let keep = (self.seed, self.data_dir.clone(), self.checkpoint_dir.clone());
                *self = RunConfig::for_profile(p);
                (self.seed, self.data_dir, self.checkpoint_dir) = keep;
            }
            "seed" => self.seed = parse(key, value)?,
            "data_dir" => self.data_dir = value.to_string(),
            "checkpoint_dir" => self.checkpoint_dir = value.to_string(),
            "aggregator" => self.aggregator = value.to_string(),
            "modality" => self.modality = value.to_string(),
            "d" => self.d = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "ff_mult" => self.ff_mult = parse(key, value)?,
            "lower_layers" => self.lower_layers = parse(key, value)?,
            "higher_layers" => self.higher_layers = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "n_candidates" => self.n_candidates = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "grid_rows" => self.grid_rows = parse(key, value)?,
            "grid_cols" => self.grid_cols = parse(key, value)?,
            "max_tokens" => self.max_tokens = parse(key, value)?,
            "max_per_block" => self.max_per_block = parse(key, value)?,
            "max_blocks" => self.max_blocks = parse(key, value)?,
            "max_images_per_block" => self.max_images_per_block = parse(key, value)?,
            "lambda_mlm" => self.lambda_mlm = parse(key, value)?,
            "lambda_itm" => self.lambda_itm = parse(key, value)?,
            "lambda_bord" => self.lambda_bord = parse(key, value)?,
            "lambda_bmlm" => self.lambda_bmlm = parse(key, value)?,
            "lambda_imgfit" => self.lambda_imgfit = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "finetune_learning_rate" => self.finetune_learning_rate = parse(key, value)?,
            "pretrain_steps" => self.pretrain_steps = parse(key, value)?,
            "finetune_steps" => self.finetune_steps = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "eval_pool_size" => self.eval_pool_size = parse(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Load overrides from a flat TOML file onto `self`. The `profile` key,
    /// if present, is applied first so it cannot clobber sibling overrides.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            ConfigError::File { path: path.display().to_string(), reason: e.to_string() }
        })?;
        let as_string = |v: &toml::Value| -> Result<String, ConfigError> {
            Ok(match v {
                toml::Value::String(s) => s.clone(),
                toml::Value::Integer(i) => i.to_string(),
                toml::Value::Float(f) => f.to_string(),
                toml::Value::Boolean(b) => b.to_string(),
                other => {
                    return Err(ConfigError::Invalid(format!(
                        "nested value not allowed in flat config: {other}"
                    )))
                }
            })
        };
        if let Some(v) = table.get("profile") {
            self.apply_kv("profile", &as_string(v)?)?;
        }
        for (k, v) in &table {
            if k != "profile" {
                self.apply_kv(k, &as_string(v)?)?;
            }
        }
        Ok(())
    }

    /// Resolve a full config: profile from `LAMPRET_PROFILE` (default desk),
    /// then the optional file, then `key=value` override strings in order.
    pub fn resolve(
        file: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<RunConfig, ConfigError> {
        let profile = match std::env::var(PROFILE_ENV) {
            Ok(v) => v.parse()?,
            Err(_) => Profile::Desk,
        };
        let mut cfg = RunConfig::for_profile(profile);
        if let Some(path) = file {
            cfg.apply_file(path)?;
        }
        for (k, v) in overrides {
            cfg.apply_kv(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn aggregator_kind(&self) -> Result<AggregatorKind, ConfigError> {
        self.aggregator.parse().map_err(ConfigError::Invalid)
    }

    pub fn modality_kind(&self) -> Result<Modality, ConfigError> {
        self.modality.parse().map_err(ConfigError::Invalid)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            n_heads: self.n_heads,
            ff_mult: self.ff_mult,
            lower_layers: self.lower_layers,
            higher_layers: self.higher_layers,
            vocab_size: self.vocab_size,
            max_tokens: self.max_tokens,
            max_blocks: self.max_blocks,
            image_size: self.image_size,
            n_candidates: self.n_candidates,
            dropout: self.dropout,
            grid_rows: self.grid_rows,
            grid_cols: self.grid_cols,
        }
    }

    pub fn limits(&self) -> Limits {
        Limits {
            max_tokens: self.max_tokens,
            max_per_block: self.max_per_block,
            max_blocks: self.max_blocks,
            max_images_per_block: self.max_images_per_block,
        }
    }

    pub fn lambda(&self) -> [f64; 5] {
        [
            self.lambda_mlm,
            self.lambda_itm,
            self.lambda_bord,
            self.lambda_bmlm,
            self.lambda_imgfit,
        ]
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.aggregator_kind()?;
        self.modality_kind()?;
        self.model_config().validate().map_err(ConfigError::Invalid)?;
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be positive".into()));
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 {
            return Err(ConfigError::Invalid("cadences must be positive".into()));
        }
        if self.eval_pool_size < 2 {
            return Err(ConfigError::Invalid("eval_pool_size must be >= 2".into()));
        }
        for (l, name) in self.lambda().iter().zip([
            "lambda_mlm",
            "lambda_itm",
            "lambda_bord",
            "lambda_bmlm",
            "lambda_imgfit",
        ]) {
            if !l.is_finite() || *l < 0.0 {
                return Err(ConfigError::Invalid(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.learning_rate > 0.0) || !(self.finetune_learning_rate > 0.0) {
            return Err(ConfigError::Invalid("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Canonical dump used for the checkpoint config hash.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
