//! Flat `key = value` run configuration shared by every subcommand.
//!
//! One file drives model shape, ablation flags, bucketing, and the
//! optimizer schedule; command-line flags override individual keys so
//! sweep scripts never have to rewrite files.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Recognized keys, in canonical emission order.
pub const CONFIG_KEYS: [&str; 17] = [
    "d_node",
    "d_graph",
    "depth",
    "lambda",
    "d_hidden",
    "cs",
    "cf",
    "td",
    "sim_floor",
    "tau",
    "seed",
    "lr",
    "batch_size",
    "folds",
    "max_epochs",
    "patience_lr",
    "patience_stop",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected `key = value`, got {text:?}")]
    MalformedLine { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for {key}: {message}")]
    BadValue {
        line: usize,
        key: String,
        message: String,
    },
}

/// Everything a run needs: model shape, training schedule, bucket
/// width. The single seed lives in [`TrainConfig`] and drives parameter
/// initialization, shuffling, and splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tau: i64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            tau: 7,
        }
    }
}

impl RunConfig {
    /// Parse a config file body: defaults overlaid with one `key =
    /// value` assignment per line. `#` starts a comment; blank lines
    /// are skipped.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::MalformedLine {
                    line,
                    text: raw.to_string(),
                });
            };
            config.set_at_line(key.trim(), value.trim(), line)?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Assign one key, as either a config line or a CLI override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.set_at_line(key, value, 0)
    }

    fn set_at_line(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        fn parse_as<T: std::str::FromStr>(
            key: &str,
            value: &str,
            line: usize,
        ) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e: T::Err| ConfigError::BadValue {
                line,
                key: key.to_string(),
                message: e.to_string(),
            })
        }
        match key {
            "d_node" => self.model.d_node = parse_as(key, value, line)?,
            "d_graph" => self.model.d_graph = parse_as(key, value, line)?,
            "depth" => self.model.depth = parse_as(key, value, line)?,
            "lambda" => self.model.lambda = parse_as(key, value, line)?,
            "d_hidden" => self.model.d_hidden = parse_as(key, value, line)?,
            "cs" => self.model.use_code_similarity = parse_as(key, value, line)?,
            "cf" => self.model.use_frequency = parse_as(key, value, line)?,
            "td" => self.model.use_time_decay = parse_as(key, value, line)?,
            "sim_floor" => self.model.sim_floor = parse_as(key, value, line)?,
            "tau" => self.tau = parse_as(key, value, line)?,
            "seed" => self.train.seed = parse_as(key, value, line)?,
            "lr" => self.train.lr = parse_as(key, value, line)?,
            "batch_size" => self.train.batch_size = parse_as(key, value, line)?,
            "folds" => self.train.folds = parse_as(key, value, line)?,
            "max_epochs" => self.train.max_epochs = parse_as(key, value, line)?,
            "patience_lr" => self.train.patience_lr = parse_as(key, value, line)?,
            "patience_stop" => self.train.patience_stop = parse_as(key, value, line)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "d_node" => self.model.d_node.to_string(),
            "d_graph" => self.model.d_graph.to_string(),
            "depth" => self.model.depth.to_string(),
            "lambda" => self.model.lambda.to_string(),
            "d_hidden" => self.model.d_hidden.to_string(),
            "cs" => self.model.use_code_similarity.to_string(),
            "cf" => self.model.use_frequency.to_string(),
            "td" => self.model.use_time_decay.to_string(),
            "sim_floor" => self.model.sim_floor.to_string(),
            "tau" => self.tau.to_string(),
            "seed" => self.train.seed.to_string(),
            "lr" => self.train.lr.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "folds" => self.train.folds.to_string(),
            "max_epochs" => self.train.max_epochs.to_string(),
            "patience_lr" => self.train.patience_lr.to_string(),
            "patience_stop" => self.train.patience_stop.to_string(),
            _ => unreachable!("get only called with CONFIG_KEYS entries"),
        }
    }

    /// Emit every key in canonical order. `Display` for `f64` is
    /// shortest-round-trip, so `parse(to_text(c)) == c` for any config
    /// whose remaining fields are defaults.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            out.push_str(&format!("{key} = {}\n", self.get(key)));
        }
        out
    }
}
