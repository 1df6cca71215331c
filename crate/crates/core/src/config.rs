//! Engine configuration.
//!
//! Config files are plain `key = value` lines; `#` starts a comment. Every
//! key has a default, so an absent file means defaults throughout. Unknown
//! keys are errors so typos fail loudly instead of silently falling back.

use std::path::Path;
use std::time::Duration;

use thiserror::Error;

use crate::clients::ClientConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: expected `key = value`, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("config line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("config line {line}: invalid value for {key}: {value:?}")]
    InvalidValue { line: usize, key: String, value: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Synthetic,
    Http,
}

/// Everything tunable about the engine in one place.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub backend: BackendKind,
    /// Embedding dimension D shared by every vector in the store.
    pub dim: usize,
    /// Uncertainty margin multiplier.
    pub kappa: f64,
    /// Fusion weight between visual and semantic similarity.
    pub alpha: f64,
    /// Retrieval depth.
    pub k: usize,
    /// Per-item evidence token cap.
    pub token_cap: usize,
    /// Path to a template file (one per line); empty means the built-in
    /// ensemble.
    pub templates: String,
    pub seed: u64,
    pub noise_sigma: f64,
    pub system_instruction: String,
    pub client: ClientConfig,
    pub bench: BenchSettings,
}

/// Synthetic-benchmark parameters consumed by the `eval` subcommand.
#[derive(Debug, Clone)]
pub struct BenchSettings {
    pub episodes: usize,
    pub concepts_min: usize,
    pub concepts_max: usize,
    pub distractor_rate: f64,
    pub gamma: f64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            episodes: 50,
            concepts_min: 3,
            concepts_max: 6,
            distractor_rate: 0.5,
            gamma: 0.0,
        }
    }
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Synthetic,
            dim: 64,
            kappa: 0.5,
            alpha: 0.5,
            k: 5,
            token_cap: 120,
            templates: String::new(),
            seed: 0,
            noise_sigma: 0.05,
            system_instruction: "You are an expert assistant. Use the provided evidence to \
                                 answer the question. If the evidence is insufficient, answer \
                                 conservatively."
                .to_string(),
            client: ClientConfig::default(),
            bench: BenchSettings::default(),
        }
    }
}

impl EngineConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        for (index, raw_line) in text.lines().enumerate() {
            let line_no = index + 1;
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Malformed {
                line: line_no,
                text: raw_line.to_string(),
            })?;
            let key = key.trim();
            let value = value.trim();
            let invalid = || ConfigError::InvalidValue {
                line: line_no,
                key: key.to_string(),
                value: value.to_string(),
            };
            match key {
                "backend" => {
                    config.backend = match value {
                        "synthetic" => BackendKind::Synthetic,
                        "http" => BackendKind::Http,
                        _ => return Err(invalid()),
                    }
                }
                "dim" => config.dim = value.parse().map_err(|_| invalid())?,
                "kappa" => {
                    config.kappa = value.parse().map_err(|_| invalid())?;
                    if config.kappa < 0.0 {
                        return Err(invalid());
                    }
                }
                "alpha" => {
                    config.alpha = value.parse().map_err(|_| invalid())?;
                    if !(0.0..=1.0).contains(&config.alpha) {
                        return Err(invalid());
                    }
                }
                "k" => config.k = value.parse().map_err(|_| invalid())?,
                "token_cap" => config.token_cap = value.parse().map_err(|_| invalid())?,
                "templates" => config.templates = value.to_string(),
                "seed" => config.seed = value.parse().map_err(|_| invalid())?,
                "noise_sigma" => {
                    config.noise_sigma = value.parse().map_err(|_| invalid())?;
                    if config.noise_sigma < 0.0 {
                        return Err(invalid());
                    }
                }
                "system_instruction" => config.system_instruction = value.to_string(),
                "endpoint_url" => config.client.endpoint_url = value.to_string(),
                "model_name" => config.client.model_name = value.to_string(),
                "timeout_secs" => {
                    let secs: u64 = value.parse().map_err(|_| invalid())?;
                    if secs == 0 {
                        return Err(invalid());
                    }
                    config.client.timeout = Duration::from_secs(secs);
                }
                "max_retries" => config.client.max_retries = value.parse().map_err(|_| invalid())?,
                "max_parallel" => {
                    config.client.max_parallel = value.parse().map_err(|_| invalid())?;
                    if config.client.max_parallel == 0 {
                        return Err(invalid());
                    }
                }
                "api_key_env" => config.client.api_key_env_var = value.to_string(),
                "episodes" => config.bench.episodes = value.parse().map_err(|_| invalid())?,
                "concepts_min" => {
                    config.bench.concepts_min = value.parse().map_err(|_| invalid())?
                }
                "concepts_max" => {
                    config.bench.concepts_max = value.parse().map_err(|_| invalid())?
                }
                "distractor_rate" => {
                    config.bench.distractor_rate = value.parse().map_err(|_| invalid())?;
                    if !(0.0..=1.0).contains(&config.bench.distractor_rate) {
                        return Err(invalid());
                    }
                }
                "gamma" => config.bench.gamma = value.parse().map_err(|_| invalid())?,
                _ => {
                    return Err(ConfigError::UnknownKey {
                        line: line_no,
                        key: key.to_string(),
                    })
                }
            }
        }
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_sane() {
        let config = EngineConfig::default();
        assert_eq!(config.dim, 64);
        assert_eq!(config.kappa, 0.5);
        assert_eq!(config.alpha, 0.5);
        assert_eq!(config.backend, BackendKind::Synthetic);
    }

    #[test]
    fn parses_key_value_lines_with_comments() {
        let config = EngineConfig::from_str_contents(
            "# engine settings\nbackend = http\ndim = 32\nkappa = 0.8\n\nk = 7\nendpoint_url = http://box:9000\n",
        )
        .unwrap();
        assert_eq!(config.backend, BackendKind::Http);
        assert_eq!(config.dim, 32);
        assert_eq!(config.kappa, 0.8);
        assert_eq!(config.k, 7);
        assert_eq!(config.client.endpoint_url, "http://box:9000");
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = EngineConfig::from_str_contents("kappas = 0.5\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { line: 1, .. }));
    }

    #[test]
    fn bad_values_are_errors() {
        assert!(EngineConfig::from_str_contents("kappa = -1\n").is_err());
        assert!(EngineConfig::from_str_contents("alpha = 2.0\n").is_err());
        assert!(EngineConfig::from_str_contents("dim = many\n").is_err());
        assert!(EngineConfig::from_str_contents("just a line\n").is_err());
        assert!(EngineConfig::from_str_contents("timeout_secs = 0\n").is_err());
        assert!(EngineConfig::from_str_contents("max_parallel = 0\n").is_err());
    }
}
