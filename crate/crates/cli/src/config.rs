//! File form of [`RunConfig`]: a JSON object with optional sections
//! `model`, `peft`, `loss`, `data`, `train` and `augment`. Every field has a
//! default and unknown keys are rejected.

use std::path::Path;

use peftlab::trainer::RunConfig;

use crate::error::{CliError, Result};

/// Environment variable that replaces the configured root seed.
pub const SEED_ENV: &str = "PEFTLAB_SEED";

pub fn parse_config(text: &str) -> std::result::Result<RunConfig, String> {
    let config: RunConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

pub fn to_json(config: &RunConfig) -> String {
    let mut s = serde_json::to_string_pretty(config).expect("config serialises");
    s.push('\n');
    s
}

/// Reads `path` (or the defaults when absent) and applies the seed override.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut config = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            parse_config(&text).map_err(|detail| CliError::Config {
                path: p.to_path_buf(),
                detail,
            })?
        }
        None => RunConfig::default(),
    };
    if let Ok(v) = std::env::var(SEED_ENV) {
        config.seed = v.trim().parse().map_err(|_| CliError::Config {
            path: SEED_ENV.into(),
            detail: format!("`{v}` is not an unsigned integer"),
        })?;
    }
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_is_valid() {
        let c = parse_config(r#"{"seed": 1}"#).unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(parse_config(r#"{"seed": 1, "lamda": 0.5}"#).is_err());
        assert!(parse_config(r#"{"loss": {"lamda": 0.5}}"#).is_err());
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.loss.lambda = 0.25;
        c.peft.lora_alpha = Some(3.0);
        c.augment.ratio = 0.3;
        let back = parse_config(&to_json(&c)).unwrap();
        assert_eq!(back, c);
        assert_eq!(to_json(&back), to_json(&c));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(parse_config(r#"{"loss": {"lambda": -1}}"#).is_err());
        assert!(parse_config(r#"{"data": {"source_train": 100, "target_train": 50}}"#).is_err());
    }
}
