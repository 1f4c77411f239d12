//! Versioned TOML run configuration. Every section is optional and falls
//! back to library defaults; unknown keys are rejected.

use std::fmt;
use std::path::Path;

use planemeta::fusion::GateConfig;
use planemeta::models::TrainConfig;
use planemeta::nn::BackboneKind;
use planemeta::preprocess::CleaningConfig;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub schema_version: u32,
    /// Single seed for the command; overrides `train.seed` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub preprocess: CleaningConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub fusion: GateConfig,
    #[serde(default)]
    pub model: ModelConfig,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            schema_version: SCHEMA_VERSION,
            seed: None,
            preprocess: CleaningConfig::default(),
            train: TrainConfig::default(),
            fusion: GateConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub pretrained: bool,
    /// Share of training volumes held out for validation when no validation manifest is given.
    pub val_fraction: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneKind::Tiny,
            pretrained: false,
            val_fraction: 0.2,
        }
    }
}

/// Malformed or invalid configuration, with the location when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub source: String,
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

impl ConfigError {
    pub fn invalid(source: &str, message: impl Into<String>) -> Self {
        ConfigError {
            source: source.to_string(),
            line: None,
            column: None,
            key: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.source)?;
        if let (Some(l), Some(c)) = (self.line, self.column) {
            write!(f, ":{l}:{c}")?;
        }
        if let Some(k) = &self.key {
            write!(f, ": key '{k}'")?;
        }
        write!(f, ": {}", self.message)
    }
}

impl std::error::Error for ConfigError {}

/// Dotted key at a byte offset: the last `[table]` header above it plus the
/// name left of `=` on its line.
fn key_at(text: &str, offset: usize) -> (usize, usize, Option<String>) {
    let offset = offset.min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let line_start = before.rfind('\n').map(|i| i + 1).unwrap_or(0);
    let column = before[line_start..].chars().count() + 1;
    let line_text = text[line_start..].lines().next().unwrap_or("");
    let table = before[..line_start]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('[') && l.ends_with(']'))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string());
    let name = line_text
        .split_once('=')
        .map(|(k, _)| k.trim().trim_matches('"').to_string())
        .filter(|k| !k.is_empty() && !k.starts_with('['));
    let key = match (table, name) {
        (Some(t), Some(n)) => Some(format!("{t}.{n}")),
        (None, Some(n)) => Some(n),
        (Some(t), None) => Some(t),
        (None, None) => None,
    };
    (line, column, key)
}

pub fn parse(text: &str, source: &str) -> Result<FileConfig, ConfigError> {
    let cfg: FileConfig = toml::from_str(text).map_err(|e| {
        let (line, column, key) = match e.span() {
            Some(span) => {
                let (l, c, k) = key_at(text, span.start);
                (Some(l), Some(c), k)
            }
            None => (None, None, None),
        };
        ConfigError {
            source: source.to_string(),
            line,
            column,
            key,
            message: e.message().trim().to_string(),
        }
    })?;
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(ConfigError {
            key: Some("schema_version".into()),
            ..ConfigError::invalid(
                source,
                format!(
                    "unsupported schema_version {}, expected {SCHEMA_VERSION}",
                    cfg.schema_version
                ),
            )
        });
    }
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<FileConfig, ConfigError> {
    let source = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::invalid(&source, e.to_string()))?;
    parse(&text, &source)
}

impl FileConfig {
    pub fn validate(&self, source: &str) -> Result<(), ConfigError> {
        let wrap = |section: &str, e: planemeta::Error| ConfigError {
            key: Some(section.to_string()),
            ..ConfigError::invalid(source, e.to_string())
        };
        self.preprocess.validate().map_err(|e| wrap("preprocess", e))?;
        self.train.validate().map_err(|e| wrap("train", e))?;
        self.fusion.validate().map_err(|e| wrap("fusion", e))?;
        if !(self.model.val_fraction > 0.0 && self.model.val_fraction < 1.0) {
            return Err(ConfigError {
                key: Some("model.val_fraction".into()),
                ..ConfigError::invalid(source, format!("{} must lie in (0, 1)", self.model.val_fraction))
            });
        }
        Ok(())
    }

    /// TOML text that parses back to `self`. Single-precision fields are
    /// written in their shortest form instead of their widened binary value.
    pub fn to_toml(&self) -> String {
        let mut value = toml::Value::try_from(self).expect("config serializes");
        for (table, key) in F32_KEYS {
            if let Some(toml::Value::Float(x)) = value.get_mut(table).and_then(|t| t.get_mut(key)) {
                *x = (*x as f32).to_string().parse().expect("f32 display parses");
            }
        }
        toml::to_string(&value).expect("config serializes")
    }
}

const F32_KEYS: [(&str, &str); 4] = [
    ("preprocess", "foreground_threshold"),
    ("preprocess", "mean_intensity_min"),
    ("preprocess", "coverage_min"),
    ("train", "learning_rate"),
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = FileConfig {
            seed: Some(7),
            ..Default::default()
        };
        let text = cfg.to_toml();
        assert!(text.contains("mean_intensity_min = 0.1\n"), "{text}");
        assert_eq!(parse(&text, "t").unwrap(), cfg);
    }

    #[test]
    fn only_schema_version_is_required() {
        assert_eq!(parse("schema_version = 1\n", "t").unwrap(), FileConfig::default());
        let e = parse("[train]\nepochs = 3\n", "t").unwrap_err();
        assert!(e.message.contains("schema_version"), "{e}");
    }

    #[test]
    fn type_errors_name_line_and_key() {
        let e = parse("schema_version = 1\n[train]\nepochs = \"ten\"\n", "cfg.toml").unwrap_err();
        assert_eq!(e.line, Some(3));
        assert_eq!(e.key.as_deref(), Some("train.epochs"));
        assert!(e.to_string().starts_with("cfg.toml:3:"), "{e}");
    }

    #[test]
    fn unknown_keys_are_errors() {
        let e = parse("schema_version = 1\n[fusion]\ntaux = 0.3\n", "t").unwrap_err();
        assert_eq!(e.line, Some(3));
        assert_eq!(e.key.as_deref(), Some("fusion.taux"));
        assert!(e.message.contains("taux"), "{e}");
        assert!(parse("schema_version = 1\n[fussion]\n", "t").is_err());
    }

    #[test]
    fn newer_schema_is_refused() {
        let e = parse("schema_version = 2\n", "t").unwrap_err();
        assert_eq!(e.key.as_deref(), Some("schema_version"));
    }

    #[test]
    fn validation_reports_section() {
        let mut cfg = FileConfig::default();
        cfg.fusion.tau = 1.5;
        assert_eq!(cfg.validate("t").unwrap_err().key.as_deref(), Some("fusion"));
    }
}
