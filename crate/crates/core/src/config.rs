//! TOML run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::act::AccuracyUnit;
use crate::dapo::DapoConfig;
use crate::policy::PolicyConfig;
use crate::reward::ModeRewardConfig;
use crate::sft::{DatasetConfig, ModePrompts, TruncationConfig};
use crate::toy::EnvConfig;
use crate::trace::{TraceFormat, Tokenizer};

/// Environment variable naming the config file used when `--config` is absent.
pub const CONFIG_ENV_VAR: &str = "EFFORT_DIAL_CONFIG";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config is not valid TOML: {0}")]
    Parse(String),
    #[error("invalid config at `{path}`: {message}")]
    Validation { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerKind {
    #[default]
    Whitespace,
    UnicodeWord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceSection {
    pub open: String,
    pub close: String,
    pub tokenizer: TokenizerKind,
}

impl Default for TraceSection {
    fn default() -> Self {
        let f = TraceFormat::default();
        Self {
            open: f.open,
            close: f.close,
            tokenizer: TokenizerKind::default(),
        }
    }
}

impl TraceSection {
    pub fn format(&self) -> TraceFormat {
        TraceFormat {
            open: self.open.clone(),
            close: self.close.clone(),
        }
    }

    pub fn tokenizer(&self) -> Tokenizer {
        match self.tokenizer {
            TokenizerKind::Whitespace => Tokenizer::Whitespace,
            TokenizerKind::UnicodeWord => Tokenizer::UnicodeWord,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftSection {
    pub balance_tolerance: f64,
    pub prompts: ModePrompts,
}

impl Default for SftSection {
    fn default() -> Self {
        Self {
            balance_tolerance: DatasetConfig::default().balance_tolerance,
            prompts: ModePrompts::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub accuracy_unit: AccuracyUnit,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub trace: TraceSection,
    pub truncation: TruncationConfig,
    pub sft: SftSection,
    pub reward: ModeRewardConfig,
    pub dapo: DapoConfig,
    pub environment: EnvConfig,
    pub policy: PolicyConfig,
    pub metrics: MetricsSection,
}

fn invalid(path: &str, err: impl ToString) -> ConfigError {
    ConfigError::Validation {
        path: path.to_string(),
        message: err.to_string(),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.trace.open.is_empty() || self.trace.close.is_empty() || self.trace.open == self.trace.close {
            return Err(invalid("trace", "open and close markers must be nonempty and distinct"));
        }
        self.truncation.validate().map_err(|e| invalid("truncation", e))?;
        self.dataset().validate().map_err(|e| invalid("sft", e))?;
        self.reward.validate().map_err(|e| invalid("reward", e))?;
        self.dapo.validate().map_err(|e| invalid("dapo", e))?;
        self.environment.validate().map_err(|e| invalid("environment", e))?;
        self.policy.validate().map_err(|e| invalid("policy", e))?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let value: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let mut cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(value)).map_err(|e| {
            let path = e.path().to_string();
            invalid(&path, e.into_inner())
        })?;
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets the root seed and the module seeds derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.dapo.seed = seed;
        self.environment.task_seed = seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    /// SHA-256 of the canonical JSON form, seed included.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("run config serializes to JSON");
        hex::encode(Sha256::digest(json))
    }

    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            truncation: self.truncation.clone(),
            prompts: self.sft.prompts.clone(),
            leak_keywords: self.reward.leak_keywords.clone(),
            balance_tolerance: self.sft.balance_tolerance,
        }
    }
}

/// Reads and validates a config file. An empty file yields all defaults.
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    RunConfig::parse(&text)
}

/// Loads `explicit`, else the file named by [`CONFIG_ENV_VAR`], else defaults.
pub fn resolve_config(explicit: Option<&Path>) -> Result<(RunConfig, Option<PathBuf>), ConfigError> {
    let path = explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(CONFIG_ENV_VAR).filter(|v| !v.is_empty()).map(PathBuf::from));
    match path {
        Some(p) => Ok((load_config(&p)?, Some(p))),
        None => Ok((RunConfig::default(), None)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!((cfg.truncation.r_med, cfg.truncation.r_low), (0.5, 0.25));
        assert_eq!((cfg.reward.alpha_high, cfg.reward.alpha_med, cfg.reward.alpha_low), (0.0, 0.5, 1.0));
        assert_eq!((cfg.dapo.eps_low, cfg.dapo.eps_high, cfg.dapo.group_size), (0.2, 0.28, 16));
        assert_eq!((cfg.dapo.warmup_steps, cfg.dapo.budget_steps), (95, 40));
    }

    #[test]
    fn ordering_violation_names_section() {
        let err = RunConfig::parse("[truncation]\nr_low = 0.6\nr_med = 0.5\n").unwrap_err();
        match err {
            ConfigError::Validation { path, .. } => assert_eq!(path, "truncation"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_rejected_with_path() {
        let err = RunConfig::parse("[reward]\nalpha_xl = 2.0\n").unwrap_err();
        match err {
            ConfigError::Validation { path, message } => {
                assert_eq!(path, "reward.alpha_xl");
                assert!(message.contains("alpha_xl"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = RunConfig::parse("[dapo]\neps_low = \"big\"\n").unwrap_err();
        assert!(matches!(err, ConfigError::Validation { ref path, .. } if path == "dapo.eps_low"), "{err:?}");
        assert!(matches!(RunConfig::parse("seed = 3\nbogus = 1"), Err(ConfigError::Validation { .. })));
    }

    #[test]
    fn syntax_errors_are_parse_errors() {
        assert!(matches!(RunConfig::parse("[dapo"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn round_trip() {
        let text = "seed = 7\n[dapo]\nlearning_rate = 12.5\n[environment.curve]\nkind = \"step\"\nthreshold = 2.0\nbelow = 0.1\nabove = 0.9\n[metrics]\naccuracy_unit = \"percent\"\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!((cfg.dapo.seed, cfg.environment.task_seed), (7, 7));
        let again = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
        assert_ne!(RunConfig::default().hash(), cfg.hash());
        assert_eq!(RunConfig::parse(&RunConfig::default().to_toml()).unwrap(), RunConfig::default());
    }

    #[test]
    fn env_var_supplies_default_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 11\n").unwrap();
        let (cfg, used) = resolve_config(Some(&p)).unwrap();
        assert_eq!((cfg.seed, used), (11, Some(p)));
        assert!(matches!(load_config(&dir.path().join("missing.toml")), Err(ConfigError::Io { .. })));
    }
}
