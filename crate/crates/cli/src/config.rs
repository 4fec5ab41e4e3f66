//! Pipeline configuration: a JSON file whose relative paths resolve against
//! the file's directory, plus environment overrides for the HTTP backend.

use std::path::{Path, PathBuf};

use ctevidence_core::agent::{AgentError, RunConfig};
use ctevidence_core::llm::HttpConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const ENV_ENDPOINT: &str = "CTEVIDENCE_ENDPOINT";
pub const ENV_AUTH_TOKEN: &str = "CTEVIDENCE_AUTH_TOKEN";
pub const ENV_TIMEOUT: &str = "CTEVIDENCE_TIMEOUT_SECS";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {field}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        field: String,
        message: String,
    },
    #[error("invalid config: {field}: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    /// Replays a JSONL fixture file.
    Scripted {
        fixture: PathBuf,
    },
    Http(HttpConfig),
}

impl BackendConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            BackendConfig::Scripted { .. } => "scripted",
            BackendConfig::Http(_) => "http",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub url: String,
    #[serde(default = "half")]
    pub threshold: f64,
    #[serde(default = "sixty")]
    pub timeout_secs: f64,
}

fn half() -> f64 {
    0.5
}

fn sixty() -> f64 {
    60.0
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Tool registry; the bundled 86-dimension registry when absent.
    #[serde(default)]
    pub registry: Option<PathBuf>,
    #[serde(default)]
    pub index: Option<PathBuf>,
    /// Label lexicon; the bundled lexicon when absent.
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
    #[serde(default)]
    pub prompt_sets: Vec<PathBuf>,
    #[serde(default)]
    pub backend: Option<BackendConfig>,
    /// Remote label classifier; the rule-based deriver when absent.
    #[serde(default)]
    pub classifier: Option<ClassifierConfig>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub cohort_manifest: Option<PathBuf>,
    #[serde(default)]
    pub query: Option<String>,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default = "one")]
    pub jobs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config is valid")
    }
}

impl PipelineConfig {
    /// SHA-256 of the canonical JSON form with the auth token removed.
    pub fn digest(&self) -> String {
        let mut redacted = self.clone();
        if let Some(BackendConfig::Http(h)) = &mut redacted.backend {
            h.auth_token = None;
        }
        let json = serde_json::to_vec(&redacted).expect("config serializes");
        format!("{:x}", Sha256::digest(json))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.run.validate().map_err(|e| match e {
            AgentError::InvalidConfig { field, reason } => invalid(format!("run.{field}"), reason),
            other => invalid("run", other.to_string()),
        })?;
        if self.jobs == 0 {
            return Err(invalid("jobs", "must be at least 1"));
        }
        let exists = |field: String, p: &Path| {
            if p.is_file() {
                Ok(())
            } else {
                Err(invalid(field, format!("file not found: {}", p.display())))
            }
        };
        for (field, p) in [
            ("registry", &self.registry),
            ("index", &self.index),
            ("lexicon", &self.lexicon),
            ("cohort_manifest", &self.cohort_manifest),
        ] {
            if let Some(p) = p {
                exists(field.to_string(), p)?;
            }
        }
        for (i, p) in self.prompt_sets.iter().enumerate() {
            exists(format!("prompt_sets[{i}]"), p)?;
        }
        match &self.backend {
            Some(BackendConfig::Scripted { fixture }) => exists("backend.fixture".into(), fixture)?,
            Some(BackendConfig::Http(h)) => {
                if !(h.base_url.starts_with("http://") || h.base_url.starts_with("https://")) {
                    return Err(invalid(
                        "backend.base_url",
                        "must start with http:// or https://",
                    ));
                }
                if !(h.timeout_secs > 0.0 && h.timeout_secs.is_finite()) {
                    return Err(invalid("backend.timeout_secs", "must be positive"));
                }
            }
            None => {}
        }
        if let Some(c) = &self.classifier {
            if !(0.0..=1.0).contains(&c.threshold) {
                return Err(invalid("classifier.threshold", "must lie in [0, 1]"));
            }
            if !(c.timeout_secs > 0.0 && c.timeout_secs.is_finite()) {
                return Err(invalid("classifier.timeout_secs", "must be positive"));
            }
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.registry,
            &mut self.index,
            &mut self.lexicon,
            &mut self.output_dir,
            &mut self.cohort_manifest,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        self.prompt_sets.iter_mut().for_each(fix);
        if let Some(BackendConfig::Scripted { fixture }) = &mut self.backend {
            fix(fixture);
        }
    }

    /// Endpoint, auth token and timeout from the environment replace the
    /// HTTP backend's values. A scripted backend is left untouched.
    fn apply_env(&mut self, env: &dyn Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        let Some(BackendConfig::Http(h)) = &mut self.backend else {
            return Ok(());
        };
        if let Some(url) = env(ENV_ENDPOINT) {
            h.base_url = url;
        }
        if let Some(token) = env(ENV_AUTH_TOKEN) {
            h.auth_token = Some(token);
        }
        if let Some(t) = env(ENV_TIMEOUT) {
            h.timeout_secs = t.trim().parse().map_err(|_| {
                invalid(format!("env.{ENV_TIMEOUT}"), format!("not a number: '{t}'"))
            })?;
        }
        Ok(())
    }
}

/// Parse and validate `text` as if read from `path`.
pub fn parse_config(
    text: &str,
    path: &Path,
    env: &dyn Fn(&str) -> Option<String>,
) -> Result<PipelineConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let mut config: PipelineConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        ConfigError::Parse {
            path: path.to_path_buf(),
            line: inner.line(),
            column: inner.column(),
            field,
            message: inner.to_string(),
        }
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    config.resolve_paths(base);
    config.apply_env(env)?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<PipelineConfig, ConfigError> {
    load_config_with_env(path, &|k| std::env::var(k).ok())
}

pub fn load_config_with_env(
    path: &Path,
    env: &dyn Fn(&str) -> Option<String>,
) -> Result<PipelineConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text, path, env)
}
