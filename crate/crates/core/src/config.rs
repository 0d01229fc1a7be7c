//! Runtime configuration loaded from TOML. Every key has a default, so an
//! empty file (or no file) yields a working offline setup backed by the
//! mock embedding provider.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub llm: LlmConfig,
    pub embedding: EmbeddingConfig,
    pub retrieval: RetrievalConfig,
    pub server: ServerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    /// Base URL of an OpenAI-compatible chat completion API.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub temperature: f64,
    pub timeout_secs: u64,
    /// Transport retries per call (HTTP errors, timeouts).
    pub max_retries: u32,
    /// Maximum concurrent in-flight calls.
    pub concurrency: usize,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            temperature: 0.0,
            timeout_secs: 120,
            max_retries: 2,
            concurrency: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingProviderKind {
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub provider: EmbeddingProviderKind,
    /// Vector length; the remote model must return this many values.
    pub dim: usize,
    /// Hash seed of the mock provider.
    pub seed: u64,
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub concurrency: usize,
    /// On-disk response cache for the remote provider.
    pub cache_dir: Option<PathBuf>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            provider: EmbeddingProviderKind::Mock,
            dim: 256,
            seed: 0x5eed,
            base_url: "https://api.openai.com/v1".into(),
            model: "text-embedding-3-small".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 30,
            max_retries: 2,
            concurrency: 4,
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Relevance at or above which a fact counts toward the session reward.
    pub relevance_threshold: f64,
    /// Field matches below this cosine similarity are ignored.
    pub similarity_floor: f64,
    /// Fields matched per sub-query.
    pub top_k: usize,
    /// Re-prompts after a SQL statement fails validation or execution.
    pub sql_repairs: u32,
    /// Re-prompts after an unparsable structured response.
    pub parse_repairs: u32,
    /// Sub-query pipelines run concurrently within one expansion.
    pub parallel_subqueries: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            relevance_threshold: 0.5,
            similarity_floor: 0.1,
            top_k: 3,
            sql_repairs: 2,
            parse_repairs: 2,
            parallel_subqueries: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: String,
    pub port: u16,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { bind: "127.0.0.1".into(), port: 8080 }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Digest of the settings that influence retrieval results.
    pub fn digest(&self) -> String {
        let relevant = serde_json::json!({
            "embedding": {
                "provider": self.embedding.provider,
                "dim": self.embedding.dim,
                "seed": self.embedding.seed,
                "model": self.embedding.model,
            },
            "retrieval": self.retrieval,
        });
        hex::encode(Sha256::digest(relevant.to_string().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn partial_override() {
        let c = Config::from_toml("[retrieval]\nrelevance_threshold = 0.7\n[server]\nport = 9000\n").unwrap();
        assert_eq!(c.retrieval.relevance_threshold, 0.7);
        assert_eq!(c.retrieval.top_k, 3);
        assert_eq!(c.server.port, 9000);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Config::from_toml("[retrieval]\nbogus = 1\n").is_err());
    }

    #[test]
    fn digest_ignores_server() {
        let mut c = Config::default();
        let d = c.digest();
        c.server.port = 1;
        assert_eq!(c.digest(), d);
        c.retrieval.top_k = 5;
        assert_ne!(c.digest(), d);
    }
}
