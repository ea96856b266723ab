//! Service configuration, loaded from TOML and validated before anything
//! starts.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use medbrain_core::kb_store::{documents_from_records, load_offline_corpus, parse_disease_db, KbError};
use medbrain_core::llm_gateway::{CompletionBackend, GatewayError, RemoteBackend, ScriptedBackend};
use medbrain_core::{Brain, Document, GenerationParams, KnowledgeSourceConfig, RetrievalConfig};

/// Disease records compiled into the binary, used when no database file is
/// configured.
pub const DEFAULT_CORPUS: [&str; 3] = [
    include_str!("../../../fixtures/disease_db.txt"),
    include_str!("../../../fixtures/monkeypox_db.txt"),
    include_str!("../../../fixtures/rett_db.txt"),
];

/// Scripted rules compiled into the binary, used when the scripted backend
/// has no rules file.
pub const DEFAULT_RULES: [&str; 3] = [
    include_str!("../../../fixtures/mpox.rules"),
    include_str!("../../../fixtures/otitis.rules"),
    include_str!("../../../fixtures/daybue.rules"),
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Syntax { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("knowledge base: {0}")]
    Corpus(#[from] KbError),
    #[error("backend: {0}")]
    Backend(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    /// Rules files are merged in order; none means the built-in rules.
    Scripted {
        #[serde(default)]
        rules: Vec<PathBuf>,
    },
    /// OpenAI-compatible chat endpoint. The key comes from the environment.
    Remote { endpoint: String, model: String },
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Scripted { rules: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    pub sources: KnowledgeSourceConfig,
    pub retrieval: RetrievalConfig,
    pub backend: BackendConfig,
    pub generation: GenerationParams,
    pub session_dir: PathBuf,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            sources: KnowledgeSourceConfig::default(),
            retrieval: RetrievalConfig::default(),
            backend: BackendConfig::default(),
            generation: GenerationParams::default(),
            session_dir: PathBuf::from("sessions"),
        }
    }
}

impl ServiceConfig {
    /// Reads a TOML file. Relative paths inside it are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: ServiceConfig = toml::from_str(&text).map_err(|e| ConfigError::Syntax {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.sources.offline_db_paths.iter_mut().for_each(fix);
        if let BackendConfig::Scripted { rules } = &mut self.backend {
            rules.iter_mut().for_each(fix);
        }
        fix(&mut self.session_dir);
    }

    pub fn listen_addr(&self) -> Result<SocketAddr, ConfigError> {
        self.listen
            .parse()
            .map_err(|e| ConfigError::Invalid(format!("listen address `{}`: {e}", self.listen)))
    }

    /// Checks everything that can be checked without binding or calling out.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.listen_addr()?;
        self.retrieval.validate().map_err(ConfigError::Invalid)?;
        self.sources.validate()?;
        for p in &self.sources.offline_db_paths {
            if !p.is_file() {
                return Err(ConfigError::Invalid(format!("database file {} not found", p.display())));
            }
        }
        match &self.backend {
            BackendConfig::Scripted { rules } => {
                for p in rules {
                    if !p.is_file() {
                        return Err(ConfigError::Invalid(format!("rules file {} not found", p.display())));
                    }
                }
            }
            BackendConfig::Remote { endpoint, model } => {
                if endpoint.trim().is_empty() || model.trim().is_empty() {
                    return Err(ConfigError::Invalid("remote backend needs endpoint and model".into()));
                }
            }
        }
        if self.generation.max_new_tokens == 0 || self.generation.timeout.is_zero() {
            return Err(ConfigError::Invalid(
                "generation max_new_tokens and timeout must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn load_corpus(&self) -> Result<Vec<Document>, ConfigError> {
        if !self.sources.offline_db_paths.is_empty() {
            return Ok(load_offline_corpus(&self.sources)?);
        }
        let mut records = Vec::new();
        for text in DEFAULT_CORPUS {
            records.extend(parse_disease_db(text)?);
        }
        Ok(documents_from_records(&records)?)
    }

    pub fn build_backend(&self) -> Result<Arc<dyn CompletionBackend>, ConfigError> {
        Ok(match &self.backend {
            BackendConfig::Scripted { rules } if rules.is_empty() => Arc::new(builtin_rules()?),
            BackendConfig::Scripted { rules } => {
                let mut merged = ScriptedBackend::new(Vec::new(), None);
                for p in rules {
                    merged = merged.merge(ScriptedBackend::from_file(p)?);
                }
                Arc::new(merged)
            }
            BackendConfig::Remote { endpoint, model } => Arc::new(RemoteBackend::new(endpoint, model)),
        })
    }

    /// Validates and assembles the answering engine.
    pub fn build_brain(&self) -> Result<Brain, ConfigError> {
        self.validate()?;
        let brain = Brain::new(self.load_corpus()?, self.build_backend()?)
            .with_retrieval(self.retrieval)
            .with_params(self.generation.clone())
            .with_sources(self.sources.clone())?;
        Ok(brain)
    }
}

pub fn builtin_rules() -> Result<ScriptedBackend, GatewayError> {
    let mut merged = ScriptedBackend::new(Vec::new(), None);
    for text in DEFAULT_RULES {
        merged = merged.merge(ScriptedBackend::from_toml_str(text)?);
    }
    Ok(merged)
}
