//! The single TOML configuration file. `${VAR}` is replaced by the
//! environment variable `VAR` before parsing; API keys may instead be named
//! through `*_api_key_env` fields. Relative paths resolve against the
//! directory holding the config file. Template values starting with `@` are
//! file paths.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    ChatBackend, EmbeddingBackend, FixtureSearch, HashEmbedder, HttpChat, HttpChatConfig,
    HttpEmbedder, HttpEmbedderConfig, RetryPolicy, ScriptedChat, SearchBackend, WebSearch,
    WebSearchConfig,
};
use crate::calibration::{CalibrationFile, CalibrationModel, DEFAULT_ANOMALY_K};
use crate::critic::{Critic, CRITIC_SLOTS, DEFAULT_CRITIC_REMINDER, DEFAULT_CRITIC_TEMPLATE};
use crate::memory::abstraction::{
    ABSTRACTION_SLOTS, DEFAULT_FAILURE_TEMPLATE, DEFAULT_HISTORY_TEMPLATE,
    DEFAULT_SUCCESS_TEMPLATE, HISTORY_SLOTS,
};
use crate::memory::{
    load_store, AbstractionBackend, LlmAbstractor, MemoryStore, TemplateAbstractor,
    DEFAULT_K_PER_POOL, DEFAULT_TAU_DUP,
};
use crate::orchestrator::{
    unix_now, Deps, RunConfig, DEFAULT_DOC_TOP_K, DEFAULT_INJECTION_TEMPLATE, DEFAULT_MAX_STEPS,
    DEFAULT_POLICY_SYSTEM, DEFAULT_TOP_LOGPROBS,
};
use crate::signals::{ClusterParams, MassWeighting, DEFAULT_D_MERGE};
use crate::template::Template;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("environment variable {0} is not set")]
    MissingEnv(String),
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error("{what} file not found: {path}")]
    MissingFile { what: &'static str, path: String },
    #[error("{what}: {message}")]
    Load { what: &'static str, message: String },
}

fn d_timeout() -> f64 {
    60.0
}
fn d_retries() -> u32 {
    3
}
fn d_retry_base_ms() -> u64 {
    1000
}
fn d_concurrency() -> usize {
    8
}
fn d_hash_dim() -> usize {
    256
}
fn d_ngram() -> usize {
    3
}

/// Transport settings shared by the HTTP clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpSettings {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "d_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "d_retries")]
    pub max_retries: u32,
    #[serde(default = "d_retry_base_ms")]
    pub retry_base_ms: u64,
    #[serde(default = "d_concurrency")]
    pub max_concurrency: usize,
}

impl HttpSettings {
    fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            base_delay: Duration::from_millis(self.retry_base_ms),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChatBackendConfig {
    Http(HttpSettings),
    /// Replays rules from a JSON script file.
    Scripted { script: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingBackendConfig {
    Http {
        #[serde(flatten)]
        http: HttpSettings,
        dim: usize,
        #[serde(default)]
        max_input_chars: Option<usize>,
    },
    /// Hashed character n-grams; seeded from the top-level `seed`.
    Hash {
        #[serde(default = "d_hash_dim")]
        dim: usize,
        #[serde(default = "d_ngram")]
        ngram: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SearchBackendConfig {
    Web {
        search_endpoint: String,
        extract_endpoint: String,
        #[serde(default)]
        search_api_key_env: Option<String>,
        #[serde(default)]
        extract_api_key_env: Option<String>,
        #[serde(default = "d_timeout")]
        timeout_secs: f64,
        #[serde(default = "d_retries")]
        max_retries: u32,
        #[serde(default = "d_retry_base_ms")]
        retry_base_ms: u64,
        #[serde(default = "d_concurrency")]
        max_concurrency: usize,
    },
    /// Local corpus at `paths.fixture_corpus`.
    Fixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AbstractorKind {
    #[default]
    Llm,
    Template,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    pub policy: ChatBackendConfig,
    /// Defaults to the policy backend.
    #[serde(default)]
    pub critic: Option<ChatBackendConfig>,
    pub embedding: EmbeddingBackendConfig,
    pub search: SearchBackendConfig,
    #[serde(default)]
    pub abstractor: AbstractorKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorConfig {
    pub anomaly_k: f64,
    pub d_merge: f64,
    pub mass_weighting: MassWeighting,
    pub top_logprobs: usize,
    pub doc_top_k: usize,
    pub k_per_pool: usize,
    pub tau_dup: f64,
    pub max_steps: u32,
    pub fast_monitor_enabled: bool,
    pub slow_monitor_enabled: bool,
    pub online_memory_enabled: bool,
    pub extra_step_on_terminal_anomaly: bool,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            anomaly_k: DEFAULT_ANOMALY_K,
            d_merge: DEFAULT_D_MERGE,
            mass_weighting: MassWeighting::Uniform,
            top_logprobs: DEFAULT_TOP_LOGPROBS,
            doc_top_k: DEFAULT_DOC_TOP_K,
            k_per_pool: DEFAULT_K_PER_POOL,
            tau_dup: DEFAULT_TAU_DUP,
            max_steps: DEFAULT_MAX_STEPS,
            fast_monitor_enabled: true,
            slow_monitor_enabled: true,
            online_memory_enabled: false,
            extra_step_on_terminal_anomaly: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub calibration: Option<PathBuf>,
    pub memory: Option<PathBuf>,
    pub log_dir: Option<PathBuf>,
    pub fixture_corpus: Option<PathBuf>,
}

/// Template sources: inline text, or `@path` to read from a file. Unset
/// entries use the built-in templates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TemplatesConfig {
    pub injection: Option<String>,
    pub critic: Option<String>,
    pub critic_reminder: Option<String>,
    pub success_abstraction: Option<String>,
    pub failure_abstraction: Option<String>,
    pub history_summary: Option<String>,
    pub policy_system: Option<String>,
}

/// Template texts after `@file` resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedTemplates {
    pub injection: String,
    pub critic: String,
    pub critic_reminder: String,
    pub success_abstraction: String,
    pub failure_abstraction: String,
    pub history_summary: String,
    pub policy_system: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub seed: u64,
    pub backends: BackendsConfig,
    #[serde(default)]
    pub monitor: MonitorConfig,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub templates: TemplatesConfig,
    /// Directory relative paths were resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Replace every `${NAME}` with `lookup(NAME)`.
pub fn interpolate_env(
    text: &str,
    lookup: impl Fn(&str) -> Option<String>,
) -> Result<String, ConfigError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| ConfigError::Parse("unterminated ${ in config".into()))?;
        let name = &after[..end];
        let value = lookup(name).ok_or_else(|| ConfigError::MissingEnv(name.to_string()))?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn env_key(name: &Option<String>) -> Result<Option<String>, ConfigError> {
    match name {
        None => Ok(None),
        Some(var) => std::env::var(var)
            .map(Some)
            .map_err(|_| ConfigError::MissingEnv(var.clone())),
    }
}

fn check_http(errors: &mut Vec<String>, field: &str, h: &HttpSettings) {
    if h.endpoint.trim().is_empty() {
        errors.push(format!("{field}.endpoint: must not be empty"));
    }
    if h.model.trim().is_empty() {
        errors.push(format!("{field}.model: must not be empty"));
    }
    if !(h.timeout_secs.is_finite() && h.timeout_secs > 0.0) {
        errors.push(format!("{field}.timeout_secs: must be positive, got {}", h.timeout_secs));
    }
    if h.max_concurrency == 0 {
        errors.push(format!("{field}.max_concurrency: must be at least 1"));
    }
}

fn check_chat(errors: &mut Vec<String>, field: &str, c: &ChatBackendConfig) {
    match c {
        ChatBackendConfig::Http(h) => check_http(errors, field, h),
        ChatBackendConfig::Scripted { script } => {
            if !script.is_file() {
                errors.push(format!("{field}.script: file not found: {}", script.display()));
            }
        }
    }
}

impl Config {
    /// Parse config text. `base_dir` anchors relative paths.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let text = interpolate_env(text, |k| std::env::var(k).ok())?;
        let mut config: Config =
            toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.base_dir = base_dir.to_path_buf();
        config.resolve_paths();
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn resolve_paths(&mut self) {
        let base = self.base_dir.clone();
        for p in [
            &mut self.paths.calibration,
            &mut self.paths.memory,
            &mut self.paths.log_dir,
            &mut self.paths.fixture_corpus,
        ]
        .into_iter()
        .flatten()
        {
            resolve(&base, p);
        }
        for c in [Some(&mut self.backends.policy), self.backends.critic.as_mut()]
            .into_iter()
            .flatten()
        {
            if let ChatBackendConfig::Scripted { script } = c {
                resolve(&base, script);
            }
        }
    }

    fn template_source(&self, value: &Option<String>, default: &str) -> Result<String, ConfigError> {
        match value {
            None => Ok(default.to_string()),
            Some(v) => match v.strip_prefix('@') {
                Some(file) => {
                    let mut path = PathBuf::from(file.trim());
                    resolve(&self.base_dir, &mut path);
                    std::fs::read_to_string(&path).map_err(|e| ConfigError::Io {
                        path: path.display().to_string(),
                        message: e.to_string(),
                    })
                }
                None => Ok(v.clone()),
            },
        }
    }

    pub fn templates(&self) -> Result<ResolvedTemplates, ConfigError> {
        let t = &self.templates;
        Ok(ResolvedTemplates {
            injection: self.template_source(&t.injection, DEFAULT_INJECTION_TEMPLATE)?,
            critic: self.template_source(&t.critic, DEFAULT_CRITIC_TEMPLATE)?,
            critic_reminder: self.template_source(&t.critic_reminder, DEFAULT_CRITIC_REMINDER)?,
            success_abstraction: self
                .template_source(&t.success_abstraction, DEFAULT_SUCCESS_TEMPLATE)?,
            failure_abstraction: self
                .template_source(&t.failure_abstraction, DEFAULT_FAILURE_TEMPLATE)?,
            history_summary: self.template_source(&t.history_summary, DEFAULT_HISTORY_TEMPLATE)?,
            policy_system: self.template_source(&t.policy_system, DEFAULT_POLICY_SYSTEM)?,
        })
    }

    /// Check every field and report all problems at once.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errors = Vec::new();
        let m = &self.monitor;
        if !(m.anomaly_k.is_finite() && m.anomaly_k > 0.0) {
            errors.push(format!("monitor.anomaly_k: must be > 0, got {}", m.anomaly_k));
        }
        if !(m.tau_dup > 0.0 && m.tau_dup <= 1.0) {
            errors.push(format!("monitor.tau_dup: must lie in (0, 1], got {}", m.tau_dup));
        }
        if !(m.d_merge > 0.0 && m.d_merge < 2.0) {
            errors.push(format!("monitor.d_merge: must lie in (0, 2), got {}", m.d_merge));
        }
        for (name, v) in [
            ("monitor.top_logprobs", m.top_logprobs),
            ("monitor.doc_top_k", m.doc_top_k),
            ("monitor.k_per_pool", m.k_per_pool),
            ("monitor.max_steps", m.max_steps as usize),
        ] {
            if v == 0 {
                errors.push(format!("{name}: must be at least 1"));
            }
        }

        check_chat(&mut errors, "backends.policy", &self.backends.policy);
        if let Some(c) = &self.backends.critic {
            check_chat(&mut errors, "backends.critic", c);
        }
        match &self.backends.embedding {
            EmbeddingBackendConfig::Http { http, dim, .. } => {
                check_http(&mut errors, "backends.embedding", http);
                if *dim == 0 {
                    errors.push("backends.embedding.dim: must be at least 1".into());
                }
            }
            EmbeddingBackendConfig::Hash { dim, ngram } => {
                if *dim == 0 {
                    errors.push("backends.embedding.dim: must be at least 1".into());
                }
                if *ngram == 0 {
                    errors.push("backends.embedding.ngram: must be at least 1".into());
                }
            }
        }
        match &self.backends.search {
            SearchBackendConfig::Fixture => match &self.paths.fixture_corpus {
                None => errors.push(
                    "paths.fixture_corpus: required when backends.search.kind = \"fixture\"".into(),
                ),
                Some(p) if !p.is_dir() => errors.push(format!(
                    "paths.fixture_corpus: directory not found: {}",
                    p.display()
                )),
                Some(_) => {}
            },
            SearchBackendConfig::Web {
                search_endpoint,
                extract_endpoint,
                max_concurrency,
                ..
            } => {
                if search_endpoint.trim().is_empty() {
                    errors.push("backends.search.search_endpoint: must not be empty".into());
                }
                if extract_endpoint.trim().is_empty() {
                    errors.push("backends.search.extract_endpoint: must not be empty".into());
                }
                if *max_concurrency == 0 {
                    errors.push("backends.search.max_concurrency: must be at least 1".into());
                }
            }
        }
        if m.fast_monitor_enabled && self.paths.calibration.is_none() {
            errors.push("paths.calibration: required when the fast monitor is enabled".into());
        }

        match self.templates() {
            Err(e) => errors.push(format!("templates: {e}")),
            Ok(t) => {
                let checks: [(&str, &str, &[&str], &[&str]); 5] = [
                    ("templates.injection", &t.injection, &["delta"], &["delta"]),
                    ("templates.critic", &t.critic, CRITIC_SLOTS, &["session"]),
                    (
                        "templates.success_abstraction",
                        &t.success_abstraction,
                        ABSTRACTION_SLOTS,
                        &["session"],
                    ),
                    (
                        "templates.failure_abstraction",
                        &t.failure_abstraction,
                        ABSTRACTION_SLOTS,
                        &["session"],
                    ),
                    ("templates.history_summary", &t.history_summary, HISTORY_SLOTS, &["steps"]),
                ];
                for (field, source, allowed, required) in checks {
                    if let Err(e) = Template::parse(field, source, allowed, required) {
                        errors.push(e.to_string());
                    }
                }
                if let Err(e) = Template::parse("templates.policy_system", &t.policy_system, &[], &[])
                {
                    errors.push(e.to_string());
                }
            }
        }

        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errors))
        }
    }

    pub fn run_config(&self) -> Result<RunConfig, ConfigError> {
        let t = self.templates()?;
        let policy_system = Template::parse("templates.policy_system", &t.policy_system, &[], &[])
            .map_err(|e| ConfigError::Invalid(vec![e.to_string()]))?
            .render(&[]);
        let m = &self.monitor;
        Ok(RunConfig {
            max_steps: m.max_steps,
            k_per_pool: m.k_per_pool,
            fast_monitor_enabled: m.fast_monitor_enabled,
            slow_monitor_enabled: m.slow_monitor_enabled,
            online_memory_enabled: m.online_memory_enabled,
            anomaly_k: m.anomaly_k,
            doc_top_k: m.doc_top_k,
            top_logprobs: m.top_logprobs,
            cluster: ClusterParams {
                d_merge: m.d_merge,
                mass_weighting: m.mass_weighting,
            },
            injection_template: t.injection,
            system_prompt: policy_system,
            extra_step_on_terminal_anomaly: m.extra_step_on_terminal_anomaly,
            log_dir: self.paths.log_dir.clone(),
        })
    }

    fn chat_backend(&self, c: &ChatBackendConfig) -> Result<Arc<dyn ChatBackend>, ConfigError> {
        let load = |e: crate::backends::BackendError| ConfigError::Load {
            what: "chat backend",
            message: e.to_string(),
        };
        Ok(match c {
            ChatBackendConfig::Http(h) => Arc::new(
                HttpChat::new(HttpChatConfig {
                    endpoint: h.endpoint.clone(),
                    model: h.model.clone(),
                    api_key: env_key(&h.api_key_env)?,
                    timeout: Duration::from_secs_f64(h.timeout_secs),
                    retry: h.retry(),
                    max_concurrency: h.max_concurrency,
                })
                .map_err(load)?,
            ),
            ChatBackendConfig::Scripted { script } => {
                Arc::new(ScriptedChat::from_file(script).map_err(load)?)
            }
        })
    }

    pub fn policy_backend(&self) -> Result<Arc<dyn ChatBackend>, ConfigError> {
        self.chat_backend(&self.backends.policy)
    }

    pub fn critic_backend(&self) -> Result<Arc<dyn ChatBackend>, ConfigError> {
        match &self.backends.critic {
            Some(c) => self.chat_backend(c),
            None => self.policy_backend(),
        }
    }

    pub fn embedding_backend(&self) -> Result<Arc<dyn EmbeddingBackend>, ConfigError> {
        Ok(match &self.backends.embedding {
            EmbeddingBackendConfig::Hash { dim, ngram } => {
                Arc::new(HashEmbedder::new(*dim, *ngram, self.seed))
            }
            EmbeddingBackendConfig::Http {
                http,
                dim,
                max_input_chars,
            } => Arc::new(
                HttpEmbedder::new(HttpEmbedderConfig {
                    endpoint: http.endpoint.clone(),
                    model: http.model.clone(),
                    dim: *dim,
                    api_key: env_key(&http.api_key_env)?,
                    timeout: Duration::from_secs_f64(http.timeout_secs),
                    retry: http.retry(),
                    max_input_chars: *max_input_chars,
                    max_concurrency: http.max_concurrency,
                })
                .map_err(|e| ConfigError::Load {
                    what: "embedding backend",
                    message: e.to_string(),
                })?,
            ),
        })
    }

    pub fn search_backend(&self) -> Result<Arc<dyn SearchBackend>, ConfigError> {
        let load = |e: crate::backends::BackendError| ConfigError::Load {
            what: "search backend",
            message: e.to_string(),
        };
        Ok(match &self.backends.search {
            SearchBackendConfig::Fixture => {
                let corpus = self.paths.fixture_corpus.as_ref().ok_or_else(|| {
                    ConfigError::Invalid(vec!["paths.fixture_corpus: not set".into()])
                })?;
                Arc::new(FixtureSearch::load(corpus).map_err(load)?)
            }
            SearchBackendConfig::Web {
                search_endpoint,
                extract_endpoint,
                search_api_key_env,
                extract_api_key_env,
                timeout_secs,
                max_retries,
                retry_base_ms,
                max_concurrency,
            } => Arc::new(
                WebSearch::new(WebSearchConfig {
                    search_endpoint: search_endpoint.clone(),
                    extract_endpoint: extract_endpoint.clone(),
                    search_api_key: env_key(search_api_key_env)?,
                    extract_api_key: env_key(extract_api_key_env)?,
                    timeout: Duration::from_secs_f64(*timeout_secs),
                    retry: RetryPolicy {
                        max_retries: *max_retries,
                        base_delay: Duration::from_millis(*retry_base_ms),
                    },
                    max_concurrency: *max_concurrency,
                })
                .map_err(load)?,
            ),
        })
    }

    pub fn abstractor(
        &self,
        chat: Arc<dyn ChatBackend>,
    ) -> Result<Arc<dyn AbstractionBackend>, ConfigError> {
        Ok(match self.backends.abstractor {
            AbstractorKind::Template => Arc::new(TemplateAbstractor),
            AbstractorKind::Llm => {
                let t = self.templates()?;
                Arc::new(
                    LlmAbstractor::new(
                        chat,
                        &t.success_abstraction,
                        &t.failure_abstraction,
                        &t.history_summary,
                    )
                    .map_err(|e| ConfigError::Invalid(vec![e.to_string()]))?,
                )
            }
        })
    }

    pub fn critic(&self) -> Result<Critic, ConfigError> {
        let t = self.templates()?;
        Critic::new(&t.critic, &t.critic_reminder)
            .map_err(|e| ConfigError::Invalid(vec![e.to_string()]))
    }

    /// Load the calibration file. Missing is an error only when `required`.
    pub fn calibration(&self, required: bool) -> Result<Option<CalibrationModel>, ConfigError> {
        let Some(path) = &self.paths.calibration else {
            return if required {
                Err(ConfigError::Invalid(vec![
                    "paths.calibration: required when the fast monitor is enabled".into(),
                ]))
            } else {
                Ok(None)
            };
        };
        if !path.is_file() {
            return if required {
                Err(ConfigError::MissingFile {
                    what: "calibration",
                    path: path.display().to_string(),
                })
            } else {
                Ok(None)
            };
        }
        CalibrationFile::load(path)
            .map(|f| Some(f.model))
            .map_err(|e| ConfigError::Load {
                what: "calibration",
                message: e.to_string(),
            })
    }

    /// The configured memory store, or an empty one if the file does not exist yet.
    pub fn memory_store(&self, embedder: &dyn EmbeddingBackend) -> Result<MemoryStore, ConfigError> {
        let store = match &self.paths.memory {
            Some(p) if p.exists() => load_store(p).map_err(|e| ConfigError::Load {
                what: "memory store",
                message: e.to_string(),
            })?,
            _ => MemoryStore::new(embedder.dim(), self.monitor.tau_dup, embedder.model_id()),
        };
        if store.embed_dim() != embedder.dim() {
            return Err(ConfigError::Load {
                what: "memory store",
                message: format!(
                    "store dimension {} does not match embedder dimension {}",
                    store.embed_dim(),
                    embedder.dim()
                ),
            });
        }
        if store.embedding_model_id() != embedder.model_id() {
            log::warn!(
                "memory store was built with {} but the embedder is {}",
                store.embedding_model_id(),
                embedder.model_id()
            );
        }
        Ok(store)
    }

    /// Construct every backend and load persisted state.
    pub fn build_deps(&self) -> Result<Deps, ConfigError> {
        let policy = self.policy_backend()?;
        let critic_chat = self.critic_backend()?;
        let embedder = self.embedding_backend()?;
        let search = self.search_backend()?;
        let calibration = self.calibration(self.monitor.fast_monitor_enabled)?;
        let memory = self.memory_store(embedder.as_ref())?.into_shared();
        let abstractor = if self.monitor.online_memory_enabled {
            Some(self.abstractor(critic_chat.clone())?)
        } else {
            None
        };
        Ok(Deps {
            policy,
            critic_chat,
            embedder,
            search,
            calibration,
            memory,
            critic: self.critic()?,
            abstractor,
            clock: unix_now,
        })
    }
}
