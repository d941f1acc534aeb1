//! TOML run configuration.
//!
//! ```toml
//! [gateway]
//! backend = "scripted"          # or "remote"
//! script = "script.json"        # scripted backend fixture
//! endpoint = "http://127.0.0.1:8000/v1/chat/completions"
//! tokenizer_endpoint = "http://127.0.0.1:8000/tokenize"
//! model = "policy"
//! api_key_env = "UR2_API_KEY"
//!
//! [retrieval]
//! corpus_path = "corpus.jsonl"  # in-process index
//! service_url = "http://127.0.0.1:8090"  # or a running retrieval service
//! top_k = 10
//! [retrieval.summarizer]
//! endpoint = "..."              # or script = "summaries.json"; neither disables it
//! [retrieval.online]
//! enabled = false
//!
//! [reward]
//! preset = "Default7B"          # Default7B | Small3B | Llama8B | McqWeak
//! warm_steps = 10
//!
//! [curriculum]
//! path = "curriculum.jsonl"
//!
//! [run]
//! seed = 0
//! group_size = 16
//! rollout_batch = 64
//! workers = 4
//! eps = 1e-8
//! out_dir = "out"
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use ur2_core::retrieval::DEFAULT_TOP_K;
use ur2_core::rewards::Preset;

use crate::gateway::{Backend, RemoteBackend, RemoteConfig, ScriptedBackend};
use crate::retrieval::client::HttpRetriever;
use crate::retrieval::online::{BingSearch, HttpFetcher, OnlineFetcher};
use crate::retrieval::{index_corpus_file, RetrievalService, Retriever, Summarizer};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    #[serde(default = "GatewayConfig::default_backend")]
    pub backend: String,
    pub script: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub tokenizer_endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key_env: Option<String>,
}

impl GatewayConfig {
    fn default_backend() -> String {
        "scripted".into()
    }
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            backend: Self::default_backend(),
            script: None,
            endpoint: None,
            tokenizer_endpoint: None,
            model: None,
            api_key_env: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummarizerConfig {
    pub endpoint: Option<String>,
    pub script: Option<PathBuf>,
    pub model: Option<String>,
    pub api_key_env: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "OnlineConfig::default_endpoint")]
    pub search_endpoint: String,
    pub api_key_env: Option<String>,
    #[serde(default = "OnlineConfig::default_k")]
    pub k: usize,
}

impl OnlineConfig {
    fn default_endpoint() -> String {
        "https://api.bing.microsoft.com/v7.0/search".into()
    }

    fn default_k() -> usize {
        3
    }
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            enabled: false,
            search_endpoint: Self::default_endpoint(),
            api_key_env: None,
            k: Self::default_k(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    pub corpus_path: Option<PathBuf>,
    pub service_url: Option<String>,
    #[serde(default = "RetrievalConfig::default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub summarizer: SummarizerConfig,
    #[serde(default)]
    pub online: OnlineConfig,
}

impl RetrievalConfig {
    fn default_top_k() -> usize {
        DEFAULT_TOP_K
    }
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            corpus_path: None,
            service_url: None,
            top_k: DEFAULT_TOP_K,
            summarizer: SummarizerConfig::default(),
            online: OnlineConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSection {
    #[serde(default = "RewardSection::default_preset")]
    pub preset: String,
    pub warm_steps: Option<u32>,
}

impl RewardSection {
    fn default_preset() -> String {
        "Default7B".into()
    }
}

impl Default for RewardSection {
    fn default() -> Self {
        RewardSection {
            preset: Self::default_preset(),
            warm_steps: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumSection {
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "RunSection::default_group_size")]
    pub group_size: usize,
    #[serde(default = "RunSection::default_rollout_batch")]
    pub rollout_batch: usize,
    pub steps: Option<usize>,
    #[serde(default = "RunSection::default_workers")]
    pub workers: usize,
    #[serde(default = "RunSection::default_eps")]
    pub eps: f64,
    #[serde(default = "RunSection::default_out_dir")]
    pub out_dir: PathBuf,
}

impl RunSection {
    fn default_group_size() -> usize {
        16
    }
    fn default_rollout_batch() -> usize {
        64
    }
    fn default_workers() -> usize {
        4
    }
    fn default_eps() -> f64 {
        1e-8
    }
    fn default_out_dir() -> PathBuf {
        PathBuf::from("out")
    }
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            group_size: Self::default_group_size(),
            rollout_batch: Self::default_rollout_batch(),
            steps: None,
            workers: Self::default_workers(),
            eps: Self::default_eps(),
            out_dir: Self::default_out_dir(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub gateway: GatewayConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub reward: RewardSection,
    #[serde(default)]
    pub curriculum: CurriculumSection,
    #[serde(default)]
    pub run: RunSection,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

fn api_key(env: &Option<String>) -> Option<String> {
    env.as_ref().and_then(|name| std::env::var(name).ok())
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.gateway.script);
        resolve(base, &mut self.retrieval.corpus_path);
        resolve(base, &mut self.retrieval.summarizer.script);
        resolve(base, &mut self.curriculum.path);
        if self.run.out_dir.is_relative() {
            self.run.out_dir = base.join(&self.run.out_dir);
        }
    }

    pub fn preset(&self) -> Result<Preset, ConfigError> {
        self.reward
            .preset
            .parse()
            .map_err(|_| invalid("reward.preset", format!("unknown preset '{}'", self.reward.preset)))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.preset()?;
        match self.gateway.backend.as_str() {
            "scripted" => {
                if self.gateway.script.is_none() {
                    return Err(invalid("gateway.script", "required for the scripted backend"));
                }
            }
            "remote" => {
                if self.gateway.endpoint.is_none() {
                    return Err(invalid("gateway.endpoint", "required for the remote backend"));
                }
            }
            other => return Err(invalid("gateway.backend", format!("unknown backend '{other}'"))),
        }
        if self.retrieval.top_k == 0 {
            return Err(invalid("retrieval.top_k", "must be at least 1"));
        }
        if self.run.group_size < 2 {
            return Err(invalid("run.group_size", "must be at least 2"));
        }
        if self.run.rollout_batch == 0 {
            return Err(invalid("run.rollout_batch", "must be at least 1"));
        }
        if self.run.workers == 0 {
            return Err(invalid("run.workers", "must be at least 1"));
        }
        if !(self.run.eps > 0.0 && self.run.eps.is_finite()) {
            return Err(invalid("run.eps", "must be positive"));
        }
        Ok(())
    }

    pub fn build_backend(&self) -> Result<Arc<dyn Backend>, ConfigError> {
        let g = &self.gateway;
        if g.backend == "remote" {
            let endpoint = g
                .endpoint
                .as_deref()
                .ok_or_else(|| invalid("gateway.endpoint", "missing"))?;
            let mut rc = RemoteConfig::new(endpoint, g.model.as_deref().unwrap_or("default"));
            rc.tokenizer_endpoint = g.tokenizer_endpoint.clone();
            rc.api_key = api_key(&g.api_key_env);
            return Ok(Arc::new(RemoteBackend::new(rc)));
        }
        let path = g
            .script
            .as_deref()
            .ok_or_else(|| invalid("gateway.script", "missing"))?;
        let b = ScriptedBackend::from_path(path).map_err(|e| invalid("gateway.script", e.to_string()))?;
        Ok(Arc::new(b))
    }

    fn build_summarizer(&self) -> Result<Option<Summarizer>, ConfigError> {
        let s = &self.retrieval.summarizer;
        if let Some(endpoint) = &s.endpoint {
            let mut rc = RemoteConfig::new(endpoint, s.model.as_deref().unwrap_or("default"));
            rc.api_key = api_key(&s.api_key_env);
            return Ok(Some(Summarizer::new(Arc::new(RemoteBackend::new(rc)))));
        }
        if let Some(path) = &s.script {
            let b = ScriptedBackend::from_path(path)
                .map_err(|e| invalid("retrieval.summarizer.script", e.to_string()))?;
            return Ok(Some(Summarizer::new(Arc::new(b))));
        }
        Ok(None)
    }

    /// The in-process retrieval service, if a corpus is configured.
    pub fn build_service(&self) -> Result<Option<RetrievalService>, ConfigError> {
        let Some(path) = &self.retrieval.corpus_path else {
            return Ok(None);
        };
        let index =
            index_corpus_file(path).map_err(|e| invalid("retrieval.corpus_path", e.to_string()))?;
        let mut svc = RetrievalService::new(index);
        if let Some(s) = self.build_summarizer()? {
            svc = svc.with_summarizer(s);
        }
        let online = &self.retrieval.online;
        if online.enabled {
            let key = api_key(&online.api_key_env)
                .ok_or_else(|| invalid("retrieval.online.api_key_env", "api key not set"))?;
            let fetcher = OnlineFetcher::new(
                Arc::new(BingSearch::new(&online.search_endpoint, &key)),
                Arc::new(HttpFetcher::default()),
            );
            svc = svc.with_online(fetcher, online.k);
        }
        Ok(Some(svc))
    }

    /// A remote service when `service_url` is set, else the in-process one.
    pub fn build_retriever(&self) -> Result<Option<Arc<dyn Retriever>>, ConfigError> {
        if let Some(url) = &self.retrieval.service_url {
            return Ok(Some(Arc::new(HttpRetriever::new(url))));
        }
        Ok(self
            .build_service()?
            .map(|s| Arc::new(s) as Arc<dyn Retriever>))
    }
}
