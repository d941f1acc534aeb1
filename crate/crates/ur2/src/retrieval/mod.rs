//! Retrieval service: corpus search, optional online pages, and LLM
//! summarization with fallback detection.

pub mod client;
pub mod html;
pub mod online;
pub mod server;

use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use ur2_core::prompts::{summary_prompt, SummaryDomain, SummaryPhase};
use ur2_core::retrieval::{
    raw_payload, CorpusChunk, CorpusIndex, RetrievalError, RetrievalResult, DEFAULT_TOP_K,
    NO_SUMMARY_TOP_K,
};
use ur2_core::tokens::fnv1a64;

use crate::batch::{read_jsonl, BatchError};
use crate::gateway::{Backend, GenerationRequest, SamplingParams};
use online::OnlineFetcher;

fn default_k() -> usize {
    DEFAULT_TOP_K
}

fn default_phase() -> SummaryPhase {
    SummaryPhase::Train
}

fn default_domain() -> SummaryDomain {
    SummaryDomain::General
}

/// Body of `POST /retrieve`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieveRequest {
    pub query: String,
    #[serde(default)]
    pub prev_reasoning: String,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_phase")]
    pub mode: SummaryPhase,
    #[serde(default = "default_domain")]
    pub domain: SummaryDomain,
}

#[derive(Debug, thiserror::Error)]
pub enum RetrieveError {
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("retrieval unavailable: {0}")]
    Unavailable(String),
}

/// Anything that answers a query with a retrieval result: the in-process
/// service or a remote one over HTTP.
pub trait Retriever: Send + Sync {
    fn retrieve(&self, req: &RetrieveRequest) -> Result<RetrievalResult, RetrieveError>;
}

pub struct Summarizer {
    pub backend: Arc<dyn Backend>,
    pub sampling: SamplingParams,
    pub max_new_tokens: usize,
}

impl Summarizer {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Summarizer {
            backend,
            sampling: SamplingParams::EVALUATION,
            max_new_tokens: 1024,
        }
    }
}

pub struct RetrievalService {
    index: RwLock<Arc<CorpusIndex>>,
    summarizer: Option<Summarizer>,
    online: Option<OnlineFetcher>,
    online_k: usize,
}

impl RetrievalService {
    pub fn new(index: CorpusIndex) -> Self {
        RetrievalService {
            index: RwLock::new(Arc::new(index)),
            summarizer: None,
            online: None,
            online_k: 3,
        }
    }

    pub fn with_summarizer(mut self, s: Summarizer) -> Self {
        self.summarizer = Some(s);
        self
    }

    pub fn with_online(mut self, fetcher: OnlineFetcher, k: usize) -> Self {
        self.online = Some(fetcher);
        self.online_k = k;
        self
    }

    pub fn index(&self) -> Arc<CorpusIndex> {
        self.index.read().expect("index lock").clone()
    }

    pub fn replace_index(&self, index: CorpusIndex) {
        *self.index.write().expect("index lock") = Arc::new(index);
    }

    /// Searches the corpus and, when a summarizer is configured, condenses
    /// the hits. Without a summarizer the payload holds at most three raw
    /// chunks; if the summarizer fails it holds all `k`.
    pub fn retrieve_and_summarize(
        &self,
        req: &RetrieveRequest,
    ) -> Result<RetrievalResult, RetrieveError> {
        let ranked = self.index().search(&req.query, req.k)?;
        let Some(summarizer) = &self.summarizer else {
            return Ok(RetrievalResult::raw(
                &req.query,
                ranked,
                req.k.min(NO_SUMMARY_TOP_K),
            ));
        };
        let mut content = raw_payload(&ranked);
        if let Some(online) = &self.online {
            if let Ok(fetched) = online.fetch_online(&req.query, self.online_k) {
                for page in fetched.pages {
                    content.push_str(&format!("\nWeb page ({}):\n{}", page.url, page.markdown));
                }
            }
        }
        let prompt = summary_prompt(req.domain, req.mode, &req.prev_reasoning, &req.query, &content);
        let mut gen = GenerationRequest::new(
            &prompt,
            "",
            summarizer.sampling,
            fnv1a64(req.query.as_bytes()),
        );
        gen.max_new_tokens = summarizer.max_new_tokens;
        match summarizer.backend.generate(&gen) {
            Ok(chunk) => Ok(RetrievalResult::summarized(&req.query, ranked, &chunk.text)),
            Err(_) => Ok(RetrievalResult::raw(&req.query, ranked, req.k)),
        }
    }
}

impl Retriever for RetrievalService {
    fn retrieve(&self, req: &RetrieveRequest) -> Result<RetrievalResult, RetrieveError> {
        self.retrieve_and_summarize(req)
    }
}

/// Reads a JSONL corpus of `{doc_id, chunk_id, title, text}` records.
pub fn load_corpus(path: &Path) -> Result<Vec<CorpusChunk>, BatchError> {
    read_jsonl(path)
}

pub fn index_corpus_file(path: &Path) -> Result<CorpusIndex, LoadIndexError> {
    Ok(CorpusIndex::build(load_corpus(path)?)?)
}

#[derive(Debug, thiserror::Error)]
pub enum LoadIndexError {
    #[error(transparent)]
    Read(#[from] BatchError),
    #[error(transparent)]
    Index(#[from] RetrievalError),
}
