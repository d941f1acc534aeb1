//! [`Retriever`] backed by a remote retrieval service.

use std::time::Duration;

use ur2_core::retrieval::RetrievalResult;

use super::{RetrieveError, RetrieveRequest, Retriever};

pub struct HttpRetriever {
    url: String,
    agent: ureq::Agent,
}

impl HttpRetriever {
    /// `base` is the service root, e.g. `http://127.0.0.1:8090`.
    pub fn new(base: &str) -> Self {
        HttpRetriever {
            url: format!("{}/retrieve", base.trim_end_matches('/')),
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(300))
                .build(),
        }
    }
}

impl Retriever for HttpRetriever {
    fn retrieve(&self, req: &RetrieveRequest) -> Result<RetrievalResult, RetrieveError> {
        let body = serde_json::to_string(req).map_err(|e| RetrieveError::Unavailable(e.to_string()))?;
        let text = self
            .agent
            .post(&self.url)
            .set("content-type", "application/json")
            .send_string(&body)
            .map_err(|e| RetrieveError::Unavailable(e.to_string()))?
            .into_string()
            .map_err(|e| RetrieveError::Unavailable(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| RetrieveError::Unavailable(e.to_string()))
    }
}
