//! Text generation and tokenization backends.
//!
//! [`ScriptedBackend`] replays fixtures deterministically for tests and desk
//! runs. [`RemoteBackend`] talks to an OpenAI-style chat completion server
//! (vLLM and compatible) and its tokenizer endpoint.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use ur2_core::protocol::END_QUERY;
use ur2_core::tokens::{fnv1a64, Token, Tokenizer, WhitespaceTokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
}

impl SamplingParams {
    pub const TRAINING: SamplingParams = SamplingParams {
        temperature: 1.0,
        top_p: 0.9,
    };
    pub const EVALUATION: SamplingParams = SamplingParams {
        temperature: 0.3,
        top_p: 0.5,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    /// Prompt followed by the response generated so far.
    pub context: String,
    /// Byte offset in `context` where the response begins.
    pub prompt_len: usize,
    pub stop_sequences: Vec<String>,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
}

impl GenerationRequest {
    pub fn new(prompt: &str, response: &str, sampling: SamplingParams, seed: u64) -> Self {
        GenerationRequest {
            context: format!("{prompt}{response}"),
            prompt_len: prompt.len(),
            stop_sequences: Vec::new(),
            max_new_tokens: 1024,
            temperature: sampling.temperature,
            top_p: sampling.top_p,
            seed,
        }
    }

    pub fn prompt(&self) -> &str {
        &self.context[..self.prompt_len]
    }

    pub fn response(&self) -> &str {
        &self.context[self.prompt_len..]
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidRequest(m.to_string()));
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be positive");
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be finite and non-negative");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must be in (0, 1]");
        }
        if !self.context.is_char_boundary(self.prompt_len) {
            return bad("prompt_len is not a character boundary of context");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinishReason {
    Stop,
    Length,
    EndOfText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationChunk {
    pub text: String,
    pub tokens: Vec<Token>,
    pub finish_reason: FinishReason,
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("invalid generation request: {0}")]
    InvalidRequest(String),
    #[error("backend protocol error: {0}")]
    Protocol(String),
    #[error("no scripted response for this context")]
    ScriptMiss,
    #[error("cannot load script {path}: {detail}")]
    Script { path: String, detail: String },
}

/// A text generator with its own tokenizer. Implementations must be safe to
/// call from many threads at once.
pub trait Backend: Send + Sync {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationChunk, GatewayError>;
    fn tokenize(&self, text: &str) -> Result<Vec<Token>, GatewayError>;
}

/// Cuts `text` after the earliest stop sequence, keeping the stop text.
pub fn apply_stop(text: &str, stops: &[String]) -> (String, bool) {
    let earliest = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()).map(|i| i + s.len()))
        .min();
    match earliest {
        Some(end) => (text[..end].to_string(), true),
        None => (text.to_string(), false),
    }
}

/// One scripted behaviour, selected when the prompt contains `match`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(rename = "match")]
    pub pattern: String,
    /// Fixed output per turn; turn `t` is the number of query closings already
    /// in the response.
    #[serde(default)]
    pub turns: Option<Vec<String>>,
    /// Queries a sampled rollout may issue, in order.
    #[serde(default)]
    pub queries: Vec<String>,
    /// Candidate final answers; the seed picks one.
    #[serde(default)]
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Script {
    /// Exact outputs keyed by `context_key(context)`.
    #[serde(default)]
    pub responses: HashMap<String, String>,
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    /// Output when nothing else matches.
    #[serde(default)]
    pub default: Option<String>,
}

pub fn context_key(context: &str) -> String {
    format!("{:016x}", fnv1a64(context.as_bytes()))
}

fn mix(prompt: &str, seed: u64) -> u64 {
    let mut bytes = prompt.as_bytes().to_vec();
    bytes.push(0);
    bytes.extend_from_slice(&seed.to_le_bytes());
    fnv1a64(&bytes)
}

impl ScriptRule {
    fn output(&self, req: &GenerationRequest) -> String {
        let turn = req.response().matches(END_QUERY).count();
        if let Some(turns) = &self.turns {
            return turns.get(turn).cloned().unwrap_or_default();
        }
        let h = mix(req.prompt(), req.seed);
        let may_search = req.stop_sequences.iter().any(|s| s == END_QUERY);
        let n_queries = if may_search && !self.queries.is_empty() {
            (h % (self.queries.len() as u64 + 1)) as usize
        } else {
            0
        };
        if turn < n_queries {
            let lead = if turn == 0 {
                "I should look this up."
            } else {
                " That helps, but one more detail is needed."
            };
            return format!(
                "{lead} <|begin_of_query|> {} <|end_of_query|>",
                self.queries[turn]
            );
        }
        let answer = if self.answers.is_empty() {
            String::new()
        } else {
            self.answers[((h >> 16) % self.answers.len() as u64) as usize].clone()
        };
        if turn == 0 {
            format!("Reasoning directly, {answer}")
        } else {
            format!(" Putting the evidence together, {answer}")
        }
    }
}

/// Deterministic fixture-driven backend with whitespace tokenization.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    script: Script,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        ScriptedBackend { script }
    }

    pub fn from_path(path: &Path) -> Result<Self, GatewayError> {
        let err = |detail: String| GatewayError::Script {
            path: path.display().to_string(),
            detail,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let script = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        Ok(ScriptedBackend { script })
    }

    /// Always returns `text`, whatever the context.
    pub fn constant(text: &str) -> Self {
        ScriptedBackend::new(Script {
            default: Some(text.to_string()),
            ..Script::default()
        })
    }

    fn raw_output(&self, req: &GenerationRequest) -> Result<String, GatewayError> {
        if let Some(t) = self.script.responses.get(&context_key(&req.context)) {
            return Ok(t.clone());
        }
        if let Some(rule) = self
            .script
            .rules
            .iter()
            .find(|r| req.prompt().contains(r.pattern.as_str()))
        {
            return Ok(rule.output(req));
        }
        self.script.default.clone().ok_or(GatewayError::ScriptMiss)
    }
}

impl Backend for ScriptedBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationChunk, GatewayError> {
        req.validate()?;
        let raw = self.raw_output(req)?;
        let (text, stopped) = apply_stop(&raw, &req.stop_sequences);
        let mut tokens = WhitespaceTokenizer.tokenize(&text);
        if tokens.len() > req.max_new_tokens {
            tokens.truncate(req.max_new_tokens);
            let text = tokens.iter().map(|t| t.text.as_str()).collect();
            return Ok(GenerationChunk {
                text,
                tokens,
                finish_reason: FinishReason::Length,
            });
        }
        Ok(GenerationChunk {
            text,
            tokens,
            finish_reason: if stopped {
                FinishReason::Stop
            } else {
                FinishReason::EndOfText
            },
        })
    }

    fn tokenize(&self, text: &str) -> Result<Vec<Token>, GatewayError> {
        Ok(WhitespaceTokenizer.tokenize(text))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Chat completion URL, e.g. `http://host:8000/v1/chat/completions`.
    pub endpoint: String,
    /// Tokenizer URL, e.g. `http://host:8000/tokenize`.
    pub tokenizer_endpoint: Option<String>,
    pub model: String,
    pub api_key: Option<String>,
    pub max_retries: u32,
    pub retry_backoff_ms: u64,
    pub timeout_ms: u64,
}

impl RemoteConfig {
    pub fn new(endpoint: &str, model: &str) -> Self {
        RemoteConfig {
            endpoint: endpoint.to_string(),
            tokenizer_endpoint: None,
            model: model.to_string(),
            api_key: None,
            max_retries: 3,
            retry_backoff_ms: 200,
            timeout_ms: 600_000,
        }
    }
}

/// Chat completion client. The prompt is sent as the user turn and any
/// partial response as an assistant turn that the server continues.
pub struct RemoteBackend {
    cfg: RemoteConfig,
    agent: ureq::Agent,
    next_id: AtomicU64,
}

impl RemoteBackend {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build();
        RemoteBackend {
            cfg,
            agent,
            next_id: AtomicU64::new(0),
        }
    }

    fn post(&self, url: &str, body: &Value) -> Result<Value, GatewayError> {
        let id = format!("ur2-{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let payload = body.to_string();
        let mut attempt = 0;
        loop {
            let mut req = self
                .agent
                .post(url)
                .set("content-type", "application/json")
                .set("x-request-id", &id);
            if let Some(key) = &self.cfg.api_key {
                req = req.set("authorization", &format!("Bearer {key}"));
            }
            let retriable = match req.send_string(&payload) {
                Ok(resp) => {
                    if let Some(echo) = resp.header("x-request-id") {
                        if echo != id {
                            return Err(GatewayError::Protocol(format!(
                                "response for {echo} received on request {id}"
                            )));
                        }
                    }
                    let text = resp
                        .into_string()
                        .map_err(|e| GatewayError::BackendUnavailable(e.to_string()))?;
                    return serde_json::from_str(&text)
                        .map_err(|e| GatewayError::Protocol(format!("bad json: {e}")));
                }
                Err(ureq::Error::Status(code, resp)) if code == 429 || code >= 500 => {
                    format!("status {code}: {}", resp.into_string().unwrap_or_default())
                }
                Err(ureq::Error::Status(code, resp)) => {
                    return Err(GatewayError::Protocol(format!(
                        "status {code}: {}",
                        resp.into_string().unwrap_or_default()
                    )))
                }
                Err(ureq::Error::Transport(t)) => t.to_string(),
            };
            if attempt >= self.cfg.max_retries {
                return Err(GatewayError::BackendUnavailable(retriable));
            }
            std::thread::sleep(Duration::from_millis(
                self.cfg.retry_backoff_ms << attempt.min(10),
            ));
            attempt += 1;
        }
    }
}

impl Backend for RemoteBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationChunk, GatewayError> {
        req.validate()?;
        let mut messages = vec![json!({"role": "user", "content": req.prompt()})];
        let partial = !req.response().is_empty();
        if partial {
            messages.push(json!({"role": "assistant", "content": req.response()}));
        }
        let body = json!({
            "model": self.cfg.model,
            "messages": messages,
            "add_generation_prompt": !partial,
            "continue_final_message": partial,
            "stop": req.stop_sequences,
            "include_stop_str_in_output": true,
            "max_tokens": req.max_new_tokens,
            "temperature": req.temperature,
            "top_p": req.top_p,
            "seed": req.seed,
        });
        let resp = self.post(&self.cfg.endpoint, &body)?;
        let choice = &resp["choices"][0];
        let mut text = choice["message"]["content"]
            .as_str()
            .ok_or_else(|| GatewayError::Protocol("missing choices[0].message.content".into()))?
            .to_string();
        let finish_reason = match choice["finish_reason"].as_str() {
            Some("length") => FinishReason::Length,
            Some("stop") => match choice["stop_reason"].as_str() {
                Some(stop) => {
                    if !text.ends_with(stop) {
                        text.push_str(stop);
                    }
                    FinishReason::Stop
                }
                None => FinishReason::EndOfText,
            },
            _ => FinishReason::EndOfText,
        };
        let tokens = self.tokenize(&text)?;
        Ok(GenerationChunk {
            text,
            tokens,
            finish_reason,
        })
    }

    fn tokenize(&self, text: &str) -> Result<Vec<Token>, GatewayError> {
        if text.is_empty() {
            return Ok(Vec::new());
        }
        let url = self.cfg.tokenizer_endpoint.as_deref().ok_or_else(|| {
            GatewayError::BackendUnavailable("no tokenizer endpoint configured".into())
        })?;
        let body = json!({
            "model": self.cfg.model,
            "prompt": text,
            "add_special_tokens": false,
            "return_token_strs": true,
        });
        let resp = self.post(url, &body)?;
        let ids = resp["tokens"]
            .as_array()
            .ok_or_else(|| GatewayError::Protocol("missing tokens".into()))?;
        let strs = resp["token_strs"]
            .as_array()
            .ok_or_else(|| GatewayError::Protocol("missing token_strs".into()))?;
        if ids.len() != strs.len() {
            return Err(GatewayError::Protocol("tokens and token_strs differ in length".into()));
        }
        let mut pieces = Vec::with_capacity(ids.len());
        for (id, s) in ids.iter().zip(strs) {
            let id = id
                .as_u64()
                .and_then(|v| u32::try_from(v).ok())
                .ok_or_else(|| GatewayError::Protocol("bad token id".into()))?;
            let s = s
                .as_str()
                .ok_or_else(|| GatewayError::Protocol("bad token string".into()))?;
            pieces.push((id, piece_bytes(s)));
        }
        let joined: Vec<u8> = pieces.iter().flat_map(|(_, b)| b.iter().copied()).collect();
        if joined != text.as_bytes() {
            return Err(GatewayError::Protocol(
                "tokenizer pieces do not reconstruct the input".into(),
            ));
        }
        Ok(pieces
            .into_iter()
            .map(|(id, b)| Token {
                id,
                text: String::from_utf8_lossy(&b).into_owned(),
            })
            .collect())
    }
}

/// Inverse of the GPT-2 byte-to-unicode table.
fn byte_level_decoder() -> HashMap<char, u8> {
    let mut printable: Vec<u32> = (b'!' as u32..=b'~' as u32).collect();
    printable.extend(0xA1..=0xAC);
    printable.extend(0xAE..=0xFF);
    let mut map = HashMap::new();
    let mut extra = 0;
    for b in 0u32..256 {
        let c = if printable.contains(&b) {
            b
        } else {
            extra += 1;
            255 + extra
        };
        map.insert(char::from_u32(c).expect("table stays in BMP"), b as u8);
    }
    map
}

/// Raw bytes of one tokenizer piece: byte-level BPE, SentencePiece (`▁` and
/// `<0xNN>`) or plain text.
fn piece_bytes(piece: &str) -> Vec<u8> {
    if piece.len() == 6 && piece.starts_with("<0x") && piece.ends_with('>') {
        if let Ok(b) = u8::from_str_radix(&piece[3..5], 16) {
            return vec![b];
        }
    }
    if piece.contains('\u{2581}') {
        return piece.replace('\u{2581}', " ").into_bytes();
    }
    thread_local! {
        static DECODER: HashMap<char, u8> = byte_level_decoder();
    }
    DECODER.with(|d| {
        piece
            .chars()
            .map(|c| d.get(&c).copied())
            .collect::<Option<Vec<u8>>>()
            .unwrap_or_else(|| piece.as_bytes().to_vec())
    })
}
