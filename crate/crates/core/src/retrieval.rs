//! Corpus chunks, BM25 lexical search, dense cosine search and summary
//! classification.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;
use serde::{Deserialize, Serialize};

use crate::prompts::{FALLBACK_MARKER, SUMMARY_LABEL};

pub const MAX_CHUNK_WORDS: usize = 100;
pub const DEFAULT_TOP_K: usize = 10;
/// Raw chunks handed to the policy when summarization is disabled.
pub const NO_SUMMARY_TOP_K: usize = 3;
pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RetrievalError {
    #[error("duplicate chunk id {0}")]
    DuplicateChunkId(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("query is empty")]
    EmptyQuery,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("chunk {chunk_id}: {reason}")]
    InvalidChunk { chunk_id: String, reason: String },
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedder unavailable: {0}")]
    EmbedderUnavailable(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusChunk {
    pub doc_id: String,
    pub chunk_id: String,
    #[serde(alias = "title")]
    pub source_title: String,
    pub text: String,
}

impl CorpusChunk {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        let invalid = |reason: &str| RetrievalError::InvalidChunk {
            chunk_id: self.chunk_id.clone(),
            reason: String::from(reason),
        };
        if self.text.trim().is_empty() {
            return Err(invalid("empty text"));
        }
        if self.text.split_whitespace().count() > MAX_CHUNK_WORDS {
            return Err(invalid("more than 100 words"));
        }
        Ok(())
    }
}

/// Splits a document into consecutive chunks of at most `MAX_CHUNK_WORDS`
/// words. Chunk ids are `<doc_id>#<n>`.
pub fn chunk_document(doc_id: &str, title: &str, text: &str) -> Vec<CorpusChunk> {
    let words: Vec<&str> = text.split_whitespace().collect();
    words
        .chunks(MAX_CHUNK_WORDS)
        .enumerate()
        .map(|(i, w)| CorpusChunk {
            doc_id: String::from(doc_id),
            chunk_id: format!("{doc_id}#{i}"),
            source_title: String::from(title),
            text: w.join(" "),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    pub chunk: CorpusChunk,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: String,
    pub ranked: Vec<ScoredChunk>,
    pub summary: Option<String>,
    pub is_fallback: bool,
    /// Text injected into the transcript: the summary, or the raw chunks.
    pub payload: String,
}

impl RetrievalResult {
    /// Result with a summarizer reply; the fallback flag follows the summary.
    pub fn summarized(query: &str, ranked: Vec<ScoredChunk>, reply: &str) -> Self {
        let summary = parse_summary(reply);
        RetrievalResult {
            query: String::from(query),
            is_fallback: is_fallback(&summary),
            payload: summary.clone(),
            summary: Some(summary),
            ranked,
        }
    }

    /// Result without a summary; the payload lists the first `k` chunks.
    pub fn raw(query: &str, ranked: Vec<ScoredChunk>, k: usize) -> Self {
        let payload = raw_payload(&ranked[..k.min(ranked.len())]);
        RetrievalResult {
            query: String::from(query),
            ranked,
            summary: None,
            is_fallback: false,
            payload,
        }
    }

    pub fn is_sorted(&self) -> bool {
        self.ranked.windows(2).all(|w| rank_order(&w[0], &w[1]) != Ordering::Greater)
    }
}

/// Text after the last `**Final Information**` label, trimmed. Replies
/// without the label are used whole.
pub fn parse_summary(reply: &str) -> String {
    let body = match reply.rfind(SUMMARY_LABEL) {
        Some(i) => &reply[i + SUMMARY_LABEL.len()..],
        None => reply,
    };
    String::from(body.trim())
}

pub fn is_fallback(summary: &str) -> bool {
    summary.contains(FALLBACK_MARKER)
}

/// Numbered passages with titles, one per line.
pub fn raw_payload(chunks: &[ScoredChunk]) -> String {
    let lines: Vec<String> = chunks
        .iter()
        .enumerate()
        .map(|(i, c)| format!("Doc {} (Title: {}) {}", i + 1, c.chunk.source_title, c.chunk.text))
        .collect();
    lines.join("\n")
}

/// Lowercased alphanumeric runs.
pub fn lexical_terms(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.chars().flat_map(char::to_lowercase).collect())
        .collect()
}

/// Score descending, then chunk id ascending.
pub fn rank_order(a: &ScoredChunk, b: &ScoredChunk) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.chunk.chunk_id.cmp(&b.chunk.chunk_id))
}

pub fn bm25_idf(n: usize, df: usize) -> f64 {
    libm::log(1.0 + (n as f64 - df as f64 + 0.5) / (df as f64 + 0.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Posting {
    chunk: u32,
    tf: u32,
}

/// Immutable BM25 index over a chunk set.
///
/// A chunk's score is the sum over distinct query terms, in lexicographic
/// order, of `idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / avgdl))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    chunks: Vec<CorpusChunk>,
    postings: BTreeMap<String, Vec<Posting>>,
    doc_len: Vec<u32>,
    avgdl: f64,
}

impl CorpusIndex {
    pub fn build<I: IntoIterator<Item = CorpusChunk>>(chunks: I) -> Result<Self, RetrievalError> {
        let mut seen = BTreeSet::new();
        let mut all = Vec::new();
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_len = Vec::new();
        for chunk in chunks {
            chunk.validate()?;
            if !seen.insert(chunk.chunk_id.clone()) {
                return Err(RetrievalError::DuplicateChunkId(chunk.chunk_id));
            }
            let idx = all.len() as u32;
            let terms = lexical_terms(&chunk.text);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in &terms {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (term, tf) in tf {
                postings.entry(term).or_default().push(Posting { chunk: idx, tf });
            }
            doc_len.push(terms.len() as u32);
            all.push(chunk);
        }
        if all.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let total: u64 = doc_len.iter().map(|d| u64::from(*d)).sum();
        let avgdl = total as f64 / all.len() as f64;
        Ok(CorpusIndex {
            chunks: all,
            postings,
            doc_len,
            avgdl,
        })
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn chunks(&self) -> &[CorpusChunk] {
        &self.chunks
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    /// BM25 score of every chunk, in index order.
    pub fn score_all(&self, query: &str) -> Result<Vec<f64>, RetrievalError> {
        let terms: BTreeSet<String> = lexical_terms(query).into_iter().collect();
        if query.trim().is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        let n = self.chunks.len();
        let mut parts: Vec<Vec<f64>> = alloc::vec![Vec::new(); n];
        let avgdl = if self.avgdl > 0.0 { self.avgdl } else { 1.0 };
        for term in &terms {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let idf = bm25_idf(n, list.len());
            for p in list {
                let tf = f64::from(p.tf);
                let dl = f64::from(self.doc_len[p.chunk as usize]);
                let norm = BM25_K1 * (1.0 - BM25_B + BM25_B * dl / avgdl);
                parts[p.chunk as usize].push(idf * tf * (BM25_K1 + 1.0) / (tf + norm));
            }
        }
        // Summing in ascending order makes equal multisets of term
        // contributions produce bit-identical scores, so exact ties reach the
        // chunk id tie-break.
        Ok(parts
            .into_iter()
            .map(|mut v| {
                v.sort_by(f64::total_cmp);
                v.into_iter().sum()
            })
            .collect())
    }

    /// Top `k` chunks. When fewer than `k` chunks match, zero-score chunks
    /// fill the list in chunk id order.
    pub fn search(&self, query: &str, k: usize) -> Result<Vec<ScoredChunk>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        let scores = self.score_all(query)?;
        Ok(top_k(&self.chunks, &scores, k))
    }
}

fn top_k(chunks: &[CorpusChunk], scores: &[f64], k: usize) -> Vec<ScoredChunk> {
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| chunks[a].chunk_id.cmp(&chunks[b].chunk_id))
    });
    order
        .into_iter()
        .take(k)
        .map(|i| ScoredChunk {
            chunk: chunks[i].clone(),
            score: scores[i],
        })
        .collect()
}

/// Text embedding backend for the dense scorer.
pub trait Embedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError>;
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Chunk embeddings scored by cosine similarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseIndex {
    chunks: Vec<CorpusChunk>,
    vectors: Vec<Vec<f64>>,
}

impl DenseIndex {
    pub fn build<E: Embedder + ?Sized>(
        chunks: Vec<CorpusChunk>,
        embedder: &E,
    ) -> Result<Self, RetrievalError> {
        if chunks.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let mut seen = BTreeSet::new();
        let mut vectors = Vec::with_capacity(chunks.len());
        for c in &chunks {
            c.validate()?;
            if !seen.insert(c.chunk_id.as_str()) {
                return Err(RetrievalError::DuplicateChunkId(c.chunk_id.clone()));
            }
            let v = embedder.embed(&c.text)?;
            if let Some(first) = vectors.first().map(|f: &Vec<f64>| f.len()) {
                if v.len() != first {
                    return Err(RetrievalError::DimensionMismatch {
                        expected: first,
                        got: v.len(),
                    });
                }
            }
            vectors.push(v);
        }
        Ok(DenseIndex { chunks, vectors })
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn search<E: Embedder + ?Sized>(
        &self,
        embedder: &E,
        query: &str,
        k: usize,
    ) -> Result<Vec<ScoredChunk>, RetrievalError> {
        if query.trim().is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        let q = embedder.embed(query)?;
        let dim = self.vectors[0].len();
        if q.len() != dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: dim,
                got: q.len(),
            });
        }
        let scores: Vec<f64> = self.vectors.iter().map(|v| cosine(&q, v)).collect();
        Ok(top_k(&self.chunks, &scores, k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::FALLBACK_SUMMARY;

    fn chunk(id: &str, text: &str) -> CorpusChunk {
        CorpusChunk {
            doc_id: String::from("d"),
            chunk_id: String::from(id),
            source_title: String::from("T"),
            text: String::from(text),
        }
    }

    fn three() -> CorpusIndex {
        CorpusIndex::build([
            chunk("a", "the weather in spring"),
            chunk("b", "paris is the capital of france"),
            chunk("c", "berlin has many museums"),
        ])
        .unwrap()
    }

    #[test]
    fn builds_and_rejects() {
        assert_eq!(three().len(), 3);
        assert_eq!(
            CorpusIndex::build([chunk("a", "x"), chunk("a", "y")]),
            Err(RetrievalError::DuplicateChunkId(String::from("a")))
        );
        assert_eq!(CorpusIndex::build([]), Err(RetrievalError::EmptyCorpus));
        let long = alloc::vec!["w"; 101].join(" ");
        assert!(matches!(
            CorpusIndex::build([chunk("a", &long)]),
            Err(RetrievalError::InvalidChunk { .. })
        ));
    }

    #[test]
    fn search_ranks_matching_chunk_first() {
        let idx = three();
        let r = idx.search("capital of France", 1).unwrap();
        assert_eq!(r[0].chunk.chunk_id, "b");
        let all = idx.search("capital of France", 10).unwrap();
        assert_eq!(all.len(), 3);
        assert!(all.windows(2).all(|w| rank_order(&w[0], &w[1]) != Ordering::Greater));
        assert_eq!(all[1].chunk.chunk_id, "a");
        assert_eq!(all, idx.search("capital of France", 10).unwrap());
        assert_eq!(idx.search("  ", 3), Err(RetrievalError::EmptyQuery));
        assert_eq!(idx.search("x", 0), Err(RetrievalError::InvalidK));
    }

    #[test]
    fn chunking() {
        let text = alloc::vec!["w"; 250].join(" ");
        let c = chunk_document("doc", "T", &text);
        assert_eq!(c.len(), 3);
        assert_eq!(c[2].text.split_whitespace().count(), 50);
        assert_eq!(c[1].chunk_id, "doc#1");
    }

    #[test]
    fn summaries() {
        let r = RetrievalResult::summarized(
            "q",
            Vec::new(),
            "**Final Information**\nParis is the capital of France.",
        );
        assert_eq!(r.summary.as_deref(), Some("Paris is the capital of France."));
        assert!(!r.is_fallback);
        let reply = format!("Step 1 ...\n**Final Information**\n{FALLBACK_SUMMARY}");
        let r = RetrievalResult::summarized("q", Vec::new(), &reply);
        assert!(r.is_fallback);
        assert_eq!(r.payload, FALLBACK_SUMMARY);
    }

    #[test]
    fn raw_payload_lists_k_chunks() {
        let idx = three();
        let ranked = idx.search("paris", 10).unwrap();
        let r = RetrievalResult::raw("paris", ranked, NO_SUMMARY_TOP_K);
        assert_eq!(r.payload.lines().count(), 3);
        assert!(r.payload.starts_with("Doc 1 (Title: T) paris"));
        assert!(r.summary.is_none() && !r.is_fallback);
    }

    struct Letters;
    impl Embedder for Letters {
        fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
            let mut v = alloc::vec![0.0; 26];
            for c in text.bytes().filter(u8::is_ascii_lowercase) {
                v[(c - b'a') as usize] += 1.0;
            }
            Ok(v)
        }
    }

    #[test]
    fn dense_search() {
        let idx = DenseIndex::build(
            alloc::vec![chunk("a", "zzz"), chunk("b", "abc"), chunk("c", "xyz")],
            &Letters,
        )
        .unwrap();
        let r = idx.search(&Letters, "zz", 2).unwrap();
        assert_eq!(r[0].chunk.chunk_id, "a");
        assert!((r[0].score - 1.0).abs() < 1e-12);
        assert_eq!(r[1].chunk.chunk_id, "c");
    }
}
