//! Transcript data model and the query/documents tag grammar.
//!
//! A rollout response is a flat string in which the model writes free text
//! and search queries, and the rollout driver splices retrieved documents
//! (and, after a refused query, a fixed notice) right after each query.
//! [`parse_transcript`] recovers that structure from the bytes alone, so a
//! transcript can always be rebuilt from its concatenated text.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use serde::{Deserialize, Serialize};

use crate::prompts::FALLBACK_NOTICE;
use crate::tokens::{Token, TokenId};

pub const BEGIN_QUERY: &str = "<|begin_of_query|>";
pub const END_QUERY: &str = "<|end_of_query|>";
pub const BEGIN_DOCUMENTS: &str = "<|begin_of_documents|>";
pub const END_DOCUMENTS: &str = "<|end_of_documents|>";

/// All reserved protocol strings.
pub const DELIMITERS: [&str; 4] = [BEGIN_QUERY, END_QUERY, BEGIN_DOCUMENTS, END_DOCUMENTS];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Math,
    OpenQa,
    Mcq,
}

impl TaskFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskFamily::Math => "math",
            TaskFamily::OpenQa => "open_qa",
            TaskFamily::Mcq => "mcq",
        }
    }
}

impl core::str::FromStr for TaskFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "math" => Ok(TaskFamily::Math),
            "open_qa" => Ok(TaskFamily::OpenQa),
            "mcq" => Ok(TaskFamily::Mcq),
            other => Err(alloc::format!("unknown task family '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Retrieval,
    Direct,
}

impl PromptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Retrieval => "retrieval",
            PromptMode::Direct => "direct",
        }
    }
}

impl core::str::FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "retrieval" => Ok(PromptMode::Retrieval),
            "direct" => Ok(PromptMode::Direct),
            other => Err(alloc::format!("unknown prompt mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentKind {
    ModelText,
    Query,
    InjectedDocs,
    FallbackNotice,
}

impl SegmentKind {
    /// Whether the policy authored these tokens (and so trains on them).
    pub fn is_action(self) -> bool {
        matches!(self, SegmentKind::ModelText | SegmentKind::Query)
    }
}

/// Half-open range into the response token sequence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    /// Raw bytes of the segment, delimiters included.
    pub text: String,
    pub token_span: TokenSpan,
    /// False for a tag opened but never closed.
    pub well_formed: bool,
}

impl Segment {
    fn new(kind: SegmentKind, text: &str, well_formed: bool) -> Self {
        Segment {
            kind,
            text: text.to_string(),
            token_span: TokenSpan::default(),
            well_formed,
        }
    }

    /// Text between the delimiters, trimmed. Model text and notices are
    /// returned unchanged.
    pub fn content(&self) -> &str {
        let (open, close) = match self.kind {
            SegmentKind::Query => (BEGIN_QUERY, END_QUERY),
            SegmentKind::InjectedDocs => (BEGIN_DOCUMENTS, END_DOCUMENTS),
            _ => return &self.text,
        };
        let inner = self.text.strip_prefix(open).unwrap_or(&self.text);
        inner.strip_suffix(close).unwrap_or(inner).trim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TagKind {
    Query,
    Documents,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParseIssue {
    /// An opening delimiter with no close before the next delimiter or the end of text.
    UnterminatedTag { tag: TagKind, byte_offset: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("unterminated {tag:?} tag at byte {byte_offset}")]
    UnterminatedTag { tag: TagKind, byte_offset: usize },
    #[error("illegal segment order at segment {index}: {detail}")]
    IllegalOrder { index: usize, detail: &'static str },
    #[error("segment text does not reproduce the transcript")]
    TextMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub prompt_text: String,
    pub segments: Vec<Segment>,
    pub task_family: TaskFamily,
    pub prompt_mode: PromptMode,
    /// Filled by [`Transcript::assign_tokens`]; empty until then.
    #[serde(default)]
    pub prompt_tokens: Vec<TokenId>,
    #[serde(default)]
    pub response_tokens: Vec<TokenId>,
    #[serde(default)]
    pub issues: Vec<ParseIssue>,
}

impl Transcript {
    /// Response bytes: every segment text in order.
    pub fn response_text(&self) -> String {
        self.segments.iter().map(|s| s.text.as_str()).collect()
    }

    /// Prompt followed by the response, byte-exact.
    pub fn full_text(&self) -> String {
        let mut s = self.prompt_text.clone();
        for seg in &self.segments {
            s.push_str(&seg.text);
        }
        s
    }

    pub fn queries(&self) -> impl Iterator<Item = &Segment> {
        self.segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Query)
    }

    /// Number of well-formed documents blocks, i.e. queries that were served.
    pub fn served_query_count(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.kind == SegmentKind::InjectedDocs && s.well_formed)
            .count()
    }

    pub fn fallback_count(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.kind == SegmentKind::FallbackNotice)
            .count()
    }

    /// First unterminated tag, if any.
    pub fn check_terminated(&self) -> Result<(), ProtocolError> {
        match self.issues.first() {
            Some(ParseIssue::UnterminatedTag { tag, byte_offset }) => {
                Err(ProtocolError::UnterminatedTag {
                    tag: *tag,
                    byte_offset: *byte_offset,
                })
            }
            None => Ok(()),
        }
    }

    /// Checks the segment ordering rules: documents only right after a
    /// query, a notice only right after a documents block carrying a refusal.
    pub fn check_structure(&self) -> Result<(), ProtocolError> {
        for (i, seg) in self.segments.iter().enumerate() {
            let prev = i.checked_sub(1).map(|p| &self.segments[p]);
            match seg.kind {
                SegmentKind::InjectedDocs => {
                    if !matches!(prev, Some(p) if p.kind == SegmentKind::Query && p.well_formed) {
                        return Err(ProtocolError::IllegalOrder {
                            index: i,
                            detail: "documents block not preceded by a query",
                        });
                    }
                }
                SegmentKind::FallbackNotice => {
                    let ok = matches!(prev, Some(p) if p.kind == SegmentKind::InjectedDocs
                        && crate::retrieval::is_fallback(p.content()));
                    if !ok {
                        return Err(ProtocolError::IllegalOrder {
                            index: i,
                            detail: "fallback notice not preceded by a refused documents block",
                        });
                    }
                }
                SegmentKind::Query if !seg.well_formed => {}
                SegmentKind::Query => {
                    if seg.content().is_empty() {
                        return Err(ProtocolError::IllegalOrder {
                            index: i,
                            detail: "empty query",
                        });
                    }
                }
                SegmentKind::ModelText => {
                    if matches!(prev, Some(p) if p.kind == SegmentKind::ModelText) {
                        return Err(ProtocolError::IllegalOrder {
                            index: i,
                            detail: "adjacent model text segments",
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Tokenizes the prompt and every segment separately and records each
    /// segment's span in the response token sequence.
    pub fn assign_tokens<E>(
        &mut self,
        mut tokenize: impl FnMut(&str) -> Result<Vec<Token>, E>,
    ) -> Result<(), E> {
        self.prompt_tokens = tokenize(&self.prompt_text)?
            .into_iter()
            .map(|t| t.id)
            .collect();
        self.response_tokens.clear();
        for seg in &mut self.segments {
            let toks = tokenize(&seg.text)?;
            let start = self.response_tokens.len();
            self.response_tokens.extend(toks.iter().map(|t| t.id));
            seg.token_span = TokenSpan {
                start,
                end: self.response_tokens.len(),
            };
        }
        Ok(())
    }
}

fn next_delimiter(text: &str, from: usize) -> Option<(usize, &'static str)> {
    let mut at = from;
    while let Some(rel) = text[at..].find("<|") {
        let idx = at + rel;
        if let Some(d) = DELIMITERS.iter().find(|d| text[idx..].starts_with(**d)) {
            return Some((idx, d));
        }
        at = idx + 2;
    }
    None
}

struct Segmenter<'a> {
    raw: &'a str,
    segments: Vec<Segment>,
    issues: Vec<ParseIssue>,
    /// Start of model text not yet emitted.
    text_start: usize,
}

impl<'a> Segmenter<'a> {
    fn flush_text(&mut self, until: usize) {
        if until > self.text_start {
            let piece = &self.raw[self.text_start..until];
            self.segments
                .push(Segment::new(SegmentKind::ModelText, piece, true));
        }
        self.text_start = until;
    }

    fn push(&mut self, kind: SegmentKind, start: usize, end: usize, well_formed: bool) {
        self.segments
            .push(Segment::new(kind, &self.raw[start..end], well_formed));
        self.text_start = end;
    }

    /// Consumes a documents block (and notice) starting exactly at `at`.
    /// Returns the position after whatever was consumed.
    fn documents_at(&mut self, at: usize) -> usize {
        if !self.raw[at..].starts_with(BEGIN_DOCUMENTS) {
            return at;
        }
        let body = at + BEGIN_DOCUMENTS.len();
        match next_delimiter(self.raw, body) {
            Some((j, d)) if d == END_DOCUMENTS => {
                let end = j + END_DOCUMENTS.len();
                self.push(SegmentKind::InjectedDocs, at, end, true);
                if self.raw[end..].starts_with(FALLBACK_NOTICE) {
                    let notice_end = end + FALLBACK_NOTICE.len();
                    self.push(SegmentKind::FallbackNotice, end, notice_end, true);
                    return notice_end;
                }
                end
            }
            other => {
                let end = other.map_or(self.raw.len(), |(j, _)| j);
                self.issues.push(ParseIssue::UnterminatedTag {
                    tag: TagKind::Documents,
                    byte_offset: at,
                });
                self.push(SegmentKind::InjectedDocs, at, end, false);
                end
            }
        }
    }

    fn run(mut self) -> (Vec<Segment>, Vec<ParseIssue>) {
        let raw = self.raw;
        let mut pos = 0;
        while let Some((idx, delim)) = next_delimiter(raw, pos) {
            if delim != BEGIN_QUERY {
                // stray closing tag or unsolicited documents block: stays
                // inside model text and is reported by validation
                pos = idx + delim.len();
                continue;
            }
            let body = idx + BEGIN_QUERY.len();
            match next_delimiter(raw, body) {
                Some((j, d)) if d == END_QUERY => {
                    if raw[body..j].trim().is_empty() {
                        pos = body;
                        continue;
                    }
                    self.flush_text(idx);
                    let end = j + END_QUERY.len();
                    self.push(SegmentKind::Query, idx, end, true);
                    pos = self.documents_at(end);
                }
                other => {
                    let end = other.map_or(raw.len(), |(j, _)| j);
                    self.flush_text(idx);
                    self.issues.push(ParseIssue::UnterminatedTag {
                        tag: TagKind::Query,
                        byte_offset: idx,
                    });
                    self.push(SegmentKind::Query, idx, end, false);
                    pos = end;
                }
            }
        }
        self.flush_text(raw.len());
        (self.segments, self.issues)
    }
}

/// Segments a rollout response.
///
/// Every non-empty `<|begin_of_query|>…<|end_of_query|>` pair becomes a
/// `Query`; a documents block directly after a query becomes `InjectedDocs`,
/// and the fixed fallback notice directly after that block becomes a
/// `FallbackNotice`. Everything else, stray delimiters included, is
/// `ModelText`. Unterminated tags still yield a segment (marked
/// `well_formed = false`) and are listed in `issues`.
pub fn parse_transcript(
    prompt: &str,
    raw: &str,
    task_family: TaskFamily,
    prompt_mode: PromptMode,
) -> Transcript {
    let (segments, issues) = Segmenter {
        raw,
        segments: Vec::new(),
        issues: Vec::new(),
        text_start: 0,
    }
    .run();
    Transcript {
        prompt_text: prompt.to_string(),
        segments,
        task_family,
        prompt_mode,
        prompt_tokens: Vec::new(),
        response_tokens: Vec::new(),
        issues,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatLimits {
    pub max_query_words: usize,
    pub max_queries: usize,
}

impl FormatLimits {
    pub fn for_family(family: TaskFamily) -> Self {
        FormatLimits {
            max_query_words: 20,
            max_queries: match family {
                TaskFamily::OpenQa => 5,
                TaskFamily::Math | TaskFamily::Mcq => 4,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViolationKind {
    MalformedTag,
    OverlongQuery,
    MissingRetrieval,
    IllegalToken,
    MissingFinalAnswer,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatReport {
    pub violations: Vec<ViolationKind>,
    pub compliant: bool,
}

impl FormatReport {
    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| **v == kind).count()
    }
}

fn count_delimiters(text: &str) -> usize {
    let mut n = 0;
    let mut pos = 0;
    while let Some((idx, d)) = next_delimiter(text, pos) {
        n += 1;
        pos = idx + d.len();
    }
    n
}

/// Lists every independent format violation, one entry per occurrence.
pub fn validate_format(t: &Transcript, limits: &FormatLimits) -> FormatReport {
    let mut violations = Vec::new();
    for seg in &t.segments {
        match seg.kind {
            SegmentKind::ModelText => {
                for _ in 0..count_delimiters(&seg.text) {
                    violations.push(ViolationKind::IllegalToken);
                }
            }
            SegmentKind::Query => {
                if !seg.well_formed {
                    violations.push(ViolationKind::MalformedTag);
                } else if seg.content().split_whitespace().count() > limits.max_query_words {
                    violations.push(ViolationKind::OverlongQuery);
                }
            }
            SegmentKind::InjectedDocs => {
                if !seg.well_formed {
                    violations.push(ViolationKind::MalformedTag);
                }
            }
            SegmentKind::FallbackNotice => {}
        }
    }
    if t.prompt_mode == PromptMode::Retrieval && t.queries().next().is_none() {
        violations.push(ViolationKind::MissingRetrieval);
    }
    if extract_answer(t).is_none() {
        violations.push(ViolationKind::MissingFinalAnswer);
    }
    FormatReport {
        compliant: violations.is_empty(),
        violations,
    }
}

/// Final answer written by the model, searched in model text only so that
/// retrieved documents cannot supply it.
pub fn extract_answer(t: &Transcript) -> Option<String> {
    t.segments
        .iter()
        .rev()
        .filter(|s| s.kind == SegmentKind::ModelText)
        .find_map(|s| extract_answer_text(&s.text, t.task_family))
}

/// Answer extraction over plain text: the option letter after the last
/// "the correct answer is" for multiple choice, otherwise the content of
/// the last balanced `\boxed{...}`.
pub fn extract_answer_text(text: &str, family: TaskFamily) -> Option<String> {
    match family {
        TaskFamily::Mcq => last_option_letter(text).map(|c| c.to_string()),
        TaskFamily::Math | TaskFamily::OpenQa => last_boxed(text).map(str::to_string),
    }
}

const ANSWER_LEAD: &str = "the correct answer is";

fn last_option_letter(text: &str) -> Option<char> {
    let lower = text.to_ascii_lowercase();
    let bytes = text.as_bytes();
    let mut found = None;
    let mut from = 0;
    while let Some(rel) = lower[from..].find(ANSWER_LEAD) {
        let start = from + rel;
        from = start + ANSWER_LEAD.len();
        let mut i = from;
        while i < bytes.len() && (bytes[i] == b' ' || bytes[i] == b'\t') {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b':' {
            i += 1;
        }
        while i < bytes.len() && matches!(bytes[i], b' ' | b'\t' | b'(' | b'[' | b'*') {
            i += 1;
        }
        if i < bytes.len() && bytes[i].is_ascii_alphabetic() {
            let after = bytes.get(i + 1).copied();
            if !after.is_some_and(|b| b.is_ascii_alphanumeric()) {
                found = Some(bytes[i].to_ascii_uppercase() as char);
            }
        }
    }
    found
}

const BOXED: &str = "\\boxed{";

fn last_boxed(text: &str) -> Option<&str> {
    let mut found = None;
    let mut from = 0;
    while let Some(rel) = text[from..].find(BOXED) {
        let open = from + rel + BOXED.len();
        from = open;
        let mut depth = 1usize;
        for (i, b) in text.as_bytes()[open..].iter().enumerate() {
            match b {
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        found = Some(&text[open..open + i]);
                        break;
                    }
                }
                _ => {}
            }
        }
    }
    found
}
