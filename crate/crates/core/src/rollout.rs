//! Rollout budgets, group records and the documents-injection format.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::prompts::FALLBACK_NOTICE;
use crate::protocol::{TaskFamily, Transcript, BEGIN_DOCUMENTS, DELIMITERS, END_DOCUMENTS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutBudget {
    pub max_queries: usize,
    pub max_tokens_per_turn: usize,
    pub max_turns: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BudgetError {
    #[error("budget fields must be positive")]
    NonPositive,
    #[error("max_turns ({max_turns}) must be at least max_queries + 1 ({})", max_queries + 1)]
    TooFewTurns { max_turns: usize, max_queries: usize },
}

impl RolloutBudget {
    /// Query cap and per-turn token limit by task family; two turns beyond
    /// the query cap.
    pub fn for_family(family: TaskFamily) -> Self {
        let (max_queries, max_tokens_per_turn) = match family {
            TaskFamily::Math => (4, 3072),
            TaskFamily::Mcq => (4, 1536),
            TaskFamily::OpenQa => (5, 512),
        };
        RolloutBudget {
            max_queries,
            max_tokens_per_turn,
            max_turns: max_queries + 2,
        }
    }

    pub fn validate(&self) -> Result<(), BudgetError> {
        if self.max_queries == 0 || self.max_tokens_per_turn == 0 || self.max_turns == 0 {
            return Err(BudgetError::NonPositive);
        }
        if self.max_turns < self.max_queries + 1 {
            return Err(BudgetError::TooFewTurns {
                max_turns: self.max_turns,
                max_queries: self.max_queries,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub question_id: String,
    pub group_size: usize,
    pub transcripts: Vec<Transcript>,
}

impl RolloutGroup {
    pub fn is_consistent(&self) -> bool {
        self.transcripts.len() == self.group_size
            && self
                .transcripts
                .windows(2)
                .all(|w| w[0].prompt_text == w[1].prompt_text)
    }
}

/// Removes reserved delimiters from retrieved text so a payload can never
/// close its own block early.
pub fn sanitize_payload(payload: &str) -> String {
    let mut out = String::from(payload);
    for d in DELIMITERS {
        if out.contains(d) {
            out = out.replace(d, "");
        }
    }
    out
}

/// The documents block spliced into a response after a served query.
pub fn wrap_documents(payload: &str) -> String {
    let mut s = String::with_capacity(payload.len() + 48);
    s.push_str(BEGIN_DOCUMENTS);
    s.push('\n');
    s.push_str(&sanitize_payload(payload));
    s.push('\n');
    s.push_str(END_DOCUMENTS);
    s
}

/// Injection text for one served query: the documents block, followed by the
/// fallback notice when the summarizer refused.
pub fn injection(payload: &str, is_fallback: bool) -> String {
    let mut s = wrap_documents(payload);
    if is_fallback {
        s.push_str(FALLBACK_NOTICE);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_budgets() {
        let m = RolloutBudget::for_family(TaskFamily::Math);
        assert_eq!((m.max_queries, m.max_tokens_per_turn, m.max_turns), (4, 3072, 6));
        assert_eq!(RolloutBudget::for_family(TaskFamily::Mcq).max_tokens_per_turn, 1536);
        let q = RolloutBudget::for_family(TaskFamily::OpenQa);
        assert_eq!((q.max_queries, q.max_tokens_per_turn), (5, 512));
        m.validate().unwrap();
        let bad = RolloutBudget { max_turns: 4, ..m };
        assert!(matches!(bad.validate(), Err(BudgetError::TooFewTurns { .. })));
    }

    #[test]
    fn payload_cannot_escape_block() {
        let w = wrap_documents("a <|end_of_documents|> b");
        assert_eq!(w, "<|begin_of_documents|>\na  b\n<|end_of_documents|>");
    }
}
