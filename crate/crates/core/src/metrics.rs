//! Answer metrics: exact match, bag-of-tokens F1 and judge verdict parsing.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::prompts::{fill, JUDGE_MATH, JUDGE_QA};
use crate::protocol::TaskFamily;
use crate::rewards::match_answer;

/// Lowercase, drop ASCII punctuation, drop the articles a/an/the, collapse
/// whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered: String = s
        .chars()
        .flat_map(char::to_lowercase)
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    let words: Vec<&str> = lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect();
    words.join(" ")
}

/// 1 if the prediction is the same option letter as the gold answer.
pub fn exact_match(pred: &str, gold: &str) -> u8 {
    u8::from(match_answer(Some(pred), gold, TaskFamily::Mcq))
}

/// Harmonic mean of token precision and recall over normalized multisets.
/// Both empty gives 1, exactly one empty gives 0.
pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    let p: Vec<&str> = p.split_whitespace().collect();
    let g: Vec<&str> = g.split_whitespace().collect();
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for w in &g {
        *counts.entry(w).or_default() += 1;
    }
    let mut overlap = 0usize;
    for w in &p {
        if let Some(c) = counts.get_mut(w) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    Math,
    Qa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Correct,
    PartiallyCorrect,
    Incorrect,
}

impl Verdict {
    /// Scalar used when averaging; partial credit counts half.
    pub fn score(self) -> f64 {
        match self {
            Verdict::Correct => 1.0,
            Verdict::PartiallyCorrect => 0.5,
            Verdict::Incorrect => 0.0,
        }
    }
}

pub fn judge_prompt(kind: JudgeKind, question: &str, gold: &str, pred: &str) -> String {
    match kind {
        JudgeKind::Math => fill(
            JUDGE_MATH,
            &[("question", question), ("gold", gold), ("pred", pred)],
        ),
        JudgeKind::Qa => fill(
            JUDGE_QA,
            &[
                ("question", question),
                ("gold_answer", gold),
                ("predicted_answer", pred),
            ],
        ),
    }
}

/// Parses a judge reply. Math replies are read from the last `Judgment:`
/// line; QA replies must be exactly `True` or `False` (surrounding whitespace
/// and quotes allowed).
pub fn parse_verdict(kind: JudgeKind, reply: &str) -> Option<Verdict> {
    match kind {
        JudgeKind::Qa => match reply.trim().trim_matches('"').trim() {
            "True" => Some(Verdict::Correct),
            "False" => Some(Verdict::Incorrect),
            _ => None,
        },
        JudgeKind::Math => {
            let line = reply
                .lines()
                .rev()
                .find_map(|l| {
                    let lower = l.to_ascii_lowercase();
                    lower
                        .find("judgment:")
                        .map(|i| String::from(&lower[i + "judgment:".len()..]))
                })?;
            let value: String = line
                .chars()
                .filter(|c| c.is_ascii_alphabetic() || *c == ' ')
                .collect();
            let value = value.trim();
            if value.starts_with("partially correct") {
                Some(Verdict::PartiallyCorrect)
            } else if value.starts_with("incorrect") {
                Some(Verdict::Incorrect)
            } else if value.starts_with("correct") {
                Some(Verdict::Correct)
            } else {
                None
            }
        }
    }
}
