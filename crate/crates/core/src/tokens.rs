//! Token model shared by the gateway, the masking code and the batch format.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub id: TokenId,
    pub text: String,
}

/// Splits text into tokens whose texts concatenate back to the input.
pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Vec<Token>;
}

/// Deterministic whitespace-preserving tokenizer used by the scripted backend.
///
/// Each token is one whitespace-delimited word together with the whitespace
/// that precedes it. Whitespace after the last word is folded into the last
/// token, and whitespace-only input becomes a single token, so the token
/// count equals the word count for any text containing a word.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<Token> {
        if text.is_empty() {
            return Vec::new();
        }
        // A new token starts at every whitespace run that precedes a word,
        // except before the first word.
        let mut starts = alloc::vec![0usize];
        let mut seen_word = false;
        let mut run_start: Option<usize> = None;
        for (i, c) in text.char_indices() {
            if c.is_whitespace() {
                run_start.get_or_insert(i);
            } else {
                if let Some(s) = run_start.take() {
                    if seen_word {
                        starts.push(s);
                    }
                }
                seen_word = true;
            }
        }
        starts
            .iter()
            .enumerate()
            .map(|(n, &s)| {
                let e = starts.get(n + 1).copied().unwrap_or(text.len());
                let piece = &text[s..e];
                Token {
                    id: word_id(piece),
                    text: String::from(piece),
                }
            })
            .collect()
    }
}

fn word_id(piece: &str) -> TokenId {
    (fnv1a64(piece.trim().as_bytes()) & 0x7fff_ffff) as TokenId
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
