//! Advantage estimation and retrieval masking.
//!
//! Each trajectory reward is centred on its group mean, whitened within the
//! group, then whitened again across the whole batch. The resulting scalar
//! is broadcast to every token the policy wrote; prompt tokens, injected
//! documents and fallback notices get a zero mask and zero advantage.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::protocol::Transcript;
use crate::rewards::{Preset, Stage};
use crate::rollout::RolloutGroup;
use crate::tokens::TokenId;

pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CreditError {
    #[error("group {index} has {size} trajectories; at least 2 are required")]
    GroupTooSmall { index: usize, size: usize },
    #[error("group {index}: {rewards} rewards for {trajectories} trajectories")]
    LengthMismatch {
        index: usize,
        rewards: usize,
        trajectories: usize,
    },
    #[error("eps must be positive and finite, got {0}")]
    InvalidEps(f64),
    #[error("group {index} contains a non-finite reward")]
    NonFiniteReward { index: usize },
    #[error("segment {segment} span {start}..{end} does not continue the tiling at {expected}")]
    SpanGap {
        segment: usize,
        start: usize,
        end: usize,
        expected: usize,
    },
    #[error("segment spans end at {covered} but the response has {tokens} tokens")]
    SpanCoverage { covered: usize, tokens: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredGroup {
    pub group: RolloutGroup,
    pub rewards: Vec<f64>,
    pub stage: Stage,
    pub preset: Preset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub question_id: String,
    pub group_index: usize,
    pub prompt_tokens: Vec<TokenId>,
    pub response_tokens: Vec<TokenId>,
    /// One entry per prompt token followed by one per response token.
    pub action_mask: Vec<u8>,
    /// Same layout as `action_mask`; zero wherever the mask is zero.
    pub advantage: Vec<f64>,
    pub reward: f64,
    pub stage: u8,
    pub preset: String,
}

impl TrajectoryRecord {
    /// The trajectory-level advantage carried by every unmasked token.
    pub fn scalar_advantage(&self) -> Option<f64> {
        self.action_mask
            .iter()
            .zip(&self.advantage)
            .find(|(m, _)| **m == 1)
            .map(|(_, a)| *a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageBatch {
    pub records: Vec<TrajectoryRecord>,
    pub batch_stats: BatchStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedRewards {
    /// Final trajectory advantages, shaped like the input groups.
    pub advantages: Vec<Vec<f64>>,
    /// Group-centred rewards `R_i - b`.
    pub centered: Vec<Vec<f64>>,
    pub batch_stats: BatchStats,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
fn pop_std(xs: &[f64], mean: f64) -> f64 {
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
    libm::sqrt(var)
}

fn is_constant(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] == w[1])
}

/// `(x - mean) / max(std, eps)` with population std; constant input maps to
/// zeros.
fn whiten(xs: &[f64], eps: f64) -> (Vec<f64>, BatchStats) {
    if xs.is_empty() {
        return (Vec::new(), BatchStats { mean: 0.0, std: 0.0 });
    }
    let m = mean(xs);
    let s = pop_std(xs, m);
    if is_constant(xs) {
        return (vec![0.0; xs.len()], BatchStats { mean: m, std: 0.0 });
    }
    let denom = if s > eps { s } else { eps };
    (
        xs.iter().map(|x| (x - m) / denom).collect(),
        BatchStats { mean: m, std: s },
    )
}

/// Two-level normalization of trajectory rewards.
///
/// Groups whose rewards are all equal carry no signal and end with exactly
/// zero advantage.
pub fn normalize_rewards(groups: &[Vec<f64>], eps: f64) -> Result<NormalizedRewards, CreditError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(CreditError::InvalidEps(eps));
    }
    let mut centered = Vec::with_capacity(groups.len());
    let mut group_normed = Vec::with_capacity(groups.len());
    for (index, rewards) in groups.iter().enumerate() {
        if rewards.len() < 2 {
            return Err(CreditError::GroupTooSmall {
                index,
                size: rewards.len(),
            });
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(CreditError::NonFiniteReward { index });
        }
        let baseline = mean(rewards);
        let c: Vec<f64> = if is_constant(rewards) {
            vec![0.0; rewards.len()]
        } else {
            rewards.iter().map(|r| r - baseline).collect()
        };
        group_normed.push(whiten(&c, eps).0);
        centered.push(c);
    }

    let flat: Vec<f64> = group_normed.iter().flatten().copied().collect();
    let (batch, batch_stats) = whiten(&flat, eps);

    let mut advantages = Vec::with_capacity(groups.len());
    let mut offset = 0;
    for (rewards, normed) in groups.iter().zip(&group_normed) {
        let n = normed.len();
        if is_constant(rewards) {
            advantages.push(vec![0.0; n]);
        } else {
            advantages.push(batch[offset..offset + n].to_vec());
        }
        offset += n;
    }
    Ok(NormalizedRewards {
        advantages,
        centered,
        batch_stats,
    })
}

/// Per-token action mask over prompt followed by response tokens: 1 for
/// model text and queries, 0 for prompt, documents and notices.
pub fn build_action_mask(t: &Transcript) -> Result<Vec<u8>, CreditError> {
    let mut mask = vec![0u8; t.prompt_tokens.len()];
    let mut expected = 0;
    for (segment, seg) in t.segments.iter().enumerate() {
        let span = seg.token_span;
        if span.start != expected || span.end < span.start {
            return Err(CreditError::SpanGap {
                segment,
                start: span.start,
                end: span.end,
                expected,
            });
        }
        let bit = u8::from(seg.kind.is_action());
        mask.extend(core::iter::repeat(bit).take(span.len()));
        expected = span.end;
    }
    if expected != t.response_tokens.len() {
        return Err(CreditError::SpanCoverage {
            covered: expected,
            tokens: t.response_tokens.len(),
        });
    }
    Ok(mask)
}

/// Turns scored groups into trainer records.
pub fn compute_advantages(groups: &[ScoredGroup], eps: f64) -> Result<AdvantageBatch, CreditError> {
    for (index, g) in groups.iter().enumerate() {
        if g.rewards.len() != g.group.transcripts.len() {
            return Err(CreditError::LengthMismatch {
                index,
                rewards: g.rewards.len(),
                trajectories: g.group.transcripts.len(),
            });
        }
    }
    let rewards: Vec<Vec<f64>> = groups.iter().map(|g| g.rewards.clone()).collect();
    let normalized = normalize_rewards(&rewards, eps)?;

    let mut records = Vec::new();
    for (g, advs) in groups.iter().zip(&normalized.advantages) {
        for (i, (t, adv)) in g.group.transcripts.iter().zip(advs).enumerate() {
            let action_mask = build_action_mask(t)?;
            let advantage = action_mask
                .iter()
                .map(|m| if *m == 1 { *adv } else { 0.0 })
                .collect();
            records.push(TrajectoryRecord {
                question_id: g.group.question_id.clone(),
                group_index: i,
                prompt_tokens: t.prompt_tokens.clone(),
                response_tokens: t.response_tokens.clone(),
                action_mask,
                advantage,
                reward: g.rewards[i],
                stage: g.stage.number(),
                preset: String::from(g.preset.name()),
            });
        }
    }
    Ok(AdvantageBatch {
        records,
        batch_stats: normalized.batch_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{parse_transcript, PromptMode, TaskFamily};
    use crate::tokens::{Tokenizer, WhitespaceTokenizer};

    fn adv(groups: &[&[f64]]) -> Vec<Vec<f64>> {
        let g: Vec<Vec<f64>> = groups.iter().map(|g| g.to_vec()).collect();
        normalize_rewards(&g, DEFAULT_EPS).unwrap().advantages
    }

    #[test]
    fn two_member_group() {
        let a = adv(&[&[2.0, 0.0]]);
        assert!((a[0][0] - 1.0).abs() < 1e-6);
        assert!((a[0][1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_group_is_zero() {
        assert_eq!(adv(&[&[3.0, 3.0, 3.0]]), vec![vec![0.0; 3]]);
        let a = adv(&[&[0.1, 0.1, 0.1], &[1.0, 0.0]]);
        assert_eq!(a[0], vec![0.0; 3]);
    }

    #[test]
    fn two_groups_whitened() {
        let a = adv(&[&[5.0, 1.0], &[4.0, 0.0]]);
        let flat: Vec<f64> = a.into_iter().flatten().collect();
        let m = mean(&flat);
        assert!(m.abs() < 1e-9);
        assert!((pop_std(&flat, m) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            normalize_rewards(&[vec![1.0]], 1e-8),
            Err(CreditError::GroupTooSmall { index: 0, size: 1 })
        ));
        assert!(matches!(
            normalize_rewards(&[vec![1.0, 2.0]], 0.0),
            Err(CreditError::InvalidEps(_))
        ));
        assert!(matches!(
            normalize_rewards(&[vec![1.0, f64::NAN]], 1e-8),
            Err(CreditError::NonFiniteReward { index: 0 })
        ));
    }

    fn tokenized(raw: &str) -> Transcript {
        let mut t = parse_transcript("p q\n", raw, TaskFamily::Math, PromptMode::Retrieval);
        t.assign_tokens::<()>(|s| Ok(WhitespaceTokenizer.tokenize(s))).unwrap();
        t
    }

    #[test]
    fn mask_without_retrieval() {
        let t = tokenized("just reasoning \\boxed{1}");
        let m = build_action_mask(&t).unwrap();
        assert_eq!(m, vec![0, 0, 1, 1, 1]);
    }

    #[test]
    fn mask_zeroes_forty_document_tokens() {
        let words: Vec<String> = (0..38).map(|i| alloc::format!("w{i}")).collect();
        let docs = crate::rollout::wrap_documents(&words.join(" "));
        let raw = alloc::format!("think <|begin_of_query|> q <|end_of_query|>{docs} done");
        let t = tokenized(&raw);
        let m = build_action_mask(&t).unwrap();
        let response = &m[t.prompt_tokens.len()..];
        assert_eq!(response.iter().filter(|b| **b == 0).count(), 40);
        let docs_span = t.segments[2].token_span;
        assert!(response[docs_span.start..docs_span.end].iter().all(|b| *b == 0));
    }

    #[test]
    fn span_gap_detected() {
        let mut t = tokenized("a <|begin_of_query|> q <|end_of_query|> b");
        t.segments[1].token_span.start += 1;
        assert!(matches!(build_action_mask(&t), Err(CreditError::SpanGap { segment: 1, .. })));
    }
}
